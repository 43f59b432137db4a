#include "dmr/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace dmr {

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'M', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kFeatureMagic[8] = {'D', 'M', 'R', 'F', 'E', 'A', 'T', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw config_error(std::string("checkpoint: truncated reading ") + what);
  return v;
}

void write_string(std::ofstream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint64_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const char* what) {
  const auto len = read_pod<std::uint64_t>(in, what);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw config_error(std::string("checkpoint: truncated reading ") + what);
  return s;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(out, kCheckpointVersion);
  write_string(out, model.cfg.to_text());
  const auto arrays = model.named_arrays();
  write_pod(out, static_cast<std::uint64_t>(arrays.size()));
  for (const auto& [name, tensor] : arrays) {
    write_string(out, name);
    write_pod(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (int d : tensor.shape()) write_pod(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
  }
  if (!out) throw config_error("failed writing checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot read checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw config_error("'" + path + "' is not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw config_error("checkpoint version " + std::to_string(version) + " not supported");
  const RunConfig cfg = RunConfig::from_text(read_string(in, "config"));

  Model model = init_model(cfg);  // same structure; arrays overwritten below
  auto arrays = model.named_arrays();
  const auto count = read_pod<std::uint64_t>(in, "array count");
  if (count != arrays.size())
    throw config_error("checkpoint has " + std::to_string(count) + " arrays, expected " +
                       std::to_string(arrays.size()));
  for (auto& [name, tensor] : arrays) {
    const std::string got = read_string(in, "array name");
    if (got != name)
      throw config_error("checkpoint array '" + got + "' does not match expected '" + name + "'");
    const auto ndim = read_pod<std::uint32_t>(in, "array rank");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(read_pod<std::uint32_t>(in, "array extent"));
    if (shape != tensor.shape())
      throw config_error("checkpoint array '" + name + "' has shape " + shape_str(shape) +
                         ", expected " + shape_str(tensor.shape()));
    in.read(reinterpret_cast<char*>(tensor.data().data()),
            static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    if (!in) throw config_error("checkpoint: truncated reading array '" + name + "'");
  }
  return model;
}

void write_loss_csv(const std::string& path, const std::vector<LossTerms>& curve) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot write loss CSV '" + path + "'");
  out << "step,loss_smpl,loss_joints3d,loss_joints2d,loss_mesh,total\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const LossTerms& t = curve[i];
    out << i << "," << fmt17(t.smpl) << "," << fmt17(t.joints3d) << "," << fmt17(t.joints2d)
        << "," << fmt17(t.mesh) << "," << fmt17(t.total) << "\n";
  }
}

void write_eval_report_json(const std::string& path, const EvalReport& report) {
  nlohmann::json j;
  j["mpjpe_mm"] = report.mpjpe_mm;
  j["pa_mpjpe_mm"] = report.pa_mpjpe_mm;
  j["pve_mm"] = report.pve_mm;
  nlohmann::json rows = nlohmann::json::array();
  for (const SampleMetrics& m : report.per_sample) {
    rows.push_back({{"mpjpe_mm", m.mpjpe_mm},
                    {"pa_mpjpe_mm", m.pa_mpjpe_mm},
                    {"pve_mm", m.pve_mm}});
  }
  j["per_sample"] = rows;
  std::ofstream out(path);
  if (!out) throw config_error("cannot write report '" + path + "'");
  out << j.dump(2) << "\n";
}

void write_eval_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot write report CSV '" + path + "'");
  out << "sample,mpjpe_mm,pa_mpjpe_mm,pve_mm\n";
  for (std::size_t i = 0; i < report.per_sample.size(); ++i) {
    const SampleMetrics& m = report.per_sample[i];
    out << i << "," << fmt17(m.mpjpe_mm) << "," << fmt17(m.pa_mpjpe_mm) << ","
        << fmt17(m.pve_mm) << "\n";
  }
}

void write_hotspots_json(const std::string& path, const std::vector<Hotspot>& hotspots,
                         double threshold) {
  nlohmann::json j;
  j["threshold"] = threshold;
  nlohmann::json rows = nlohmann::json::array();
  for (const Hotspot& h : hotspots) {
    rows.push_back({{"layer", h.layer},
                    {"head", h.head},
                    {"y", h.y},
                    {"x", h.x},
                    {"weight", h.weight}});
  }
  j["hotspots"] = rows;
  std::ofstream out(path);
  if (!out) throw config_error("cannot write hotspots '" + path + "'");
  out << j.dump(2) << "\n";
}

void write_pgm(const std::string& path, int width, int height,
               const std::vector<unsigned char>& pixels) {
  if (static_cast<std::size_t>(width) * height != pixels.size())
    throw shape_error("write_pgm: pixel count does not match extents");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write graymap '" + path + "'");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

std::vector<std::string> write_attention_graymaps(const std::string& out_dir,
                                                  const AttentionTrace& trace, int upscale) {
  if (trace.empty()) throw state_error("write_attention_graymaps: empty trace");
  std::vector<std::string> files;
  const int H = trace.height, W = trace.width, HW = H * W;
  const int hpg = trace.num_heads / trace.num_groups;
  const int iw = W * upscale, ih = H * upscale;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const AttentionTraceLayer& layer = trace.layers[l];
    for (int h = 0; h < trace.num_heads; ++h) {
      // base heat: attention mass summed over the queries, per grid cell
      std::vector<double> mass(HW, 0.0);
      double peak = 1e-12;
      for (int s = 0; s < HW; ++s) {
        for (int q = 0; q < trace.num_queries; ++q)
          mass[s] += layer.weights[(static_cast<std::size_t>(h) * trace.num_queries + q) * HW + s];
        peak = std::max(peak, mass[s]);
      }
      std::vector<unsigned char> img(static_cast<std::size_t>(iw) * ih, 0);
      for (int y = 0; y < ih; ++y)
        for (int x = 0; x < iw; ++x) {
          const int cell = (y / upscale) * W + (x / upscale);
          img[static_cast<std::size_t>(y) * iw + x] =
              static_cast<unsigned char>(200.0 * mass[cell] / peak);
        }
      // sampling-position overlay: bright dot at each continuous position
      const int g = h / hpg;
      for (int s = 0; s < HW; ++s) {
        const double py = layer.positions[(static_cast<std::size_t>(g) * 2 + 0) * HW + s];
        const double px = layer.positions[(static_cast<std::size_t>(g) * 2 + 1) * HW + s];
        const int y = static_cast<int>(std::lround((py + 1.0) * 0.5 * H * upscale));
        const int x = static_cast<int>(std::lround((px + 1.0) * 0.5 * W * upscale));
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < ih && xx >= 0 && xx < iw)
              img[static_cast<std::size_t>(yy) * iw + xx] = 255;
          }
      }
      const std::string path = out_dir + "/attn_l" + std::to_string(l) + "_h" +
                               std::to_string(h) + ".pgm";
      write_pgm(path, iw, ih, img);
      files.push_back(path);
    }
  }
  return files;
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::json j;
  j["command"] = manifest.command;
  j["tool_version"] = kToolVersion;
  j["seed"] = manifest.seed;
  j["config"] = manifest.config_text;
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& [k, v] : manifest.inputs) inputs[k] = v;
  nlohmann::json outputs = nlohmann::json::object();
  for (const auto& [k, v] : manifest.outputs) outputs[k] = v;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  std::ofstream out(path);
  if (!out) throw config_error("cannot write manifest '" + path + "'");
  out << j.dump(2) << "\n";
}

void save_feature_file(const std::string& path, const std::vector<SyntheticSample>& data) {
  if (data.empty()) throw config_error("save_feature_file: empty dataset");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write feature file '" + path + "'");
  out.write(kFeatureMagic, sizeof(kFeatureMagic));
  const Shape& cs = data[0].context.shape();
  write_pod(out, static_cast<std::uint32_t>(data.size()));
  write_pod(out, static_cast<std::uint32_t>(cs[0]));
  write_pod(out, static_cast<std::uint32_t>(cs[1]));
  write_pod(out, static_cast<std::uint32_t>(cs[2]));
  for (const SyntheticSample& s : data) {
    auto dump = [&out](const Tensor& t) {
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    };
    dump(s.context);
    dump(s.params.theta);
    dump(s.params.beta);
    dump(s.params.camera);
  }
}

std::vector<SyntheticSample> load_feature_file(const std::string& path,
                                               const DecoderConfig& expected,
                                               const BodyTemplate& tmpl) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot read feature file '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kFeatureMagic, sizeof(magic)) != 0)
    throw config_error("'" + path + "' is not a feature file");
  const auto n = read_pod<std::uint32_t>(in, "sample count");
  const int C = static_cast<int>(read_pod<std::uint32_t>(in, "channels"));
  const int H = static_cast<int>(read_pod<std::uint32_t>(in, "height"));
  const int W = static_cast<int>(read_pod<std::uint32_t>(in, "width"));
  if (C != expected.context_channels || H != expected.context_height ||
      W != expected.context_width) {
    throw config_error("feature file shape [" + std::to_string(C) + "," + std::to_string(H) +
                       "," + std::to_string(W) + "] does not match config");
  }
  std::vector<SyntheticSample> data;
  data.reserve(n);
  auto read_tensor = [&in](Shape shape, const char* what) {
    std::vector<double> buf(numel_of(shape));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!in) throw config_error(std::string("feature file: truncated reading ") + what);
    return Tensor::from_data(std::move(shape), std::move(buf));
  };
  for (std::uint32_t i = 0; i < n; ++i) {
    SyntheticSample s;
    s.context = read_tensor({C, H, W}, "context");
    s.params.theta = read_tensor({kNumJoints, 6}, "theta");
    s.params.beta = read_tensor({kNumShapes}, "beta");
    s.params.camera = read_tensor({3}, "camera");
    if (s.params.camera.data()[0] <= 0.0)
      throw config_error("feature file: non-positive camera scale in sample " +
                         std::to_string(i));
    MeshOutput mesh = lbs_forward(s.params, tmpl);  // keeps GT fields consistent
    s.joints3d = mesh.joints3d;
    s.joints2d = mesh.joints2d;
    s.vertices = mesh.vertices;
    data.push_back(std::move(s));
  }
  return data;
}

}  // namespace dmr

#include "dmr/config.hpp"

#include <fstream>
#include <sstream>

namespace dmr {

const char* pe_type_name(PeType t) {
  switch (t) {
    case PeType::none: return "none";
    case PeType::absolute: return "absolute";
    case PeType::relative: return "relative";
  }
  return "none";
}

PeType pe_type_from_name(const std::string& name) {
  if (name == "none") return PeType::none;
  if (name == "absolute") return PeType::absolute;
  if (name == "relative") return PeType::relative;
  throw config_error("unknown pe_type '" + name + "' (expected none|absolute|relative)");
}

void DecoderConfig::validate() const {
  if (model_dim <= 0 || num_heads <= 0 || num_groups <= 0 || num_layers < 0 ||
      context_channels <= 0 || context_height <= 0 || context_width <= 0 || ffn_mult <= 0) {
    throw config_error("decoder config has non-positive extents");
  }
  if (offset_range <= 0.0) throw config_error("offset_range must be positive");
  if (num_heads % num_groups != 0)
    throw config_error("num_heads " + std::to_string(num_heads) +
                       " not divisible by num_groups " + std::to_string(num_groups));
  if (context_channels % num_groups != 0)
    throw config_error("context_channels " + std::to_string(context_channels) +
                       " not divisible by num_groups " + std::to_string(num_groups));
  if (model_dim % num_heads != 0)
    throw config_error("model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                       std::to_string(num_heads));
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error("key '" + key + "': expected true|false, got '" + v + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected unsigned integer, got '" + v + "'");
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::map<std::string, std::string> parse_key_value_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) + " is not key=value: '" +
                         line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw config_error("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "model_dim=" << decoder.model_dim << "\n";
  os << "num_heads=" << decoder.num_heads << "\n";
  os << "num_groups=" << decoder.num_groups << "\n";
  os << "offset_range=" << fmt_double(decoder.offset_range) << "\n";
  os << "num_layers=" << decoder.num_layers << "\n";
  os << "single_query=" << (decoder.single_query ? "true" : "false") << "\n";
  os << "deformable=" << (decoder.deformable ? "true" : "false") << "\n";
  os << "pe_type=" << pe_type_name(decoder.pe_type) << "\n";
  os << "context_channels=" << decoder.context_channels << "\n";
  os << "context_height=" << decoder.context_height << "\n";
  os << "context_width=" << decoder.context_width << "\n";
  os << "ffn_mult=" << decoder.ffn_mult << "\n";
  os << "dataset_size=" << dataset_size << "\n";
  os << "template_vertices=" << template_vertices << "\n";
  os << "steps=" << steps << "\n";
  os << "lr=" << fmt_double(lr) << "\n";
  os << "weight_decay=" << fmt_double(weight_decay) << "\n";
  os << "seed=" << seed << "\n";
  return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  for (const auto& [key, val] : parse_key_value_text(text)) {
    if (key == "model_dim") cfg.decoder.model_dim = to_int(key, val);
    else if (key == "num_heads") cfg.decoder.num_heads = to_int(key, val);
    else if (key == "num_groups") cfg.decoder.num_groups = to_int(key, val);
    else if (key == "offset_range") cfg.decoder.offset_range = to_double(key, val);
    else if (key == "num_layers") cfg.decoder.num_layers = to_int(key, val);
    else if (key == "single_query") cfg.decoder.single_query = to_bool(key, val);
    else if (key == "deformable") cfg.decoder.deformable = to_bool(key, val);
    else if (key == "pe_type") cfg.decoder.pe_type = pe_type_from_name(val);
    else if (key == "context_channels") cfg.decoder.context_channels = to_int(key, val);
    else if (key == "context_height") cfg.decoder.context_height = to_int(key, val);
    else if (key == "context_width") cfg.decoder.context_width = to_int(key, val);
    else if (key == "ffn_mult") cfg.decoder.ffn_mult = to_int(key, val);
    else if (key == "dataset_size") cfg.dataset_size = to_int(key, val);
    else if (key == "template_vertices") cfg.template_vertices = to_int(key, val);
    else if (key == "steps") cfg.steps = to_int(key, val);
    else if (key == "lr") cfg.lr = to_double(key, val);
    else if (key == "weight_decay") cfg.weight_decay = to_double(key, val);
    else if (key == "seed") cfg.seed = to_u64(key, val);
    else throw config_error("unknown config key '" + key + "'");
  }
  cfg.decoder.validate();
  if (cfg.dataset_size < 1 || cfg.template_vertices < 24 || cfg.steps < 0 || cfg.lr <= 0.0 ||
      cfg.weight_decay < 0.0) {
    throw config_error("invalid training settings");
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return from_text(os.str());
}

}  // namespace dmr

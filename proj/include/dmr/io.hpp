#pragma once

// File formats: checkpoint binary, loss-curve CSV, evaluation report JSON and
// per-sample CSV, run manifests, P5 graymaps, and the external feature file
// hook. All writers are deterministic: identical inputs give identical bytes.

#include <string>
#include <vector>

#include "dmr/decoder.hpp"
#include "dmr/evaluation.hpp"
#include "dmr/training.hpp"

namespace dmr {

inline constexpr const char* kToolVersion = "1.0.0";

// Checkpoint: magic, format version, resolved config echo (key=value text),
// then named flat float64 arrays with shapes. Little-endian host layout.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

void write_loss_csv(const std::string& path, const std::vector<LossTerms>& curve);

void write_eval_report_json(const std::string& path, const EvalReport& report);
void write_eval_report_csv(const std::string& path, const EvalReport& report);

void write_hotspots_json(const std::string& path, const std::vector<Hotspot>& hotspots,
                         double threshold);

// One graymap per (layer, head): attention mass per cell, upscaled, with the
// sampling positions overlaid as bright dots. Returns the files written.
std::vector<std::string> write_attention_graymaps(const std::string& out_dir,
                                                  const AttentionTrace& trace, int upscale = 24);

void write_pgm(const std::string& path, int width, int height,
               const std::vector<unsigned char>& pixels);

struct RunManifest {
  std::string command;
  std::string config_text;  // resolved RunConfig echo
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;
  std::vector<std::pair<std::string, std::string>> outputs;
};

void write_manifest(const std::string& path, const RunManifest& manifest);

// External feature-map hook: binary file carrying context maps plus their
// ground-truth parameters, standing in for real encoder features.
//   magic "DMRFEAT1", u32 n, u32 C, u32 H, u32 W,
//   then per sample: C*H*W context doubles, 144 theta, 10 beta, 3 camera.
void save_feature_file(const std::string& path, const std::vector<SyntheticSample>& data);
std::vector<SyntheticSample> load_feature_file(const std::string& path,
                                               const DecoderConfig& expected,
                                               const BodyTemplate& tmpl);

}  // namespace dmr

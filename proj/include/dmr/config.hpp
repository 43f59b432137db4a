#pragma once

// Decoder hyperparameters and run settings, read from plain key=value files.

#include <cstdint>
#include <map>
#include <string>

#include "dmr/errors.hpp"

namespace dmr {

enum class PeType { none, absolute, relative };

const char* pe_type_name(PeType t);
PeType pe_type_from_name(const std::string& name);

struct DecoderConfig {
  int model_dim = 32;        // D
  int num_heads = 8;
  int num_groups = 4;        // G; heads are distributed across groups
  double offset_range = 1.0; // lambda_o, in units of grid spacing
  int num_layers = 6;
  bool single_query = false; // 1 token emitting all parameters through widened heads
  bool deformable = true;    // false: fixed-grid cross-attention (positions = reference grid)
  PeType pe_type = PeType::relative;
  int context_channels = 32; // C
  int context_height = 8;    // H
  int context_width = 8;     // W
  int ffn_mult = 4;

  int num_queries() const { return single_query ? 1 : 25; }
  int head_dim() const { return model_dim / num_heads; }
  int heads_per_group() const { return num_heads / num_groups; }
  int group_channels() const { return context_channels / num_groups; }
  int group_dim() const { return model_dim / num_groups; }
  int rpe_height() const { return 2 * context_height - 1; }
  int rpe_width() const { return 2 * context_width - 1; }

  void validate() const;  // throws config_error
};

// Full run settings: decoder config plus the synthetic-data / training knobs
// that the CLI resolves and echoes into checkpoints and manifests.
struct RunConfig {
  DecoderConfig decoder;
  int dataset_size = 8;
  int template_vertices = 120;
  int steps = 500;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  std::uint64_t seed = 7;

  std::string to_text() const;  // deterministic key order
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
};

// key=value parsing ('#' starts a comment); unknown keys are config errors
std::map<std::string, std::string> parse_key_value_text(const std::string& text);

}  // namespace dmr

#pragma once

// The named gradient-check rows behind `dmr gradcheck` and the acceptance
// suite: every differentiable kernel plus one full decoder layer.

#include <cstdint>
#include <string>
#include <vector>

#include "dmr/config.hpp"

namespace dmr {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// decoder_cfg shapes the full-layer row; num_layers is forced to 1.
// include_broken_row appends a control op with a deliberately wrong backward,
// which must fail (used to prove the harness detects bad gradients).
std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed,
                                              const DecoderConfig& decoder_cfg,
                                              double tolerance = 1e-4,
                                              bool include_broken_row = false);

DecoderConfig gradcheck_default_config();  // D=8, H=W=2, heads=2, G=1

}  // namespace dmr

#pragma once

// Multi-query transformer decoder whose cross-attention samples keys/values
// at context-conditioned continuous positions. The sampling positions are a
// normalized reference grid plus tanh-bounded offsets predicted from the
// context alone, so they are identical for every query token.

#include <vector>

#include "dmr/config.hpp"
#include "dmr/ops.hpp"
#include "dmr/rng.hpp"

namespace dmr {

// reference + offsets = positions, each [(B*G), 2, H, W]
struct SamplingField {
  Tensor reference;
  Tensor offsets;
  Tensor positions;
};

struct DecoderLayerParams {
  // pre-norm layer norms
  Tensor ln_self_g, ln_self_b;
  Tensor ln_cross_g, ln_cross_b;
  Tensor ln_ffn_g, ln_ffn_b;
  // self-attention projections [D,D] with [D] biases
  Tensor sa_wq, sa_bq, sa_wk, sa_bk, sa_wv, sa_bv, sa_wo, sa_bo;
  // cross-attention: queries [D,D]; keys/values are per-group [C/G, D/G]
  Tensor ca_wq, ca_bq;
  Tensor ca_wk, ca_bk, ca_wv, ca_bv;
  Tensor ca_wo, ca_bo;
  // offset network (deformable only): grouped 3x3 conv, channel layer norm,
  // GELU, grouped 1x1 conv down to 2 offset channels per group
  Tensor off_w1, off_b1, off_ln_g, off_ln_b, off_w2, off_b2;
  // positional encodings
  Tensor rpe_table;  // [heads, Q, 2H-1, 2W-1], pe_type == relative
  Tensor abs_pe;     // [C, H, W], pe_type == absolute
  // feed-forward
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct DecoderParams {
  Tensor query_tokens;  // [Q, D]; rows 0..23 pose queries, row 24 the shape query
  std::vector<DecoderLayerParams> layers;
};

DecoderParams init_decoder_params(const DecoderConfig& cfg, Rng& rng);

// Per-layer record of one sample's sampling positions and attention weights.
struct AttentionTraceLayer {
  std::vector<double> positions;  // [G, 2, H, W]
  std::vector<double> weights;    // [heads, Q, H*W]
};

struct AttentionTrace {
  int num_groups = 0, num_heads = 0, num_queries = 0;
  int height = 0, width = 0;
  std::vector<AttentionTraceLayer> layers;
  bool empty() const { return layers.empty(); }
};

struct Hotspot {
  int layer = 0;
  int head = 0;
  double y = 0.0;  // normalized sampling coordinates
  double x = 0.0;
  double weight = 0.0;  // attention mass summed over the queries
};

// Entry (i, j) is exactly (2i/H - 1, 2j/W - 1), replicated batch_groups times.
Tensor make_reference_grid(int height, int width, int batch_groups);

// Raw per-group offsets from the context only: grouped conv -> channel layer
// norm -> GELU -> grouped 1x1 conv, reshaped to [(B*G), 2, H, W].
Tensor offset_network(const Tensor& context, const DecoderLayerParams& p,
                      const DecoderConfig& cfg);

// tanh then per-axis scaling by lambda_o * 2/extent, so |offset| stays below
// lambda_o grid spacings.
Tensor scale_offsets(const Tensor& raw, double offset_range, int height, int width);

SamplingField compute_sampling_field(const Tensor& context, const DecoderLayerParams& p,
                                     const DecoderConfig& cfg);

// Full deformable cross-attention including the residual on the tokens.
// field_out/attn_out expose the sampling field and post-softmax weights
// ([B, heads, Q, H*W]) when non-null.
Tensor deformable_cross_attention(const Tensor& tokens, const Tensor& context,
                                  const DecoderLayerParams& p, const DecoderConfig& cfg,
                                  SamplingField* field_out = nullptr,
                                  Tensor* attn_out = nullptr);

// Standard multi-head self-attention over the tokens plus residual.
Tensor self_attention(const Tensor& tokens, const DecoderLayerParams& p,
                      const DecoderConfig& cfg);

// num_layers of pre-norm (self-attention, deformable cross-attention, FFN),
// query tokens broadcast over the batch. Records sample 0 into trace when
// requested. Throws numeric_error naming the layer on non-finite values.
Tensor decoder_forward(const Tensor& context, const DecoderParams& params,
                       const DecoderConfig& cfg, AttentionTrace* trace = nullptr);

// Sampling positions whose attention mass summed over the queries exceeds
// threshold, sorted by descending mass. Throws state_error on an empty trace.
std::vector<Hotspot> extract_attention_hotspots(const AttentionTrace& trace,
                                                double threshold = 0.25);

}  // namespace dmr

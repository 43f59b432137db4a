#include "dmr/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dmr {

namespace {

constexpr double kLayerNormEps = 1e-5;

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(numel_of(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), /*requires_grad=*/true); }

void check_context(const Tensor& context, const DecoderConfig& cfg) {
  if (context.ndim() != 4 || context.dim(1) != cfg.context_channels ||
      context.dim(2) != cfg.context_height || context.dim(3) != cfg.context_width) {
    throw shape_error("context " + shape_str(context.shape()) + " does not match config [B," +
                      std::to_string(cfg.context_channels) + "," +
                      std::to_string(cfg.context_height) + "," +
                      std::to_string(cfg.context_width) + "]");
  }
}

// heads split: [B, N, D] -> [B*heads, N, head_dim]
Tensor split_heads(const Tensor& x, int heads, int head_dim) {
  const int B = x.dim(0), N = x.dim(1);
  Tensor r = reshape(x, {B, N, heads, head_dim});
  return reshape(permute(r, {0, 2, 1, 3}), {B * heads, N, head_dim});
}

// inverse of split_heads: [B*heads, N, head_dim] -> [B, N, D]
Tensor merge_heads(const Tensor& x, int B, int heads, int head_dim) {
  const int N = x.dim(1);
  Tensor r = reshape(x, {B, heads, N, head_dim});
  return reshape(permute(r, {0, 2, 1, 3}), {B, N, heads * head_dim});
}

Tensor mhsa_core(const Tensor& tokens, const DecoderLayerParams& p, const DecoderConfig& cfg) {
  const int B = tokens.dim(0);
  const int hd = cfg.head_dim();
  Tensor q = split_heads(linear(tokens, p.sa_wq, p.sa_bq), cfg.num_heads, hd);
  Tensor k = split_heads(linear(tokens, p.sa_wk, p.sa_bk), cfg.num_heads, hd);
  Tensor v = split_heads(linear(tokens, p.sa_wv, p.sa_bv), cfg.num_heads, hd);
  Tensor scores = mul_scalar(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor attn = softmax(scores, -1);
  Tensor mixed = merge_heads(bmm(attn, v), B, cfg.num_heads, hd);
  return linear(mixed, p.sa_wo, p.sa_bo);
}

Tensor ffn(const Tensor& tokens, const DecoderLayerParams& p) {
  return linear(gelu(linear(tokens, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
}

// Cross-attention without the residual. Keys/values come from the sampled
// context of each head's offset group.
Tensor deform_cross_core(const Tensor& tokens, const Tensor& context,
                         const DecoderLayerParams& p, const DecoderConfig& cfg,
                         SamplingField* field_out, Tensor* attn_out) {
  check_context(context, cfg);
  const int B = context.dim(0);
  const int G = cfg.num_groups;
  const int H = cfg.context_height, W = cfg.context_width;
  const int HW = H * W;
  const int heads = cfg.num_heads, hpg = cfg.heads_per_group(), hd = cfg.head_dim();
  const int cg = cfg.group_channels();
  const int Q = cfg.num_queries();
  if (tokens.ndim() != 3 || tokens.dim(0) != B || tokens.dim(1) != Q ||
      tokens.dim(2) != cfg.model_dim) {
    throw shape_error("tokens " + shape_str(tokens.shape()) + " do not match config [B=" +
                      std::to_string(B) + "," + std::to_string(Q) + "," +
                      std::to_string(cfg.model_dim) + "]");
  }

  SamplingField field = compute_sampling_field(context, p, cfg);

  Tensor ctx = context;
  if (cfg.pe_type == PeType::absolute) {
    // learned per-grid-cell embedding added to the context before the
    // key/value projections; it is sampled at P together with the context
    ctx = add(ctx, repeat_axis(reshape(p.abs_pe, {1, cfg.context_channels, H, W}), 0, B));
  }

  Tensor grouped = reshape(ctx, {B * G, cg, H, W});
  Tensor sampled = bilinear_sample(grouped, field.positions);             // [(BG),cg,H,W]
  Tensor flat = transpose_last2(reshape(sampled, {B * G, cg, HW}));       // [(BG),HW,cg]
  Tensor k = linear(flat, p.ca_wk, p.ca_bk);                              // [(BG),HW,dg]
  Tensor v = linear(flat, p.ca_wv, p.ca_bv);
  // [(BG),HW,hpg,hd] -> [(BG),hpg,HW,hd] -> [B*heads,HW,hd]; head index is
  // group-major, so head h attends to the positions of group h / hpg.
  Tensor kh = reshape(permute(reshape(k, {B * G, HW, hpg, hd}), {0, 2, 1, 3}),
                      {B * heads, HW, hd});
  Tensor vh = reshape(permute(reshape(v, {B * G, HW, hpg, hd}), {0, 2, 1, 3}),
                      {B * heads, HW, hd});
  Tensor qh = split_heads(linear(tokens, p.ca_wq, p.ca_bq), heads, hd);   // [B*heads,Q,hd]

  Tensor scores =
      mul_scalar(bmm(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (cfg.pe_type == PeType::relative) {
    // per-head per-query bias grids sampled at the head's group positions
    Tensor table = repeat_axis(
        reshape(p.rpe_table, {G, hpg * Q, cfg.rpe_height(), cfg.rpe_width()}), 0, B);
    Tensor bias = bilinear_sample(table, field.positions);  // [(BG), hpg*Q, H, W]
    scores = add(scores, reshape(bias, {B * heads, Q, HW}));
  }
  Tensor attn = softmax(scores, -1);
  Tensor mixed = merge_heads(bmm(attn, vh), B, heads, hd);
  Tensor out = linear(mixed, p.ca_wo, p.ca_bo);

  if (field_out) *field_out = field;
  if (attn_out) *attn_out = reshape(attn, {B, heads, Q, HW});
  return out;
}

}  // namespace

Tensor make_reference_grid(int height, int width, int batch_groups) {
  if (height < 1 || width < 1 || batch_groups < 1)
    throw shape_error("make_reference_grid: extents must be >= 1");
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<double> data(static_cast<std::size_t>(batch_groups) * 2 * plane);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const std::size_t s = static_cast<std::size_t>(i) * width + j;
      data[s] = static_cast<double>(i) / height * 2.0 - 1.0;
      data[plane + s] = static_cast<double>(j) / width * 2.0 - 1.0;
    }
  for (int b = 1; b < batch_groups; ++b)
    std::copy(data.begin(), data.begin() + 2 * plane,
              data.begin() + static_cast<std::size_t>(b) * 2 * plane);
  return Tensor::from_data({batch_groups, 2, height, width}, std::move(data));
}

Tensor offset_network(const Tensor& context, const DecoderLayerParams& p,
                      const DecoderConfig& cfg) {
  check_context(context, cfg);
  const int B = context.dim(0);
  Tensor h1 = grouped_conv2d(context, p.off_w1, p.off_b1, cfg.num_groups, /*stride=*/1,
                             /*padding=*/1);
  Tensor h2 = layer_norm(h1, p.off_ln_g, p.off_ln_b, kLayerNormEps, /*axis=*/1);
  Tensor h3 = gelu(h2);
  Tensor raw = grouped_conv2d(h3, p.off_w2, p.off_b2, cfg.num_groups, /*stride=*/1,
                              /*padding=*/0);  // [B, 2G, H, W]
  return reshape(raw, {B * cfg.num_groups, 2, cfg.context_height, cfg.context_width});
}

Tensor scale_offsets(const Tensor& raw, double offset_range, int height, int width) {
  Tensor t = tanh_t(raw);
  Tensor rows = mul_scalar(slice_axis(t, 1, 0, 1), offset_range * 2.0 / height);
  Tensor cols = mul_scalar(slice_axis(t, 1, 1, 1), offset_range * 2.0 / width);
  return concat_axis({rows, cols}, 1);
}

SamplingField compute_sampling_field(const Tensor& context, const DecoderLayerParams& p,
                                     const DecoderConfig& cfg) {
  check_context(context, cfg);
  const int B = context.dim(0);
  SamplingField field;
  field.reference =
      make_reference_grid(cfg.context_height, cfg.context_width, B * cfg.num_groups);
  if (cfg.deformable) {
    field.offsets = scale_offsets(offset_network(context, p, cfg), cfg.offset_range,
                                  cfg.context_height, cfg.context_width);
  } else {
    field.offsets = Tensor::zeros(field.reference.shape());
  }
  field.positions = add(field.reference, field.offsets);
  return field;
}

Tensor deformable_cross_attention(const Tensor& tokens, const Tensor& context,
                                  const DecoderLayerParams& p, const DecoderConfig& cfg,
                                  SamplingField* field_out, Tensor* attn_out) {
  return add(deform_cross_core(tokens, context, p, cfg, field_out, attn_out), tokens);
}

Tensor self_attention(const Tensor& tokens, const DecoderLayerParams& p,
                      const DecoderConfig& cfg) {
  if (tokens.dim(-1) != cfg.model_dim)
    throw shape_error("self_attention: token dim " + std::to_string(tokens.dim(-1)) +
                      " != model_dim " + std::to_string(cfg.model_dim));
  return add(mhsa_core(tokens, p, cfg), tokens);
}

Tensor decoder_forward(const Tensor& context, const DecoderParams& params,
                       const DecoderConfig& cfg, AttentionTrace* trace) {
  cfg.validate();
  check_context(context, cfg);
  if (static_cast<int>(params.layers.size()) != cfg.num_layers)
    throw config_error("decoder_forward: expected " + std::to_string(cfg.num_layers) +
                       " layers of parameters, got " + std::to_string(params.layers.size()));
  const int B = context.dim(0);
  const int Q = cfg.num_queries();
  const int H = cfg.context_height, W = cfg.context_width, HW = H * W;
  const int G = cfg.num_groups;

  if (trace) {
    *trace = AttentionTrace{};
    trace->num_groups = G;
    trace->num_heads = cfg.num_heads;
    trace->num_queries = Q;
    trace->height = H;
    trace->width = W;
  }

  Tensor y = repeat_axis(reshape(params.query_tokens, {1, Q, cfg.model_dim}), 0, B);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const DecoderLayerParams& p = params.layers[l];
    y = add(y, mhsa_core(layer_norm(y, p.ln_self_g, p.ln_self_b, kLayerNormEps), p, cfg));
    SamplingField field;
    Tensor attn;
    y = add(y, deform_cross_core(layer_norm(y, p.ln_cross_g, p.ln_cross_b, kLayerNormEps),
                                 context, p, cfg, &field, &attn));
    y = add(y, ffn(layer_norm(y, p.ln_ffn_g, p.ln_ffn_b, kLayerNormEps), p));
    if (!all_finite(y))
      throw numeric_error("decoder_forward: non-finite values in layer " + std::to_string(l));
    if (trace) {
      AttentionTraceLayer rec;
      const std::size_t pos_len = static_cast<std::size_t>(G) * 2 * HW;
      rec.positions.assign(field.positions.data().begin(),
                           field.positions.data().begin() + pos_len);  // sample 0
      const std::size_t w_len = static_cast<std::size_t>(cfg.num_heads) * Q * HW;
      rec.weights.assign(attn.data().begin(), attn.data().begin() + w_len);  // sample 0
      trace->layers.push_back(std::move(rec));
    }
  }
  return y;
}

std::vector<Hotspot> extract_attention_hotspots(const AttentionTrace& trace, double threshold) {
  if (trace.empty()) throw state_error("extract_attention_hotspots: empty trace");
  const int HW = trace.height * trace.width;
  const int hpg = trace.num_heads / trace.num_groups;
  std::vector<Hotspot> hotspots;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const AttentionTraceLayer& layer = trace.layers[l];
    for (int h = 0; h < trace.num_heads; ++h) {
      const int g = h / hpg;
      for (int s = 0; s < HW; ++s) {
        double mass = 0.0;
        for (int q = 0; q < trace.num_queries; ++q)
          mass += layer.weights[(static_cast<std::size_t>(h) * trace.num_queries + q) * HW + s];
        if (mass > threshold) {
          Hotspot spot;
          spot.layer = static_cast<int>(l);
          spot.head = h;
          spot.y = layer.positions[(static_cast<std::size_t>(g) * 2 + 0) * HW + s];
          spot.x = layer.positions[(static_cast<std::size_t>(g) * 2 + 1) * HW + s];
          spot.weight = mass;
          hotspots.push_back(spot);
        }
      }
    }
  }
  std::stable_sort(hotspots.begin(), hotspots.end(),
                   [](const Hotspot& a, const Hotspot& b) { return a.weight > b.weight; });
  return hotspots;
}

DecoderParams init_decoder_params(const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const int D = cfg.model_dim, C = cfg.context_channels;
  const int G = cfg.num_groups, cg = cfg.group_channels(), dg = cfg.group_dim();
  const int Q = cfg.num_queries();
  DecoderParams params;
  params.query_tokens = uniform_init({Q, D}, D, rng);
  params.layers.resize(cfg.num_layers);
  for (DecoderLayerParams& p : params.layers) {
    p.ln_self_g = Tensor::full({D}, 1.0, true);
    p.ln_self_b = zeros_param({D});
    p.ln_cross_g = Tensor::full({D}, 1.0, true);
    p.ln_cross_b = zeros_param({D});
    p.ln_ffn_g = Tensor::full({D}, 1.0, true);
    p.ln_ffn_b = zeros_param({D});
    p.sa_wq = uniform_init({D, D}, D, rng);
    p.sa_bq = zeros_param({D});
    p.sa_wk = uniform_init({D, D}, D, rng);
    p.sa_bk = zeros_param({D});
    p.sa_wv = uniform_init({D, D}, D, rng);
    p.sa_bv = zeros_param({D});
    p.sa_wo = uniform_init({D, D}, D, rng);
    p.sa_bo = zeros_param({D});
    p.ca_wq = uniform_init({D, D}, D, rng);
    p.ca_bq = zeros_param({D});
    p.ca_wk = uniform_init({cg, dg}, cg, rng);
    p.ca_bk = zeros_param({dg});
    p.ca_wv = uniform_init({cg, dg}, cg, rng);
    p.ca_bv = zeros_param({dg});
    p.ca_wo = uniform_init({D, D}, D, rng);
    p.ca_bo = zeros_param({D});
    if (cfg.deformable) {
      p.off_w1 = uniform_init({C, cg, 3, 3}, static_cast<std::size_t>(cg) * 9, rng);
      p.off_b1 = zeros_param({C});
      p.off_ln_g = Tensor::full({C}, 1.0, true);
      p.off_ln_b = zeros_param({C});
      p.off_w2 = uniform_init({2 * G, cg, 1, 1}, cg, rng);
      p.off_b2 = zeros_param({2 * G});
    }
    if (cfg.pe_type == PeType::relative) {
      p.rpe_table = uniform_init({cfg.num_heads, Q, cfg.rpe_height(), cfg.rpe_width()},
                                 static_cast<std::size_t>(cfg.rpe_height()) * cfg.rpe_width(),
                                 rng);
    }
    if (cfg.pe_type == PeType::absolute) {
      p.abs_pe = uniform_init({C, cfg.context_height, cfg.context_width}, C, rng);
    }
    const int hidden = cfg.ffn_mult * D;
    p.ffn_w1 = uniform_init({D, hidden}, D, rng);
    p.ffn_b1 = zeros_param({hidden});
    p.ffn_w2 = uniform_init({hidden, D}, hidden, rng);
    p.ffn_b2 = zeros_param({D});
  }
  return params;
}

}  // namespace dmr

#include "dmr/training.hpp"

#include <cmath>
#include <string>

namespace dmr {

namespace {

constexpr double kSoftplusZero = 0.69314718055994530941723212145818;  // softplus(0)

Tensor tile_over_batch(const Tensor& t, int batch) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return repeat_axis(reshape(t, s), 0, batch);
}

void check_term_shape(const Tensor& a, const Tensor& b, const char* term) {
  if (a.shape() != b.shape()) {
    throw shape_error("total_loss: " + std::string(term) + " shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// mean squared error over the pooled elements of two tensor pairs
Tensor pooled_mse(const Tensor& a1, const Tensor& b1, const Tensor& a2, const Tensor& b2) {
  Tensor d1 = sub(a1, b1);
  Tensor d2 = sub(a2, b2);
  Tensor ss = add(sum_all(mul(d1, d1)), sum_all(mul(d2, d2)));
  return mul_scalar(ss, 1.0 / static_cast<double>(a1.numel() + a2.numel()));
}

}  // namespace

MeanParams MeanParams::defaults() {
  MeanParams m;
  m.theta = identity_rot6d();
  m.beta = Tensor::zeros({kNumShapes});
  return m;
}

RegressionHeads init_regression_heads(const DecoderConfig& cfg, Rng&) {
  // Zero-initialized: with the residual (iterative-error-feedback) form the
  // model starts exactly at the mean estimate.
  const int D = cfg.model_dim;
  RegressionHeads h;
  if (cfg.single_query) {
    h.pose_w = Tensor::zeros({D + kNumJoints * 6, kNumJoints * 6}, true);
    h.pose_b = Tensor::zeros({kNumJoints * 6}, true);
  } else {
    h.pose_w = Tensor::zeros({D + 6, 6}, true);
    h.pose_b = Tensor::zeros({6}, true);
  }
  h.shape_w = Tensor::zeros({D + kNumShapes, kNumShapes}, true);
  h.shape_b = Tensor::zeros({kNumShapes}, true);
  h.cam_w = Tensor::zeros({D, 3}, true);
  h.cam_b = Tensor::zeros({3}, true);
  return h;
}

SmplBatch predict_params(const Tensor& decoder_out, const RegressionHeads& heads,
                         const MeanParams& means, const DecoderConfig& cfg) {
  const int B = decoder_out.dim(0);
  const int Q = cfg.num_queries();
  if (decoder_out.ndim() != 3 || decoder_out.dim(1) != Q || decoder_out.dim(2) != cfg.model_dim)
    throw shape_error("predict_params: decoder output " + shape_str(decoder_out.shape()) +
                      " does not match config");

  SmplBatch out;
  const int shape_token = Q - 1;  // row 24 in the multi-query layout, row 0 single-query
  Tensor token_s = reshape(slice_axis(decoder_out, 1, shape_token, 1), {B, cfg.model_dim});

  if (cfg.single_query) {
    Tensor mean_flat = tile_over_batch(reshape(means.theta, {kNumJoints * 6}), B);
    Tensor pose_in = concat_axis({token_s, mean_flat}, 1);
    Tensor delta = linear(pose_in, heads.pose_w, heads.pose_b);  // [B, 144]
    out.theta = add(reshape(delta, {B, kNumJoints, 6}), tile_over_batch(means.theta, B));
  } else {
    Tensor pose_tokens = slice_axis(decoder_out, 1, 0, kNumJoints);  // [B,24,D]
    Tensor mean_rows = tile_over_batch(means.theta, B);              // [B,24,6]
    Tensor pose_in = concat_axis({pose_tokens, mean_rows}, 2);       // [B,24,D+6]
    Tensor delta = linear(pose_in, heads.pose_w, heads.pose_b);      // [B,24,6]
    out.theta = add(delta, mean_rows);
  }

  Tensor mean_beta = tile_over_batch(means.beta, B);
  Tensor shape_in = concat_axis({token_s, mean_beta}, 1);
  out.beta = add(linear(shape_in, heads.shape_w, heads.shape_b), mean_beta);

  Tensor cam_raw = linear(token_s, heads.cam_w, heads.cam_b);  // [B,3]
  Tensor s = softplus_t(slice_axis(cam_raw, 1, 0, 1));
  Tensor t = slice_axis(cam_raw, 1, 1, 2);
  out.camera = concat_axis({s, t}, 1);
  return out;
}

Tensor total_loss(const PredBundle& pred, const TargetBundle& target, const LossWeights& weights,
                  LossTerms* terms) {
  check_term_shape(pred.params.theta, target.theta, "smpl theta");
  check_term_shape(pred.params.beta, target.beta, "smpl beta");
  check_term_shape(pred.joints3d, target.joints3d, "joints3d");
  check_term_shape(pred.joints2d, target.joints2d, "joints2d");
  check_term_shape(pred.vertices, target.vertices, "vertices");

  Tensor l_smpl = pooled_mse(pred.params.theta, target.theta, pred.params.beta, target.beta);
  Tensor l_j3d = mse(pred.joints3d, target.joints3d);
  Tensor l_j2d = mse(pred.joints2d, target.joints2d);
  Tensor l_mesh = mse(pred.vertices, target.vertices);
  Tensor total = add(add(mul_scalar(l_smpl, weights.smpl),
                         mul_scalar(add(l_j3d, l_j2d), weights.joint)),
                     mul_scalar(l_mesh, weights.mesh));
  if (terms) {
    terms->smpl = l_smpl.value();
    terms->joints3d = l_j3d.value();
    terms->joints2d = l_j2d.value();
    terms->mesh = l_mesh.value();
    terms->total = total.value();
  }
  return total;
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(const std::vector<Tensor>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0);
      v_[i].assign(params[i].numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw state_error("AdamW: parameter list changed size");
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    if (!p.has_grad() || p.grad().size() != p.numel())
      throw state_error("AdamW: parameter " + std::to_string(i) + " has no gradient");
    auto& data = p.data();
    const auto& g = p.grad();
    if (m_[i].size() != data.size()) throw state_error("AdamW: state shape mismatch");
    for (std::size_t k = 0; k < data.size(); ++k) {
      if (!std::isfinite(g[k])) throw numeric_error("AdamW: non-finite gradient");
      data[k] -= lr_ * wd_ * data[k];  // decoupled decay
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m_[i][k] / bc1;
      const double vhat = v_[i][k] / bc2;
      data[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

ContextGenerator make_context_generator(std::uint64_t seed, const DecoderConfig& cfg) {
  Rng rng(derive_seed(seed, "context-generator"));
  ContextGenerator gen;
  gen.channels = cfg.context_channels;
  gen.height = cfg.context_height;
  gen.width = cfg.context_width;
  const std::size_t rows =
      static_cast<std::size_t>(gen.channels) * gen.height * gen.width;
  gen.map.resize(rows * kParamDeviationDim);
  for (std::size_t r = 0; r < rows; ++r) {
    // unit-norm rows keep the feature response O(1) per unit deviation
    double norm_sq = 0.0;
    for (int c = 0; c < kParamDeviationDim; ++c) {
      const double v = rng.normal();
      gen.map[r * kParamDeviationDim + c] = v;
      norm_sq += v * v;
    }
    const double inv = 8.0 / std::sqrt(norm_sq + 1e-12);
    for (int c = 0; c < kParamDeviationDim; ++c) gen.map[r * kParamDeviationDim + c] *= inv;
  }
  gen.bias.resize(rows);
  for (double& v : gen.bias) v = 0.05 * rng.normal();
  return gen;
}

SyntheticSample make_synth_sample(const ContextGenerator& gen, const BodyTemplate& tmpl,
                                  const std::vector<double>& deviation, Rng& noise_rng,
                                  bool with_noise) {
  if (static_cast<int>(deviation.size()) != kParamDeviationDim)
    throw shape_error("make_synth_sample: deviation must have " +
                      std::to_string(kParamDeviationDim) + " entries");
  MeanParams means = MeanParams::defaults();

  SyntheticSample s;
  std::vector<double> theta = means.theta.data();
  for (int i = 0; i < kNumJoints * 6; ++i) theta[i] += deviation[i];
  std::vector<double> beta(kNumShapes);
  for (int i = 0; i < kNumShapes; ++i) beta[i] = deviation[kNumJoints * 6 + i];
  const double cam_s = kSoftplusZero + deviation[kNumJoints * 6 + kNumShapes + 0];
  const double cam_tx = deviation[kNumJoints * 6 + kNumShapes + 1];
  const double cam_ty = deviation[kNumJoints * 6 + kNumShapes + 2];
  if (cam_s <= 0.0) throw numeric_error("make_synth_sample: non-positive camera scale");

  s.params.theta = Tensor::from_data({kNumJoints, 6}, std::move(theta));
  s.params.beta = Tensor::from_data({kNumShapes}, std::move(beta));
  s.params.camera = Tensor::from_data({3}, {cam_s, cam_tx, cam_ty});

  MeshOutput mesh = lbs_forward(s.params, tmpl);
  s.joints3d = mesh.joints3d;
  s.joints2d = mesh.joints2d;
  s.vertices = mesh.vertices;

  const std::size_t rows =
      static_cast<std::size_t>(gen.channels) * gen.height * gen.width;
  std::vector<double> ctx(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = gen.bias[r];
    for (int c = 0; c < kParamDeviationDim; ++c)
      acc += gen.map[r * kParamDeviationDim + c] * deviation[c];
    if (with_noise) acc += gen.noise_std * noise_rng.normal();
    ctx[r] = acc;
  }
  s.context = Tensor::from_data({gen.channels, gen.height, gen.width}, std::move(ctx));
  return s;
}

std::vector<SyntheticSample> synth_dataset(std::uint64_t seed, int n, const DecoderConfig& cfg,
                                           const BodyTemplate& tmpl) {
  if (n < 1) throw config_error("synth_dataset: need at least one sample");
  ContextGenerator gen = make_context_generator(seed, cfg);
  Rng rng(derive_seed(seed, "dataset"));
  std::vector<SyntheticSample> data;
  data.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> dev(kParamDeviationDim);
    // ground-truth poses are small true rotations; their 6D rows are the
    // first two matrix columns, so the deviation is the canonical encoding
    for (int j = 0; j < kNumJoints; ++j) {
      double ux = rng.normal(), uy = rng.normal(), uz = rng.normal();
      const double un = std::sqrt(ux * ux + uy * uy + uz * uz) + 1e-12;
      ux /= un; uy /= un; uz /= un;
      const double phi = rng.uniform(-0.03, 0.03);
      const double c = std::cos(phi), s = std::sin(phi), omc = 1.0 - c;
      dev[j * 6 + 0] = (c + ux * ux * omc) - 1.0;
      dev[j * 6 + 1] = uy * ux * omc + uz * s;
      dev[j * 6 + 2] = uz * ux * omc - uy * s;
      dev[j * 6 + 3] = ux * uy * omc - uz * s;
      dev[j * 6 + 4] = (c + uy * uy * omc) - 1.0;
      dev[j * 6 + 5] = uz * uy * omc + ux * s;
    }
    for (int k = 0; k < kNumShapes; ++k) dev[kNumJoints * 6 + k] = rng.uniform(-0.1, 0.1);
    dev[kNumJoints * 6 + kNumShapes + 0] = rng.uniform(-0.05, 0.05);  // camera scale about softplus(0)
    dev[kNumJoints * 6 + kNumShapes + 1] = rng.uniform(-0.1, 0.1);
    dev[kNumJoints * 6 + kNumShapes + 2] = rng.uniform(-0.1, 0.1);
    data.push_back(make_synth_sample(gen, tmpl, dev, rng));
  }
  return data;
}

std::vector<Tensor> Model::trainable() const {
  std::vector<Tensor> out;
  auto push = [&out](const Tensor& t) {
    if (t.defined()) out.push_back(t);
  };
  push(decoder.query_tokens);
  for (const DecoderLayerParams& p : decoder.layers) {
    push(p.ln_self_g); push(p.ln_self_b);
    push(p.ln_cross_g); push(p.ln_cross_b);
    push(p.ln_ffn_g); push(p.ln_ffn_b);
    push(p.sa_wq); push(p.sa_bq); push(p.sa_wk); push(p.sa_bk);
    push(p.sa_wv); push(p.sa_bv); push(p.sa_wo); push(p.sa_bo);
    push(p.ca_wq); push(p.ca_bq); push(p.ca_wk); push(p.ca_bk);
    push(p.ca_wv); push(p.ca_bv); push(p.ca_wo); push(p.ca_bo);
    push(p.off_w1); push(p.off_b1); push(p.off_ln_g); push(p.off_ln_b);
    push(p.off_w2); push(p.off_b2);
    push(p.rpe_table); push(p.abs_pe);
    push(p.ffn_w1); push(p.ffn_b1); push(p.ffn_w2); push(p.ffn_b2);
  }
  push(heads.pose_w); push(heads.pose_b);
  push(heads.shape_w); push(heads.shape_b);
  push(heads.cam_w); push(heads.cam_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::named_arrays() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push = [&out](const std::string& name, const Tensor& t) {
    if (t.defined()) out.emplace_back(name, t);
  };
  push("query_tokens", decoder.query_tokens);
  for (std::size_t l = 0; l < decoder.layers.size(); ++l) {
    const DecoderLayerParams& p = decoder.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    push(pre + "ln_self.gamma", p.ln_self_g); push(pre + "ln_self.beta", p.ln_self_b);
    push(pre + "ln_cross.gamma", p.ln_cross_g); push(pre + "ln_cross.beta", p.ln_cross_b);
    push(pre + "ln_ffn.gamma", p.ln_ffn_g); push(pre + "ln_ffn.beta", p.ln_ffn_b);
    push(pre + "sa.wq", p.sa_wq); push(pre + "sa.bq", p.sa_bq);
    push(pre + "sa.wk", p.sa_wk); push(pre + "sa.bk", p.sa_bk);
    push(pre + "sa.wv", p.sa_wv); push(pre + "sa.bv", p.sa_bv);
    push(pre + "sa.wo", p.sa_wo); push(pre + "sa.bo", p.sa_bo);
    push(pre + "ca.wq", p.ca_wq); push(pre + "ca.bq", p.ca_bq);
    push(pre + "ca.wk", p.ca_wk); push(pre + "ca.bk", p.ca_bk);
    push(pre + "ca.wv", p.ca_wv); push(pre + "ca.bv", p.ca_bv);
    push(pre + "ca.wo", p.ca_wo); push(pre + "ca.bo", p.ca_bo);
    push(pre + "offset.conv1.w", p.off_w1); push(pre + "offset.conv1.b", p.off_b1);
    push(pre + "offset.ln.gamma", p.off_ln_g); push(pre + "offset.ln.beta", p.off_ln_b);
    push(pre + "offset.conv2.w", p.off_w2); push(pre + "offset.conv2.b", p.off_b2);
    push(pre + "rpe_table", p.rpe_table);
    push(pre + "abs_pe", p.abs_pe);
    push(pre + "ffn.w1", p.ffn_w1); push(pre + "ffn.b1", p.ffn_b1);
    push(pre + "ffn.w2", p.ffn_w2); push(pre + "ffn.b2", p.ffn_b2);
  }
  push("heads.pose.w", heads.pose_w); push("heads.pose.b", heads.pose_b);
  push("heads.shape.w", heads.shape_w); push("heads.shape.b", heads.shape_b);
  push("heads.camera.w", heads.cam_w); push("heads.camera.b", heads.cam_b);
  push("means.theta", means.theta); push("means.beta", means.beta);
  return out;
}

Model init_model(const RunConfig& cfg) {
  cfg.decoder.validate();
  Model model;
  model.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, "model-init"));
  model.decoder = init_decoder_params(cfg.decoder, rng);
  model.heads = init_regression_heads(cfg.decoder, rng);
  model.means = MeanParams::defaults();
  return model;
}

PredBundle forward_pipeline(const Model& model, const Tensor& context_batch,
                            const BodyTemplate& tmpl, AttentionTrace* trace) {
  const DecoderConfig& dc = model.cfg.decoder;
  Tensor decoded = decoder_forward(context_batch, model.decoder, dc, trace);
  PredBundle pred;
  pred.params = predict_params(decoded, model.heads, model.means, dc);

  const int B = context_batch.dim(0);
  std::vector<Tensor> j3d, j2d, verts;
  j3d.reserve(B); j2d.reserve(B); verts.reserve(B);
  for (int b = 0; b < B; ++b) {
    SmplParams sample;
    sample.theta = reshape(slice_axis(pred.params.theta, 0, b, 1), {kNumJoints, 6});
    sample.beta = reshape(slice_axis(pred.params.beta, 0, b, 1), {kNumShapes});
    sample.camera = reshape(slice_axis(pred.params.camera, 0, b, 1), {3});
    MeshOutput mesh = lbs_forward(sample, tmpl);
    j3d.push_back(reshape(mesh.joints3d, {1, kNumJoints, 3}));
    j2d.push_back(reshape(mesh.joints2d, {1, kNumJoints, 2}));
    verts.push_back(reshape(mesh.vertices, {1, tmpl.num_vertices, 3}));
  }
  pred.joints3d = concat_axis(j3d, 0);
  pred.joints2d = concat_axis(j2d, 0);
  pred.vertices = concat_axis(verts, 0);
  return pred;
}

TargetBundle stack_targets(const std::vector<SyntheticSample>& data) {
  if (data.empty()) throw config_error("stack_targets: empty dataset");
  const int B = static_cast<int>(data.size());
  const int nv = data[0].vertices.dim(0);
  std::vector<Tensor> th, be, j3, j2, ve;
  for (const SyntheticSample& s : data) {
    th.push_back(reshape(s.params.theta, {1, kNumJoints, 6}));
    be.push_back(reshape(s.params.beta, {1, kNumShapes}));
    j3.push_back(reshape(s.joints3d, {1, kNumJoints, 3}));
    j2.push_back(reshape(s.joints2d, {1, kNumJoints, 2}));
    ve.push_back(reshape(s.vertices, {1, nv, 3}));
  }
  TargetBundle t;
  t.theta = concat_axis(th, 0);
  t.beta = concat_axis(be, 0);
  t.joints3d = concat_axis(j3, 0);
  t.joints2d = concat_axis(j2, 0);
  t.vertices = concat_axis(ve, 0);
  (void)B;
  return t;
}

Tensor stack_contexts(const std::vector<SyntheticSample>& data) {
  if (data.empty()) throw config_error("stack_contexts: empty dataset");
  std::vector<Tensor> parts;
  parts.reserve(data.size());
  Shape s = data[0].context.shape();
  s.insert(s.begin(), 1);
  for (const SyntheticSample& sample : data) parts.push_back(reshape(sample.context, s));
  return concat_axis(parts, 0);
}

TrainResult train(Model& model, const std::vector<SyntheticSample>& data,
                  const BodyTemplate& tmpl, const TrainSettings& settings) {
  if (data.empty()) throw config_error("train: empty dataset");
  Tensor context = stack_contexts(data);
  TargetBundle targets = stack_targets(data);
  std::vector<Tensor> params = model.trainable();
  AdamW opt(settings.lr, settings.weight_decay);

  TrainResult result;
  result.curve.reserve(settings.steps);
  for (int step = 0; step < settings.steps; ++step) {
    for (Tensor& p : params) p.zero_grad();
    PredBundle pred = forward_pipeline(model, context, tmpl);
    LossTerms terms;
    Tensor loss = total_loss(pred, targets, settings.weights, &terms);
    if (!std::isfinite(terms.total))
      throw numeric_error("training diverged at step " + std::to_string(step));
    result.curve.push_back(terms);
    loss.backward();
    opt.step(params);
  }
  return result;
}

}  // namespace dmr

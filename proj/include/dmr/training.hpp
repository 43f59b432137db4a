#pragma once

// Loss assembly, the regression heads with one round of iterative error
// feedback, the AdamW optimizer, and the synthetic data generator that stands
// in for the frozen feature encoder.

#include <string>
#include <utility>
#include <vector>

#include "dmr/body_model.hpp"
#include "dmr/config.hpp"
#include "dmr/decoder.hpp"

namespace dmr {

struct LossWeights {
  double smpl = 1.0;
  double joint = 5.0;  // applies to both the 2D and the 3D joint terms
  double mesh = 60.0;
};

struct MeanParams {
  Tensor theta;  // [24, 6], default identity rotations
  Tensor beta;   // [10], default zeros
  static MeanParams defaults();
};

// Linear heads. Multi-query: one shared pose head applied per pose token with
// the matching mean-rotation row concatenated (iterative error feedback);
// single-query: one widened head emits all 24 rotations from the lone token.
struct RegressionHeads {
  Tensor pose_w, pose_b;
  Tensor shape_w, shape_b;
  Tensor cam_w, cam_b;
};

RegressionHeads init_regression_heads(const DecoderConfig& cfg, Rng& rng);

struct SmplBatch {
  Tensor theta;   // [B, 24, 6]
  Tensor beta;    // [B, 10]
  Tensor camera;  // [B, 3], scale already softplus-positive
};

// One round of iterative error feedback: heads see (token, mean estimate) and
// their output is added to the mean. Zeroed heads return the means exactly.
SmplBatch predict_params(const Tensor& decoder_out, const RegressionHeads& heads,
                         const MeanParams& means, const DecoderConfig& cfg);

struct PredBundle {
  SmplBatch params;
  Tensor joints3d;  // [B, 24, 3]
  Tensor joints2d;  // [B, 24, 2]
  Tensor vertices;  // [B, Nv, 3]
};

struct TargetBundle {
  Tensor theta, beta;        // [B,24,6], [B,10]
  Tensor joints3d, joints2d; // [B,24,3], [B,24,2]
  Tensor vertices;           // [B,Nv,3]
};

struct LossTerms {
  double smpl = 0.0, joints3d = 0.0, joints2d = 0.0, mesh = 0.0, total = 0.0;
};

// L = w.smpl * MSE(theta,beta pooled) + w.joint * (MSE(j3d) + MSE(j2d))
//   + w.mesh * MSE(vertices), every MSE averaged over elements and batch.
Tensor total_loss(const PredBundle& pred, const TargetBundle& target, const LossWeights& weights,
                  LossTerms* terms = nullptr);

// Decoupled-weight-decay Adam with bias correction.
class AdamW {
 public:
  AdamW(double lr = 1e-4, double weight_decay = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(const std::vector<Tensor>& params);  // reads grads, updates data

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct SyntheticSample {
  Tensor context;  // [C, H, W], frozen (never requires grad)
  SmplParams params;
  Tensor joints3d;  // [24, 3]
  Tensor joints2d;  // [24, 2]
  Tensor vertices;  // [Nv, 3]
};

// The fixed random linear map from parameter deviations to context features.
struct ContextGenerator {
  int channels = 0, height = 0, width = 0;
  std::vector<double> map;   // [C*H*W, 157]
  std::vector<double> bias;  // [C*H*W]
  double noise_std = 0.001;
};

inline constexpr int kParamDeviationDim = kNumJoints * 6 + kNumShapes + 3;  // 157

ContextGenerator make_context_generator(std::uint64_t seed, const DecoderConfig& cfg);

// deviation layout: vec(theta - theta_mean), beta, (s - softplus(0), tx, ty)
SyntheticSample make_synth_sample(const ContextGenerator& gen, const BodyTemplate& tmpl,
                                  const std::vector<double>& deviation, Rng& noise_rng,
                                  bool with_noise = true);

std::vector<SyntheticSample> synth_dataset(std::uint64_t seed, int n, const DecoderConfig& cfg,
                                           const BodyTemplate& tmpl);

struct Model {
  RunConfig cfg;
  DecoderParams decoder;
  RegressionHeads heads;
  MeanParams means;

  std::vector<Tensor> trainable() const;
  // Deterministic (name, tensor) enumeration; includes the (frozen) means.
  std::vector<std::pair<std::string, Tensor>> named_arrays() const;
};

Model init_model(const RunConfig& cfg);

// Forward pass through decoder, heads, body model, and projection.
PredBundle forward_pipeline(const Model& model, const Tensor& context_batch,
                            const BodyTemplate& tmpl, AttentionTrace* trace = nullptr);

TargetBundle stack_targets(const std::vector<SyntheticSample>& data);
Tensor stack_contexts(const std::vector<SyntheticSample>& data);

struct TrainSettings {
  int steps = 500;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  LossWeights weights;
};

struct TrainResult {
  std::vector<LossTerms> curve;  // one row per optimizer step
};

// Full-batch loop: decoder -> heads -> body model -> projection -> loss ->
// AdamW. The context generator is frozen: context tensors never get grads.
// Throws numeric_error with the step index if the loss goes non-finite.
TrainResult train(Model& model, const std::vector<SyntheticSample>& data,
                  const BodyTemplate& tmpl, const TrainSettings& settings);

}  // namespace dmr

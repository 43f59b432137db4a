#pragma once

// MPJPE / PA-MPJPE / PVE in millimeters, with a closed-form similarity
// Procrustes aligner (scale, proper rotation, translation).

#include <vector>

#include "dmr/body_model.hpp"
#include "dmr/training.hpp"

namespace dmr {

struct SampleMetrics {
  double mpjpe_mm = 0.0;
  double pa_mpjpe_mm = 0.0;
  double pve_mm = 0.0;
};

struct EvalReport {
  double mpjpe_mm = 0.0;
  double pa_mpjpe_mm = 0.0;
  double pve_mm = 0.0;
  std::vector<SampleMetrics> per_sample;
};

// Mean Euclidean joint distance in millimeters; inputs are meters and are
// expected to be root-aligned already.
double mpjpe(const Tensor& pred, const Tensor& gt);

// Returns s*R*pred + t minimizing the summed squared distance to gt over
// scale s > 0, proper rotation R, translation t. Throws numeric_error on
// degenerate (coincident) point sets; requires at least 3 points.
Tensor procrustes_align(const Tensor& pred, const Tensor& gt);

// Mean Euclidean vertex distance in millimeters; root translation only.
double pve(const Tensor& pred_vertices, const Tensor& gt_vertices);

// Runs inference over the dataset and computes all three metrics per sample
// and in aggregate. Joints (and vertices) are root-aligned by subtracting the
// root joint; joint_mask selects the evaluated subset (empty = all 24).
EvalReport evaluate(const Model& model, const std::vector<SyntheticSample>& data,
                    const BodyTemplate& tmpl, const std::vector<int>& joint_mask = {});

}  // namespace dmr

#pragma once

// Synthetic parametric body of SMPL form: linear blend skinning over 24
// joints with 10 shape blendshapes and a sparse joint regressor. The template
// is generated deterministically, but real assets with the same structure can
// be loaded through the JSON interface.

#include <array>
#include <string>
#include <vector>

#include "dmr/ops.hpp"
#include "dmr/rng.hpp"

namespace dmr {

inline constexpr int kNumJoints = 24;
inline constexpr int kNumShapes = 10;

struct SmplParams {
  Tensor theta;   // [24, 6] rotation per joint in the two-column 6D form
  Tensor beta;    // [10]
  Tensor camera;  // [3] weak-perspective (s, tx, ty), s > 0
};

struct BodyTemplate {
  int num_vertices = 0;
  std::array<int, kNumJoints> parents{};  // parents[0] == -1 (root); parents[j] < j
  Tensor vertices;                        // [Nv, 3], meters
  Tensor shape_dirs;                      // [Nv, 3, 10]
  Tensor shape_dirs_mat;                  // [10, Nv*3], derived view for the blend
  Tensor joint_regressor;                 // [24, Nv], rows nonnegative, sum 1
  Tensor skin_weights;                    // [Nv, 24], rows nonnegative, sum 1

  void validate() const;  // throws shape_error / config_error on bad structure
};

struct MeshOutput {
  Tensor vertices;  // [Nv, 3], meters
  Tensor joints3d;  // [24, 3], meters
  Tensor joints2d;  // [24, 2], normalized image units
};

// Gram-Schmidt map from the 6D representation to proper rotation matrices,
// batched over leading axes: input [..., 6] -> [..., 3, 3] with the two
// orthonormalized vectors and their cross product as columns. Throws
// numeric_error naming the degenerate row.
Tensor rot6d_to_matrix(const Tensor& r);

// Identity-rotation rows (1,0,0,0,1,0).
Tensor identity_rot6d(int joints = kNumJoints);

MeshOutput lbs_forward(const SmplParams& params, const BodyTemplate& tmpl);

// (x, y) = s * (X, Y) + (tx, ty); caller guarantees s > 0.
Tensor project_weak_perspective(const Tensor& points3d, const Tensor& camera);

BodyTemplate make_synthetic_template(std::uint64_t seed, int num_vertices);

// JSON (de)serialization, shape-checked on load.
void save_body_template(const std::string& path, const BodyTemplate& tmpl);
BodyTemplate load_body_template(const std::string& path);

// Wavefront-style text export; faces are optional 0-based triples.
void write_obj(const std::string& path, const Tensor& vertices,
               const std::vector<std::array<int, 3>>& faces = {});

}  // namespace dmr

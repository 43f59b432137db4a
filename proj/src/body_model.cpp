#include "dmr/body_model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace dmr {

namespace {

constexpr double kDegenerateEps = 1e-12;

Tensor make_shape_dirs_mat(const Tensor& shape_dirs) {
  // [Nv,3,10] -> [10, Nv*3] so the shape blend is a single linear map
  const int nv = shape_dirs.dim(0);
  Tensor perm = permute(shape_dirs, {2, 0, 1});
  return Tensor::from_data({kNumShapes, nv * 3}, perm.data());
}

}  // namespace

void BodyTemplate::validate() const {
  if (num_vertices < kNumJoints)
    throw config_error("body template needs at least 24 vertices, got " +
                       std::to_string(num_vertices));
  if (parents[0] != -1) throw config_error("body template: parents[0] must be the root (-1)");
  for (int j = 1; j < kNumJoints; ++j) {
    if (parents[j] < 0 || parents[j] >= j)
      throw config_error("body template: parents[" + std::to_string(j) + "] must be < " +
                         std::to_string(j));
  }
  const Shape vs = {num_vertices, 3};
  if (vertices.shape() != vs)
    throw shape_error("body template vertices must be " + shape_str(vs));
  if (shape_dirs.shape() != Shape{num_vertices, 3, kNumShapes})
    throw shape_error("body template shape_dirs must be [Nv,3,10]");
  if (joint_regressor.shape() != Shape{kNumJoints, num_vertices})
    throw shape_error("body template joint_regressor must be [24,Nv]");
  if (skin_weights.shape() != Shape{num_vertices, kNumJoints})
    throw shape_error("body template skin_weights must be [Nv,24]");
  auto check_rows = [](const Tensor& t, int rows, int cols, const char* what) {
    for (int r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (int c = 0; c < cols; ++c) {
        const double v = t.data()[static_cast<std::size_t>(r) * cols + c];
        if (v < 0.0) throw config_error(std::string(what) + ": negative weight");
        sum += v;
      }
      if (std::fabs(sum - 1.0) > 1e-9)
        throw config_error(std::string(what) + ": row " + std::to_string(r) +
                           " sums to " + std::to_string(sum));
    }
  };
  check_rows(joint_regressor, kNumJoints, num_vertices, "joint_regressor");
  check_rows(skin_weights, num_vertices, kNumJoints, "skin_weights");
}

Tensor identity_rot6d(int joints) {
  std::vector<double> data(static_cast<std::size_t>(joints) * 6, 0.0);
  for (int j = 0; j < joints; ++j) {
    data[static_cast<std::size_t>(j) * 6 + 0] = 1.0;
    data[static_cast<std::size_t>(j) * 6 + 4] = 1.0;
  }
  return Tensor::from_data({joints, 6}, std::move(data));
}

Tensor rot6d_to_matrix(const Tensor& r) {
  if (r.dim(-1) != 6) throw shape_error("rot6d_to_matrix: last axis must be 6");
  const int last = r.ndim() - 1;
  Tensor a1 = slice_axis(r, last, 0, 3);
  Tensor a2 = slice_axis(r, last, 3, 3);

  Tensor n1 = sqrt_t(sum_axis(mul(a1, a1), last, /*keepdim=*/true));
  const std::size_t rows = n1.numel();
  for (std::size_t i = 0; i < rows; ++i) {
    if (n1.data()[i] < kDegenerateEps)
      throw numeric_error("rot6d_to_matrix: degenerate first vector at joint index " +
                          std::to_string(i));
  }
  Tensor b1 = div(a1, repeat_axis(n1, last, 3));

  Tensor dot = sum_axis(mul(b1, a2), last, /*keepdim=*/true);
  Tensor u = sub(a2, mul(b1, repeat_axis(dot, last, 3)));
  Tensor n2 = sqrt_t(sum_axis(mul(u, u), last, /*keepdim=*/true));
  for (std::size_t i = 0; i < rows; ++i) {
    if (n2.data()[i] < kDegenerateEps)
      throw numeric_error("rot6d_to_matrix: degenerate second vector at joint index " +
                          std::to_string(i));
  }
  Tensor b2 = div(u, repeat_axis(n2, last, 3));
  Tensor b3 = cross3(b1, b2);

  // columns [b1 b2 b3]: stack as [..., 3, 1] slabs along the new last axis
  Shape col_shape = r.shape();
  col_shape.back() = 3;
  col_shape.push_back(1);
  Tensor c1 = reshape(b1, col_shape);
  Tensor c2 = reshape(b2, col_shape);
  Tensor c3 = reshape(b3, col_shape);
  return concat_axis({c1, c2, c3}, static_cast<int>(col_shape.size()) - 1);
}

MeshOutput lbs_forward(const SmplParams& params, const BodyTemplate& tmpl) {
  if (params.theta.shape() != Shape{kNumJoints, 6})
    throw shape_error("lbs_forward: theta must be [24,6], got " + shape_str(params.theta.shape()));
  if (params.beta.shape() != Shape{kNumShapes})
    throw shape_error("lbs_forward: beta must be [10]");
  const int nv = tmpl.num_vertices;

  // shaped rest vertices and rest joints
  Tensor blend = reshape(linear(reshape(params.beta, {1, kNumShapes}), tmpl.shape_dirs_mat),
                         {nv, 3});
  Tensor shaped = add(tmpl.vertices, blend);
  Tensor rest_joints = matmul2d(tmpl.joint_regressor, shaped);  // [24,3]

  Tensor rots = rot6d_to_matrix(params.theta);  // [24,3,3]

  // world transforms along the kinematic tree; tw is kept as a [3,1] column
  std::vector<Tensor> rot_world(kNumJoints), t_world(kNumJoints), joint_cols(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j)
    joint_cols[j] = reshape(slice_axis(rest_joints, 0, j, 1), {3, 1});
  for (int j = 0; j < kNumJoints; ++j) {
    Tensor rot_local = reshape(slice_axis(rots, 0, j, 1), {3, 3});
    if (tmpl.parents[j] < 0) {
      rot_world[j] = rot_local;
      t_world[j] = joint_cols[j];
    } else {
      const int p = tmpl.parents[j];
      rot_world[j] = matmul2d(rot_world[p], rot_local);
      t_world[j] = add(t_world[p], matmul2d(rot_world[p], sub(joint_cols[j], joint_cols[p])));
    }
  }

  // skinning with transforms relative to the rest pose:
  // x_v = (sum_j w_vj Rw_j) v + sum_j w_vj (tw_j - Rw_j J_j)
  std::vector<Tensor> rot_rows(kNumJoints), off_rows(kNumJoints), joint_rows(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j) {
    rot_rows[j] = reshape(rot_world[j], {1, 9});
    off_rows[j] = transpose_last2(sub(t_world[j], matmul2d(rot_world[j], joint_cols[j])));
    joint_rows[j] = transpose_last2(t_world[j]);
  }
  Tensor rot_stack = concat_axis(rot_rows, 0);     // [24,9]
  Tensor off_stack = concat_axis(off_rows, 0);     // [24,3]
  Tensor blended_rot = reshape(matmul2d(tmpl.skin_weights, rot_stack), {nv, 3, 3});
  Tensor blended_off = matmul2d(tmpl.skin_weights, off_stack);  // [nv,3]
  Tensor posed = add(reshape(bmm(blended_rot, reshape(shaped, {nv, 3, 1})), {nv, 3}),
                     blended_off);

  MeshOutput out;
  out.vertices = posed;
  out.joints3d = concat_axis(joint_rows, 0);  // [24,3]
  out.joints2d = project_weak_perspective(out.joints3d, params.camera);
  return out;
}

Tensor project_weak_perspective(const Tensor& points3d, const Tensor& camera) {
  if (points3d.dim(-1) != 3)
    throw shape_error("project_weak_perspective: points must end in axis 3");
  if (camera.shape() != Shape{3})
    throw shape_error("project_weak_perspective: camera must be [3]");
  Tensor xy = slice_axis(points3d, points3d.ndim() - 1, 0, 2);
  Tensor scale = slice_axis(camera, 0, 0, 1);
  Tensor trans = slice_axis(camera, 0, 1, 2);
  return add_rowvec(mul_scalar_t(xy, scale), trans);
}

BodyTemplate make_synthetic_template(std::uint64_t seed, int num_vertices) {
  if (num_vertices < kNumJoints)
    throw config_error("make_synthetic_template: need at least 24 vertices, got " +
                       std::to_string(num_vertices));
  Rng rng(derive_seed(seed, "body-template"));

  BodyTemplate tmpl;
  tmpl.num_vertices = num_vertices;
  tmpl.parents[0] = -1;
  for (int j = 1; j < kNumJoints; ++j) tmpl.parents[j] = (j - 1) / 2;  // balanced tree

  // joint centers along the tree, then vertices scattered around home joints
  std::vector<std::array<double, 3>> centers(kNumJoints);
  centers[0] = {0.0, 0.0, 0.0};
  for (int j = 1; j < kNumJoints; ++j) {
    double d[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-9;
    const auto& par = centers[tmpl.parents[j]];
    for (int k = 0; k < 3; ++k) centers[j][k] = par[k] + 0.15 * d[k] / n;
  }

  std::vector<double> verts(static_cast<std::size_t>(num_vertices) * 3);
  std::vector<int> home(num_vertices);
  for (int v = 0; v < num_vertices; ++v) {
    home[v] = v % kNumJoints;
    for (int k = 0; k < 3; ++k)
      verts[static_cast<std::size_t>(v) * 3 + k] = centers[home[v]][k] + 0.06 * rng.normal();
  }
  tmpl.vertices = Tensor::from_data({num_vertices, 3}, std::move(verts));

  auto sq_dist = [&](int v, int j) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double d = tmpl.vertices.data()[static_cast<std::size_t>(v) * 3 + k] - centers[j][k];
      s += d * d;
    }
    return s;
  };

  // soft assignments by distance; rows renormalized so they sum to 1 exactly
  auto soft_rows = [](std::vector<double>& logits, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
      double mx = -1e300;
      for (int c = 0; c < cols; ++c) mx = std::max(mx, logits[static_cast<std::size_t>(r) * cols + c]);
      double sum = 0.0;
      for (int c = 0; c < cols; ++c) {
        double& v = logits[static_cast<std::size_t>(r) * cols + c];
        v = std::exp(v - mx);
        sum += v;
      }
      for (int c = 0; c < cols; ++c) logits[static_cast<std::size_t>(r) * cols + c] /= sum;
    }
  };

  std::vector<double> reg(static_cast<std::size_t>(kNumJoints) * num_vertices);
  for (int j = 0; j < kNumJoints; ++j)
    for (int v = 0; v < num_vertices; ++v)
      reg[static_cast<std::size_t>(j) * num_vertices + v] = -sq_dist(v, j) / 0.005;
  soft_rows(reg, kNumJoints, num_vertices);
  tmpl.joint_regressor = Tensor::from_data({kNumJoints, num_vertices}, std::move(reg));

  std::vector<double> skin(static_cast<std::size_t>(num_vertices) * kNumJoints);
  for (int v = 0; v < num_vertices; ++v)
    for (int j = 0; j < kNumJoints; ++j)
      skin[static_cast<std::size_t>(v) * kNumJoints + j] = -sq_dist(v, j) / 0.02;
  soft_rows(skin, num_vertices, kNumJoints);
  tmpl.skin_weights = Tensor::from_data({num_vertices, kNumJoints}, std::move(skin));

  std::vector<double> dirs(static_cast<std::size_t>(num_vertices) * 3 * kNumShapes);
  for (double& v : dirs) v = 0.15 * rng.uniform(-1.0, 1.0);
  tmpl.shape_dirs = Tensor::from_data({num_vertices, 3, kNumShapes}, std::move(dirs));
  tmpl.shape_dirs_mat = make_shape_dirs_mat(tmpl.shape_dirs);

  tmpl.validate();
  return tmpl;
}

void save_body_template(const std::string& path, const BodyTemplate& tmpl) {
  nlohmann::json j;
  j["num_vertices"] = tmpl.num_vertices;
  j["parents"] = std::vector<int>(tmpl.parents.begin(), tmpl.parents.end());
  j["template_vertices"] = tmpl.vertices.data();
  j["shape_dirs"] = tmpl.shape_dirs.data();
  j["joint_regressor"] = tmpl.joint_regressor.data();
  j["skin_weights"] = tmpl.skin_weights.data();
  std::ofstream out(path);
  if (!out) throw config_error("cannot write body template to '" + path + "'");
  out << j.dump();
}

BodyTemplate load_body_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read body template from '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("body template '" + path + "' is not valid JSON: " + e.what());
  }
  BodyTemplate tmpl;
  try {
    tmpl.num_vertices = j.at("num_vertices").get<int>();
    const auto parents = j.at("parents").get<std::vector<int>>();
    if (parents.size() != kNumJoints)
      throw config_error("body template: parents must have 24 entries");
    std::copy(parents.begin(), parents.end(), tmpl.parents.begin());
    const int nv = tmpl.num_vertices;
    tmpl.vertices =
        Tensor::from_data({nv, 3}, j.at("template_vertices").get<std::vector<double>>());
    tmpl.shape_dirs =
        Tensor::from_data({nv, 3, kNumShapes}, j.at("shape_dirs").get<std::vector<double>>());
    tmpl.joint_regressor = Tensor::from_data(
        {kNumJoints, nv}, j.at("joint_regressor").get<std::vector<double>>());
    tmpl.skin_weights =
        Tensor::from_data({nv, kNumJoints}, j.at("skin_weights").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw config_error("body template '" + path + "' has missing or malformed fields: " +
                       e.what());
  }
  tmpl.shape_dirs_mat = make_shape_dirs_mat(tmpl.shape_dirs);
  tmpl.validate();
  return tmpl;
}

void write_obj(const std::string& path, const Tensor& vertices,
               const std::vector<std::array<int, 3>>& faces) {
  if (vertices.ndim() != 2 || vertices.dim(1) != 3)
    throw shape_error("write_obj: vertices must be [N,3]");
  std::ofstream out(path);
  if (!out) throw config_error("cannot write mesh to '" + path + "'");
  out.precision(17);
  const int n = vertices.dim(0);
  for (int v = 0; v < n; ++v) {
    out << "v " << vertices.at({v, 0}) << " " << vertices.at({v, 1}) << " "
        << vertices.at({v, 2}) << "\n";
  }
  for (const auto& f : faces)
    out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
}

}  // namespace dmr

#include "dmr/evaluation.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace dmr {

namespace {

void check_points(const Tensor& pred, const Tensor& gt, const char* op) {
  if (pred.ndim() != 2 || pred.dim(1) != 3 || pred.shape() != gt.shape()) {
    throw shape_error(std::string(op) + ": expected matching [J,3] inputs, got " +
                      shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
}

double mean_point_distance_mm(const Tensor& a, const Tensor& b) {
  const int n = a.dim(0);
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    double sq = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double d = a.data()[static_cast<std::size_t>(j) * 3 + k] -
                       b.data()[static_cast<std::size_t>(j) * 3 + k];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total / n * 1000.0;
}

// subtract the root row from every row
Tensor root_align(const Tensor& points, const Tensor& root_source, int root_index = 0) {
  const int n = points.dim(0);
  std::vector<double> out(points.data());
  const double rx = root_source.data()[static_cast<std::size_t>(root_index) * 3 + 0];
  const double ry = root_source.data()[static_cast<std::size_t>(root_index) * 3 + 1];
  const double rz = root_source.data()[static_cast<std::size_t>(root_index) * 3 + 2];
  for (int j = 0; j < n; ++j) {
    out[static_cast<std::size_t>(j) * 3 + 0] -= rx;
    out[static_cast<std::size_t>(j) * 3 + 1] -= ry;
    out[static_cast<std::size_t>(j) * 3 + 2] -= rz;
  }
  return Tensor::from_data(points.shape(), std::move(out));
}

Tensor select_rows(const Tensor& points, const std::vector<int>& rows) {
  if (rows.empty()) return points;
  std::vector<double> out;
  out.reserve(rows.size() * 3);
  for (int r : rows) {
    if (r < 0 || r >= points.dim(0)) throw config_error("evaluate: joint mask index out of range");
    for (int k = 0; k < 3; ++k)
      out.push_back(points.data()[static_cast<std::size_t>(r) * 3 + k]);
  }
  return Tensor::from_data({static_cast<int>(rows.size()), 3}, std::move(out));
}

}  // namespace

double mpjpe(const Tensor& pred, const Tensor& gt) {
  check_points(pred, gt, "mpjpe");
  if (pred.dim(0) < 1) throw shape_error("mpjpe: need at least one joint");
  return mean_point_distance_mm(pred, gt);
}

Tensor procrustes_align(const Tensor& pred, const Tensor& gt) {
  check_points(pred, gt, "procrustes_align");
  const int n = pred.dim(0);
  if (n < 3) throw shape_error("procrustes_align: need at least 3 points");

  Eigen::MatrixXd P(n, 3), Gm(n, 3);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < 3; ++k) {
      P(j, k) = pred.data()[static_cast<std::size_t>(j) * 3 + k];
      Gm(j, k) = gt.data()[static_cast<std::size_t>(j) * 3 + k];
    }
  const Eigen::RowVector3d mu_p = P.colwise().mean();
  const Eigen::RowVector3d mu_g = Gm.colwise().mean();
  const Eigen::MatrixXd Pc = P.rowwise() - mu_p;
  const Eigen::MatrixXd Gc = Gm.rowwise() - mu_g;

  const double var_p = Pc.squaredNorm() / n;
  if (var_p < 1e-18) throw numeric_error("procrustes_align: degenerate (coincident) point set");

  // cross-covariance factorization with reflection correction
  const Eigen::Matrix3d cov = Gc.transpose() * Pc / n;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2) = -1.0;
  const Eigen::Matrix3d rot = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double scale = svd.singularValues().dot(d) / var_p;
  const Eigen::RowVector3d trans = mu_g - scale * (rot * mu_p.transpose()).transpose();

  const Eigen::MatrixXd aligned = (scale * (rot * P.transpose())).transpose().rowwise() + trans;
  std::vector<double> out(static_cast<std::size_t>(n) * 3);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>(j) * 3 + k] = aligned(j, k);
  return Tensor::from_data(pred.shape(), std::move(out));
}

double pve(const Tensor& pred_vertices, const Tensor& gt_vertices) {
  check_points(pred_vertices, gt_vertices, "pve");
  return mean_point_distance_mm(pred_vertices, gt_vertices);
}

EvalReport evaluate(const Model& model, const std::vector<SyntheticSample>& data,
                    const BodyTemplate& tmpl, const std::vector<int>& joint_mask) {
  if (data.empty()) throw config_error("evaluate: empty dataset");
  const DecoderConfig& dc = model.cfg.decoder;
  if (data[0].context.shape() != Shape{dc.context_channels, dc.context_height, dc.context_width})
    throw config_error("evaluate: dataset feature shape " + shape_str(data[0].context.shape()) +
                       " does not match checkpoint config");

  Tensor context = stack_contexts(data);
  PredBundle pred = forward_pipeline(model, context, tmpl);

  EvalReport report;
  const int B = static_cast<int>(data.size());
  for (int b = 0; b < B; ++b) {
    Tensor pj = reshape(slice_axis(pred.joints3d, 0, b, 1), {kNumJoints, 3});
    Tensor pv = reshape(slice_axis(pred.vertices, 0, b, 1), {tmpl.num_vertices, 3});
    const Tensor& gj = data[b].joints3d;
    const Tensor& gv = data[b].vertices;

    Tensor pj_a = select_rows(root_align(pj, pj), joint_mask);
    Tensor gj_a = select_rows(root_align(gj, gj), joint_mask);
    Tensor pv_a = root_align(pv, pj);  // vertices translated by their own root joint
    Tensor gv_a = root_align(gv, gj);

    SampleMetrics m;
    m.mpjpe_mm = mpjpe(pj_a, gj_a);
    m.pa_mpjpe_mm = mpjpe(procrustes_align(pj_a, gj_a), gj_a);
    m.pve_mm = pve(pv_a, gv_a);
    report.per_sample.push_back(m);
    report.mpjpe_mm += m.mpjpe_mm;
    report.pa_mpjpe_mm += m.pa_mpjpe_mm;
    report.pve_mm += m.pve_mm;
  }
  report.mpjpe_mm /= B;
  report.pa_mpjpe_mm /= B;
  report.pve_mm /= B;
  return report;
}

}  // namespace dmr

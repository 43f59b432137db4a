#include "dmr/gradcheck_suite.hpp"

#include <cmath>

#include "dmr/body_model.hpp"
#include "dmr/decoder.hpp"
#include "dmr/gradcheck.hpp"
#include "dmr/training.hpp"

namespace dmr {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> data(numel_of(shape));
  for (double& v : data) v = scale * rng.uniform(-1.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// positions with fractional index in [0.2, 0.8] and away from the clamp
// boundary, where the bilinear derivative is only piecewise defined
Tensor interior_positions(int batch, int hs, int ws, int H, int W, Rng& rng,
                          bool requires_grad) {
  std::vector<double> data(static_cast<std::size_t>(batch) * 2 * hs * ws);
  const std::size_t plane = static_cast<std::size_t>(hs) * ws;
  for (int b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < plane; ++s) {
      const double ty =
          H >= 2 ? std::floor(rng.uniform(0.0, H - 1.0)) + rng.uniform(0.2, 0.8) : 0.0;
      const double tx =
          W >= 2 ? std::floor(rng.uniform(0.0, W - 1.0)) + rng.uniform(0.2, 0.8) : 0.0;
      data[(static_cast<std::size_t>(b) * 2 + 0) * plane + s] = 2.0 * ty / H - 1.0;
      data[(static_cast<std::size_t>(b) * 2 + 1) * plane + s] = 2.0 * tx / W - 1.0;
    }
  return Tensor::from_data({batch, 2, hs, ws}, std::move(data), requires_grad);
}

// control op with a deliberately wrong backward (claims d/dx 2x = 2.02)
Tensor broken_scale(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = 2.0 * a.data()[i];
  auto backward = [](detail::TensorImpl& self) {
    if (!self.parents[0].requires_grad()) return;
    auto& dx = self.parents[0].impl()->grad;
    for (std::size_t i = 0; i < self.numel(); ++i) dx[i] += 2.02 * self.grad[i];
  };
  return make_op_node(a.shape(), std::move(out), {a}, backward);
}

double check_op(const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
  return grad_check(f, params);
}

}  // namespace

DecoderConfig gradcheck_default_config() {
  DecoderConfig cfg;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.num_groups = 1;
  cfg.offset_range = 1.0;
  cfg.num_layers = 1;
  cfg.context_channels = 8;
  cfg.context_height = 2;
  cfg.context_width = 2;
  cfg.pe_type = PeType::relative;
  cfg.deformable = true;
  return cfg;
}

std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed,
                                              const DecoderConfig& decoder_cfg,
                                              double tolerance, bool include_broken_row) {
  std::vector<GradCheckRow> rows;
  auto run = [&](const std::string& name, const std::function<Tensor()>& f,
                 const std::vector<Tensor>& params) {
    GradCheckRow row;
    row.name = name;
    row.max_rel_err = check_op(f, params);
    row.pass = row.max_rel_err < tolerance;
    rows.push_back(row);
  };

  Rng rng(derive_seed(seed, "gradcheck"));

  {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5}, rng);
    run("linear", [&] { return sum_all(mul(linear(x, w, b), linear(x, w, b))); }, {x, w, b});
  }
  {
    Tensor x = random_tensor({2, 6}, rng);
    Tensor g = random_tensor({6}, rng);
    Tensor b = random_tensor({6}, rng);
    run("layer_norm",
        [&] { return mean_all(mul(layer_norm(x, g, b, 1e-5), layer_norm(x, g, b, 1e-5))); },
        {x, g, b});
  }
  {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor g = random_tensor({3}, rng);
    Tensor b = random_tensor({3}, rng);
    run("layer_norm.channels",
        [&] { return mean_all(mul(layer_norm(x, g, b, 1e-5, 1), layer_norm(x, g, b, 1e-5, 1))); },
        {x, g, b});
  }
  {
    Tensor x = random_tensor({17}, rng, 2.0);
    run("gelu", [&] { return sum_all(mul(gelu(x), gelu(x))); }, {x});
  }
  {
    Tensor x = random_tensor({13}, rng, 2.0);
    run("tanh", [&] { return sum_all(mul(tanh_t(x), tanh_t(x))); }, {x});
  }
  {
    Tensor x = random_tensor({11}, rng, 3.0);
    run("softplus", [&] { return sum_all(mul(softplus_t(x), softplus_t(x))); }, {x});
  }
  {
    Tensor x = random_tensor({2, 7}, rng, 2.0);
    Tensor probe = random_tensor({2, 7}, rng, 1.0, false);
    run("softmax", [&] { return sum_all(mul(softmax(x, -1), probe)); }, {x});
  }
  {
    Tensor a = random_tensor({9}, rng);
    Tensor b = random_tensor({9}, rng, 1.0);
    for (double& v : b.data()) v += (v >= 0 ? 1.5 : -1.5);  // keep divisor away from zero
    run("elementwise",
        [&] { return sum_all(add(mul(a, b), div(mul(a, a), b))); }, {a, b});
  }
  {
    Tensor a = random_tensor({3, 4}, rng);
    run("reductions",
        [&] { return add(mean_all(a), sum_all(sum_axis(mul(a, a), 0, false))); }, {a});
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng);
    run("shape_ops",
        [&] {
          Tensor p = permute(a, {2, 0, 1});
          Tensor r = reshape(p, {4, 6});
          Tensor s = slice_axis(r, 1, 1, 3);
          Tensor c = concat_axis({s, s}, 0);
          return mean_all(mul(repeat_axis(c, 1, 2), repeat_axis(c, 1, 2)));
        },
        {a});
  }
  {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor c = random_tensor({2, 3, 3}, rng);
    run("matmul",
        [&] {
          Tensor m = matmul2d(a, b);
          Tensor bm = bmm(c, c);
          return add(sum_all(mul(m, m)), sum_all(mul(bm, bm)));
        },
        {a, b, c});
  }
  {
    Tensor x = random_tensor({1, 4, 5, 5}, rng);
    Tensor w = random_tensor({6, 2, 3, 3}, rng);
    Tensor b = random_tensor({6}, rng);
    run("grouped_conv2d",
        [&] {
          Tensor y = grouped_conv2d(x, w, b, /*groups=*/2, /*stride=*/1, /*padding=*/1);
          return mean_all(mul(y, y));
        },
        {x, w, b});
  }
  {
    Tensor img = random_tensor({2, 3, 4, 5}, rng);
    Tensor pos = interior_positions(2, 3, 3, 4, 5, rng, false);
    run("bilinear_sample.x",
        [&] {
          Tensor y = bilinear_sample(img, pos);
          return mean_all(mul(y, y));
        },
        {img});
  }
  {
    Tensor img = random_tensor({2, 3, 4, 5}, rng, 1.0, false);
    Tensor pos = interior_positions(2, 3, 3, 4, 5, rng, true);
    run("bilinear_sample.pos",
        [&] {
          Tensor y = bilinear_sample(img, pos);
          return mean_all(mul(y, y));
        },
        {pos});
  }
  {
    Tensor r = random_tensor({4, 6}, rng, 0.3);
    for (int j = 0; j < 4; ++j) {
      r.data()[j * 6 + 0] += 1.0;  // keep rows clear of the degenerate set
      r.data()[j * 6 + 4] += 1.0;
    }
    run("rot6d_to_matrix",
        [&] {
          Tensor m = rot6d_to_matrix(r);
          return sum_all(mul(m, m));
        },
        {r});
  }
  {
    Tensor pts = random_tensor({5, 3}, rng);
    Tensor cam = Tensor::from_data({3}, {1.2, 0.1, -0.2}, true);
    run("project_weak_perspective",
        [&] {
          Tensor y = project_weak_perspective(pts, cam);
          return mean_all(mul(y, y));
        },
        {pts, cam});
  }
  {
    BodyTemplate tmpl = make_synthetic_template(seed, 32);
    SmplParams params;
    std::vector<double> theta_data = identity_rot6d().data();
    for (double& v : theta_data) v += 0.1 * rng.uniform(-1.0, 1.0);
    Tensor theta = Tensor::from_data({kNumJoints, 6}, std::move(theta_data), true);
    Tensor beta = random_tensor({kNumShapes}, rng, 0.3);
    Tensor cam = Tensor::from_data({3}, {0.9, 0.05, -0.03}, true);
    params.theta = theta;
    params.beta = beta;
    params.camera = cam;
    run("lbs_forward",
        [&] {
          MeshOutput mesh = lbs_forward(params, tmpl);
          return add(add(mean_all(mul(mesh.vertices, mesh.vertices)),
                         mean_all(mul(mesh.joints3d, mesh.joints3d))),
                     mean_all(mul(mesh.joints2d, mesh.joints2d)));
        },
        {theta, beta, cam});
  }
  {
    DecoderConfig cfg = decoder_cfg;
    cfg.num_layers = 1;
    cfg.validate();
    Rng init_rng(derive_seed(seed, "gradcheck-decoder"));
    DecoderParams params = init_decoder_params(cfg, init_rng);
    Tensor context = random_tensor(
        {1, cfg.context_channels, cfg.context_height, cfg.context_width}, rng, 1.0, true);
    std::vector<Tensor> all;
    all.push_back(context);
    all.push_back(params.query_tokens);
    const DecoderLayerParams& p = params.layers[0];
    for (const Tensor* t :
         {&p.ln_self_g, &p.ln_self_b, &p.ln_cross_g, &p.ln_cross_b, &p.ln_ffn_g, &p.ln_ffn_b,
          &p.sa_wq, &p.sa_bq, &p.sa_wk, &p.sa_bk, &p.sa_wv, &p.sa_bv, &p.sa_wo, &p.sa_bo,
          &p.ca_wq, &p.ca_bq, &p.ca_wk, &p.ca_bk, &p.ca_wv, &p.ca_bv, &p.ca_wo, &p.ca_bo,
          &p.off_w1, &p.off_b1, &p.off_ln_g, &p.off_ln_b, &p.off_w2, &p.off_b2, &p.rpe_table,
          &p.abs_pe, &p.ffn_w1, &p.ffn_b1, &p.ffn_w2, &p.ffn_b2}) {
      if (t->defined()) all.push_back(*t);
    }
    run("decoder_layer",
        [&] {
          Tensor y = decoder_forward(context, params, cfg);
          return mean_all(mul(y, y));
        },
        all);
  }
  if (include_broken_row) {
    Tensor x = random_tensor({5}, rng);
    run("corrupted_gradient", [&] { return sum_all(mul(broken_scale(x), broken_scale(x))); },
        {x});
  }
  return rows;
}

}  // namespace dmr

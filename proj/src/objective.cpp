#include "iiae/objective.hpp"

#include <cmath>

namespace iiae {

using nlohmann::json;

std::string to_string(ObjectiveVariant v) {
  switch (v) {
    case ObjectiveVariant::elbo: return "elbo";
    case ObjectiveVariant::iiae: return "iiae";
    case ObjectiveVariant::ii: return "ii";
    case ObjectiveVariant::ii_mi: return "ii_mi";
    case ObjectiveVariant::elbo_plus_ii: return "elbo_plus_ii";
    case ObjectiveVariant::elbo_plus_ii_mi: return "elbo_plus_ii_mi";
  }
  return "iiae";
}

ObjectiveVariant variant_from_string(const std::string& s) {
  for (auto v : {ObjectiveVariant::elbo, ObjectiveVariant::iiae, ObjectiveVariant::ii, ObjectiveVariant::ii_mi,
                 ObjectiveVariant::elbo_plus_ii, ObjectiveVariant::elbo_plus_ii_mi}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown objective variant '" + s + "'");
}

void ObjectiveParams::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be a finite value >= 0");
  if (!(recon_weight > 0.0) || !std::isfinite(recon_weight)) throw std::invalid_argument("recon_weight must be > 0");
  if (!(fixed_var > 0.0) || !std::isfinite(fixed_var)) throw std::invalid_argument("fixed_var must be > 0");
}

std::optional<std::string> LossBreakdown::first_non_finite() const {
  const std::pair<const char*, double> fields[] = {
      {"rec_x", rec_x},       {"rec_y", rec_y},       {"rec_x_shared", rec_x_shared}, {"rec_y_shared", rec_y_shared},
      {"kl_zx", kl_zx},       {"kl_zy", kl_zy},       {"kl_zs_prior", kl_zs_prior},   {"kl_zs_rx", kl_zs_rx},
      {"kl_zs_ry", kl_zs_ry}, {"total", total}};
  for (const auto& [name, v] : fields) {
    if (!std::isfinite(v)) return std::string(name);
  }
  return std::nullopt;
}

json to_json(const LossBreakdown& b) {
  return json{{"variant", to_string(b.variant)},
              {"rec_x", b.rec_x},
              {"rec_y", b.rec_y},
              {"rec_x_shared", b.rec_x_shared},
              {"rec_y_shared", b.rec_y_shared},
              {"kl_zx", b.kl_zx},
              {"kl_zy", b.kl_zy},
              {"kl_zs_prior", b.kl_zs_prior},
              {"kl_zs_rx", b.kl_zs_rx},
              {"kl_zs_ry", b.kl_zs_ry},
              {"total", b.total},
              {"lambda", b.lambda},
              {"recon_weight", b.recon_weight}};
}

BatchNoise BatchNoise::zeros(const ModelConfig& c, Eigen::Index rows) {
  return {Mat::Zero(rows, c.zx_dim), Mat::Zero(rows, c.zs_dim), Mat::Zero(rows, c.zy_dim)};
}

namespace {

// Coefficients of the maximized bound:
//   w_rec (rec_x + rec_y) + w_shared (rec_x_shared + rec_y_shared)
//   - w_excl (kl_zx + kl_zy) - w_prior kl_zs_prior - w_r (kl_zs_rx + kl_zs_ry)
struct TermWeights {
  double rec = 0, shared = 0, excl = 0, prior = 0, r = 0;
  bool uses_exclusive = true;
  bool uses_shared_only = false;
};

TermWeights weights_for(const ObjectiveParams& p) {
  const double l = p.lambda;
  const double rw = p.recon_weight;
  TermWeights w;
  switch (p.variant) {
    case ObjectiveVariant::elbo:
      w.rec = rw, w.excl = 1, w.prior = 1;
      break;
    case ObjectiveVariant::iiae:
      // (1+l) ELBO + l KL(q_s||p) - l (KL_rx + KL_ry)
      w.rec = (1 + l) * rw, w.excl = 1 + l, w.prior = 1, w.r = l;
      break;
    case ObjectiveVariant::ii:
      w.shared = rw, w.r = 1;
      w.uses_exclusive = false, w.uses_shared_only = true;
      break;
    case ObjectiveVariant::ii_mi:
      w.rec = rw, w.excl = 1, w.r = 1;
      break;
    case ObjectiveVariant::elbo_plus_ii:
      w.rec = rw, w.excl = 1, w.prior = 1, w.shared = l * rw, w.r = l;
      w.uses_shared_only = true;
      break;
    case ObjectiveVariant::elbo_plus_ii_mi:
      w.rec = (1 + l) * rw, w.excl = 1 + l, w.prior = 1, w.r = l;
      break;
  }
  return w;
}

Mat hcat(const Mat& a, const Mat& b) {
  Mat out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

// Gradient accumulators for one Gaussian head.
struct HeadGrad {
  Mat d_mean, d_log_var;
  HeadGrad(Eigen::Index rows, Eigen::Index dim) : d_mean(Mat::Zero(rows, dim)), d_log_var(Mat::Zero(rows, dim)) {}
};

// z = mean + exp(log_var / 2) * eps
void reparam_backward(const GaussianBatch& g, const Mat& eps, const Mat& d_z, HeadGrad& hg) {
  hg.d_mean += d_z;
  hg.d_log_var += (d_z.array() * 0.5 * (0.5 * g.log_var.array()).exp() * eps.array()).matrix();
}

}  // namespace

LossBreakdown evaluate_objective(const IIAEModel& model, const Batch& batch, const BatchNoise& noise,
                                 const ObjectiveParams& params, IIAEModel* grad) {
  params.validate();
  const auto& c = model.config;
  const Eigen::Index n = batch.x.rows();
  if (n == 0) throw std::invalid_argument("objective: empty batch");
  if (batch.y.rows() != n) throw StructuralError("objective: x and y batches have different row counts");
  if (batch.x.cols() != c.x_dim || batch.y.cols() != c.y_dim) {
    throw StructuralError("objective: batch widths do not match the model");
  }
  if (noise.zs.rows() != n || noise.zs.cols() != c.zs_dim) throw StructuralError("objective: shared noise shape");

  const TermWeights w = weights_for(params);
  if (w.uses_exclusive && (noise.zx.rows() != n || noise.zx.cols() != c.zx_dim || noise.zy.rows() != n ||
                           noise.zy.cols() != c.zy_dim)) {
    throw StructuralError("objective: exclusive noise shape");
  }
  const bool want_grad = grad != nullptr;

  LossBreakdown out;
  out.variant = params.variant;
  out.lambda = params.lambda;
  out.recon_weight = params.recon_weight;

  // Shared path: features are computed once and feed q_s, r_x and r_y.
  DenseTape t_fe_x, t_fe_y, t_rx, t_ry, t_qs;
  const Mat hx = model.fe_x.forward(batch.x, t_fe_x);
  const Mat hy = model.fe_y.forward(batch.y, t_fe_y);
  const Mat rx_out = model.head_rx.forward(hx, t_rx);
  const Mat ry_out = model.head_ry.forward(hy, t_ry);
  const Mat qs_out = model.head_qs.forward(hcat(hx, hy), t_qs);
  const GaussianBatch rx = split_gaussian_head(rx_out);
  const GaussianBatch ry = split_gaussian_head(ry_out);
  const GaussianBatch qs = split_gaussian_head(qs_out);
  const Mat z_s = reparameterize(qs, noise.zs);

  HeadGrad g_qs(n, c.zs_dim), g_rx(n, c.zs_dim), g_ry(n, c.zs_dim);
  Mat d_zs = Mat::Zero(n, c.zs_dim);

  out.kl_zs_prior = kl_to_standard_normal(qs, w.prior, want_grad ? &g_qs.d_mean : nullptr,
                                          want_grad ? &g_qs.d_log_var : nullptr);
  KlGrads kx, ky;
  if (want_grad) {
    kx = {&g_qs.d_mean, &g_qs.d_log_var, &g_rx.d_mean, &g_rx.d_log_var};
    ky = {&g_qs.d_mean, &g_qs.d_log_var, &g_ry.d_mean, &g_ry.d_log_var};
  }
  out.kl_zs_rx = kl_diag_gaussian(qs, rx, w.r, kx);
  out.kl_zs_ry = kl_diag_gaussian(qs, ry, w.r, ky);

  // Exclusive path.
  DenseTape t_qx, t_qy, t_dx, t_dy;
  Mat qx_out, qy_out;
  GaussianBatch qx, qy;
  if (w.uses_exclusive) {
    qx_out = model.head_qx.forward(batch.x, t_qx);
    qy_out = model.head_qy.forward(batch.y, t_qy);
    qx = split_gaussian_head(qx_out);
    qy = split_gaussian_head(qy_out);
    const Mat z_x = reparameterize(qx, noise.zx);
    const Mat z_y = reparameterize(qy, noise.zy);

    HeadGrad g_qx(n, c.zx_dim), g_qy(n, c.zy_dim);
    out.kl_zx = kl_to_standard_normal(qx, w.excl, want_grad ? &g_qx.d_mean : nullptr,
                                      want_grad ? &g_qx.d_log_var : nullptr);
    out.kl_zy = kl_to_standard_normal(qy, w.excl, want_grad ? &g_qy.d_mean : nullptr,
                                      want_grad ? &g_qy.d_log_var : nullptr);

    const Mat pred_x = model.dec_x.forward(hcat(z_x, z_s), t_dx);
    const Mat pred_y = model.dec_y.forward(hcat(z_y, z_s), t_dy);
    Mat d_px = Mat::Zero(n, c.x_dim), d_py = Mat::Zero(n, c.y_dim);
    out.rec_x = gaussian_log_likelihood(batch.x, pred_x, params.fixed_var, -w.rec, want_grad ? &d_px : nullptr);
    out.rec_y = gaussian_log_likelihood(batch.y, pred_y, params.fixed_var, -w.rec, want_grad ? &d_py : nullptr);

    if (want_grad) {
      const Mat d_in_x = model.dec_x.backward(t_dx, d_px, grad->dec_x);
      const Mat d_in_y = model.dec_y.backward(t_dy, d_py, grad->dec_y);
      reparam_backward(qx, noise.zx, d_in_x.leftCols(c.zx_dim), g_qx);
      reparam_backward(qy, noise.zy, d_in_y.leftCols(c.zy_dim), g_qy);
      d_zs += d_in_x.rightCols(c.zs_dim) + d_in_y.rightCols(c.zs_dim);
      model.head_qx.backward(t_qx, join_gaussian_head_grad(qx_out, g_qx.d_mean, g_qx.d_log_var), grad->head_qx);
      model.head_qy.backward(t_qy, join_gaussian_head_grad(qy_out, g_qy.d_mean, g_qy.d_log_var), grad->head_qy);
    }
  }

  // Reconstructions from the shared code alone; the exclusive decoder input
  // is held at zero.
  if (w.uses_shared_only) {
    DenseTape t_sx, t_sy;
    const Mat pred_x = model.dec_x.forward(hcat(Mat::Zero(n, c.zx_dim), z_s), t_sx);
    const Mat pred_y = model.dec_y.forward(hcat(Mat::Zero(n, c.zy_dim), z_s), t_sy);
    Mat d_px = Mat::Zero(n, c.x_dim), d_py = Mat::Zero(n, c.y_dim);
    out.rec_x_shared =
        gaussian_log_likelihood(batch.x, pred_x, params.fixed_var, -w.shared, want_grad ? &d_px : nullptr);
    out.rec_y_shared =
        gaussian_log_likelihood(batch.y, pred_y, params.fixed_var, -w.shared, want_grad ? &d_py : nullptr);
    if (want_grad) {
      d_zs += model.dec_x.backward(t_sx, d_px, grad->dec_x).rightCols(c.zs_dim);
      d_zs += model.dec_y.backward(t_sy, d_py, grad->dec_y).rightCols(c.zs_dim);
    }
  }

  out.total = -(w.rec * (out.rec_x + out.rec_y) + w.shared * (out.rec_x_shared + out.rec_y_shared) -
                w.excl * (out.kl_zx + out.kl_zy) - w.prior * out.kl_zs_prior - w.r * (out.kl_zs_rx + out.kl_zs_ry));

  if (want_grad) {
    reparam_backward(qs, noise.zs, d_zs, g_qs);
    const Mat d_h_joint =
        model.head_qs.backward(t_qs, join_gaussian_head_grad(qs_out, g_qs.d_mean, g_qs.d_log_var), grad->head_qs);
    Mat d_hx = d_h_joint.leftCols(c.fe_width);
    Mat d_hy = d_h_joint.rightCols(c.fe_width);
    d_hx += model.head_rx.backward(t_rx, join_gaussian_head_grad(rx_out, g_rx.d_mean, g_rx.d_log_var), grad->head_rx);
    d_hy += model.head_ry.backward(t_ry, join_gaussian_head_grad(ry_out, g_ry.d_mean, g_ry.d_log_var), grad->head_ry);
    model.fe_x.backward(t_fe_x, d_hx, grad->fe_x);
    model.fe_y.backward(t_fe_y, d_hy, grad->fe_y);
  }
  return out;
}

LossBreakdown elbo_terms(const IIAEModel& model, const Batch& batch, const BatchNoise& noise, double recon_weight,
                         double fixed_var, IIAEModel* grad) {
  return evaluate_objective(model, batch, noise, {ObjectiveVariant::elbo, 0.0, recon_weight, fixed_var}, grad);
}

LossBreakdown iiae_loss(const IIAEModel& model, const Batch& batch, const BatchNoise& noise, double lambda,
                        double recon_weight, double fixed_var, IIAEModel* grad) {
  if (lambda < 0.0) throw std::invalid_argument("iiae_loss: lambda must be >= 0");
  return evaluate_objective(model, batch, noise, {ObjectiveVariant::iiae, lambda, recon_weight, fixed_var}, grad);
}

LossBreakdown ablation_loss(const IIAEModel& model, const Batch& batch, const BatchNoise& noise,
                            ObjectiveVariant variant, double lambda, double recon_weight, double fixed_var,
                            IIAEModel* grad) {
  switch (variant) {
    case ObjectiveVariant::ii:
    case ObjectiveVariant::ii_mi:
    case ObjectiveVariant::elbo_plus_ii:
    case ObjectiveVariant::elbo_plus_ii_mi:
      return evaluate_objective(model, batch, noise, {variant, lambda, recon_weight, fixed_var}, grad);
    default:
      throw std::invalid_argument("ablation_loss: '" + to_string(variant) + "' is not an ablation variant");
  }
}

}  // namespace iiae

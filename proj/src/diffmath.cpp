#include "iiae/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace iiae {

GaussianParams::GaussianParams(Vec m, Vec lv) : mean(std::move(m)), log_var(std::move(lv)) {}

GaussianParams GaussianParams::standard(Eigen::Index dim) {
  return {Vec::Zero(dim), Vec::Zero(dim)};
}

void GaussianParams::validate() const {
  if (mean.size() != log_var.size()) {
    throw StructuralError("GaussianParams: mean has " + std::to_string(mean.size()) +
                          " components, log_var has " + std::to_string(log_var.size()));
  }
  if (!mean.allFinite() || !log_var.allFinite()) {
    throw NumericalError("GaussianParams: non-finite component");
  }
}

GaussianParams GaussianBatch::row(Eigen::Index i) const {
  return {mean.row(i).transpose(), log_var.row(i).transpose()};
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw StructuralError("unknown activation '" + s + "'");
}

namespace {

void apply_activation(Activation a, const Mat& pre, Mat& out) {
  switch (a) {
    case Activation::leaky_relu:
      out = pre.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
      break;
    case Activation::tanh:
      out = pre.array().tanh().matrix();
      break;
    case Activation::identity:
      out = pre;
      break;
  }
}

// d out / d pre, applied elementwise to the incoming gradient.
Mat activation_backward(Activation a, const Mat& pre, const Mat& out, const Mat& d_out) {
  switch (a) {
    case Activation::leaky_relu:
      return d_out.cwiseProduct(pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakySlope; }));
    case Activation::tanh:
      return d_out.cwiseProduct((1.0 - out.array().square()).matrix());
    case Activation::identity:
      return d_out;
  }
  return d_out;
}

}  // namespace

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { check_chain(); }

DenseNet DenseNet::zeros(std::span<const int> dims, Activation hidden, Activation head) {
  if (dims.size() < 2) throw StructuralError("DenseNet needs at least an input and output width");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] < 1 || dims[i + 1] < 1) throw StructuralError("DenseNet widths must be >= 1");
    DenseLayer l;
    l.weight = Mat::Zero(dims[i], dims[i + 1]);
    l.bias = Vec::Zero(dims[i + 1]);
    l.activation = (i + 2 == dims.size()) ? head : hidden;
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers));
}

void DenseNet::check_chain() const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.bias.size() != l.out_dim()) {
      throw StructuralError("layer " + std::to_string(i) + ": bias length does not match output width");
    }
    if (i > 0 && layers_[i - 1].out_dim() != l.in_dim()) {
      throw StructuralError("layer " + std::to_string(i) + ": input width " +
                            std::to_string(l.in_dim()) + " does not chain with previous output " +
                            std::to_string(layers_[i - 1].out_dim()));
    }
  }
}

Eigen::Index DenseNet::input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
Eigen::Index DenseNet::output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Mat DenseNet::forward(const Mat& input) const {
  DenseTape tape;
  return forward(input, tape);
}

Mat DenseNet::forward(const Mat& input, DenseTape& tape) const {
  if (input.cols() != input_dim()) {
    throw StructuralError("DenseNet: input width " + std::to_string(input.cols()) + ", expected " +
                          std::to_string(input_dim()));
  }
  tape.inputs.resize(layers_.size());
  tape.pre_activations.resize(layers_.size());
  Mat current = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    tape.inputs[i] = std::move(current);
    tape.pre_activations[i] = tape.inputs[i] * l.weight;
    tape.pre_activations[i].rowwise() += l.bias.transpose();
    apply_activation(l.activation, tape.pre_activations[i], current);
    if (!current.allFinite()) {
      throw NumericalError("DenseNet: non-finite activation at layer " + std::to_string(i));
    }
  }
  tape.output = current;
  return current;
}

Mat DenseNet::backward(const DenseTape& tape, const Mat& d_output, DenseNet& grad) const {
  Mat d = d_output;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& l = layers_[k];
    const Mat& out = (k + 1 == layers_.size()) ? tape.output : tape.inputs[k + 1];
    Mat d_pre = activation_backward(l.activation, tape.pre_activations[k], out, d);
    auto& g = grad.layers_[k];
    g.weight.noalias() += tape.inputs[k].transpose() * d_pre;
    g.bias.noalias() += d_pre.colwise().sum().transpose();
    d = d_pre * l.weight.transpose();
  }
  return d;
}

void DenseNet::set_zero() {
  for (auto& l : layers_) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

bool DenseNet::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(),
                     [](const DenseLayer& l) { return l.weight.allFinite() && l.bias.allFinite(); });
}

Vec dense_apply(const DenseNet& net, const Vec& input) {
  if (input.size() != net.input_dim()) {
    throw StructuralError("dense_apply: input length " + std::to_string(input.size()) +
                          ", expected " + std::to_string(net.input_dim()));
  }
  return net.forward(input.transpose()).row(0).transpose();
}

GaussianBatch split_gaussian_head(const Mat& head_output) {
  if (head_output.cols() % 2 != 0) {
    throw StructuralError("distribution head output width must be even");
  }
  const Eigen::Index d = head_output.cols() / 2;
  GaussianBatch g;
  g.mean = head_output.leftCols(d);
  g.log_var = head_output.rightCols(d).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);
  return g;
}

Mat join_gaussian_head_grad(const Mat& head_output, const Mat& d_mean, const Mat& d_log_var) {
  const Eigen::Index d = head_output.cols() / 2;
  Mat out(head_output.rows(), head_output.cols());
  out.leftCols(d) = d_mean;
  const auto raw = head_output.rightCols(d).array();
  out.rightCols(d) = ((raw >= kLogVarMin) && (raw <= kLogVarMax)).select(d_log_var.array(), 0.0).matrix();
  return out;
}

Vec reparameterize(const GaussianParams& params, const Vec& noise) {
  if (noise.size() != params.mean.size() || params.log_var.size() != params.mean.size()) {
    throw StructuralError("reparameterize: noise length " + std::to_string(noise.size()) +
                          " does not match dimension " + std::to_string(params.mean.size()));
  }
  return params.mean + ((0.5 * params.log_var.array()).exp() * noise.array()).matrix();
}

Mat reparameterize(const GaussianBatch& params, const Mat& noise) {
  if (noise.rows() != params.mean.rows() || noise.cols() != params.mean.cols()) {
    throw StructuralError("reparameterize: noise shape does not match parameters");
  }
  return params.mean + ((0.5 * params.log_var.array()).exp() * noise.array()).matrix();
}

double kl_to_standard_normal(const GaussianParams& p) {
  p.validate();
  const auto m = p.mean.array();
  const auto lv = p.log_var.array();
  return 0.5 * (m.square() + lv.exp() - 1.0 - lv).sum();
}

double kl_diag_gaussian(const GaussianParams& p, const GaussianParams& q) {
  p.validate();
  q.validate();
  if (p.dim() != q.dim()) {
    throw StructuralError("kl_diag_gaussian: dimensions " + std::to_string(p.dim()) + " and " +
                          std::to_string(q.dim()));
  }
  const auto lp = p.log_var.array();
  const auto lq = q.log_var.array();
  const auto diff = p.mean.array() - q.mean.array();
  return 0.5 * ((lq - lp) + (lp.exp() + diff.square()) / lq.exp() - 1.0).sum();
}

double gaussian_log_likelihood(const Vec& target, const Vec& predicted_mean, double fixed_var) {
  if (!(fixed_var > 0.0)) throw StructuralError("gaussian_log_likelihood: fixed_var must be > 0");
  if (target.size() != predicted_mean.size()) {
    throw StructuralError("gaussian_log_likelihood: length mismatch");
  }
  const double n = static_cast<double>(target.size());
  return -0.5 * std::log(2.0 * std::numbers::pi * fixed_var) * n -
         (target - predicted_mean).squaredNorm() / (2.0 * fixed_var);
}

double kl_to_standard_normal(const GaussianBatch& p, double scale, Mat* d_mean, Mat* d_log_var) {
  const double b = static_cast<double>(p.rows());
  const auto m = p.mean.array();
  const auto lv = p.log_var.array();
  const double value = 0.5 * (m.square() + lv.exp() - 1.0 - lv).sum() / b;
  if (d_mean) *d_mean += (scale / b) * p.mean;
  if (d_log_var) *d_log_var += ((scale / b) * 0.5 * (lv.exp() - 1.0)).matrix();
  return value;
}

double kl_diag_gaussian(const GaussianBatch& p, const GaussianBatch& q, double scale,
                        const KlGrads& grads) {
  if (p.rows() != q.rows() || p.dim() != q.dim()) {
    throw StructuralError("kl_diag_gaussian: batch shapes differ");
  }
  const double b = static_cast<double>(p.rows());
  const auto lp = p.log_var.array();
  const auto lq = q.log_var.array();
  const Eigen::ArrayXXd diff = p.mean.array() - q.mean.array();
  const Eigen::ArrayXXd inv_vq = (-lq).exp();
  const Eigen::ArrayXXd vp = lp.exp();
  const double value = 0.5 * ((lq - lp) + (vp + diff.square()) * inv_vq - 1.0).sum() / b;
  const double s = scale / b;
  if (grads.d_mean_p) *grads.d_mean_p += (s * diff * inv_vq).matrix();
  if (grads.d_mean_q) *grads.d_mean_q -= (s * diff * inv_vq).matrix();
  if (grads.d_log_var_p) *grads.d_log_var_p += (s * 0.5 * (vp * inv_vq - 1.0)).matrix();
  if (grads.d_log_var_q) {
    *grads.d_log_var_q += (s * 0.5 * (1.0 - (vp + diff.square()) * inv_vq)).matrix();
  }
  return value;
}

double gaussian_log_likelihood(const Mat& target, const Mat& predicted_mean, double fixed_var,
                               double scale, Mat* d_pred) {
  if (!(fixed_var > 0.0)) throw StructuralError("gaussian_log_likelihood: fixed_var must be > 0");
  if (target.rows() != predicted_mean.rows() || target.cols() != predicted_mean.cols()) {
    throw StructuralError("gaussian_log_likelihood: shape mismatch");
  }
  const double b = static_cast<double>(target.rows());
  const Mat resid = target - predicted_mean;
  const double value = -0.5 * std::log(2.0 * std::numbers::pi * fixed_var) * static_cast<double>(target.cols()) -
                       resid.squaredNorm() / (2.0 * fixed_var) / b;
  if (d_pred) *d_pred += (scale / (b * fixed_var)) * resid;
  return value;
}

GradCheckReport grad_check(const LossWithGrad& loss_fn, std::span<const double> parameters,
                           double epsilon) {
  if (!(epsilon > 0.0)) throw StructuralError("grad_check: epsilon must be > 0");
  std::vector<double> theta(parameters.begin(), parameters.end());
  std::vector<double> analytic(theta.size(), 0.0);
  const double f0 = loss_fn(theta, analytic);
  if (!std::isfinite(f0)) throw NumericalError("grad_check: non-finite loss");

  GradCheckReport report;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + epsilon;
    const double fp = loss_fn(theta, {});
    theta[i] = saved - epsilon;
    const double fm = loss_fn(theta, {});
    theta[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("grad_check: non-finite loss at parameter " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_parameter_index = i;
      report.analytic_value = analytic[i];
      report.numeric_value = numeric;
    }
  }
  return report;
}

}  // namespace iiae

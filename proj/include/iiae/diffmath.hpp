#pragma once

// Differentiable numerical substrate: dense feed-forward nets with explicit
// backprop, diagonal-Gaussian operations and their gradients, and a central
// finite-difference gradient checker.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace iiae {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Dimension or shape mismatch between arguments.
class StructuralError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value became NaN/Inf during evaluation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// Diagonal Gaussian stored as (mean, log-variance).
struct GaussianParams {
  Vec mean;
  Vec log_var;

  GaussianParams() = default;
  GaussianParams(Vec m, Vec lv);

  static GaussianParams standard(Eigen::Index dim);

  Eigen::Index dim() const { return mean.size(); }
  Vec variance() const { return log_var.array().exp().matrix(); }
  /// Throws StructuralError / NumericalError when the invariants fail.
  void validate() const;
};

/// Row-batched diagonal Gaussians: row i holds the parameters of sample i.
struct GaussianBatch {
  Mat mean;
  Mat log_var;

  Eigen::Index rows() const { return mean.rows(); }
  Eigen::Index dim() const { return mean.cols(); }
  GaussianParams row(Eigen::Index i) const;
};

enum class Activation { leaky_relu, tanh, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Mat weight;  // in x out; a batch multiplies on the left
  Vec bias;    // out
  Activation activation = Activation::identity;

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }
};

/// Cached activations of one forward pass, consumed by DenseNet::backward.
struct DenseTape {
  std::vector<Mat> inputs;           // input to layer i
  std::vector<Mat> pre_activations;  // affine output of layer i
  Mat output;
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<DenseLayer> layers);

  /// Layer widths `dims` (input first); hidden layers use `hidden`, the last
  /// layer uses `head`. Parameters are zero.
  static DenseNet zeros(std::span<const int> dims, Activation hidden, Activation head);

  Eigen::Index input_dim() const;
  Eigen::Index output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t parameter_count() const;

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  /// Row-batched forward pass. Throws NumericalError naming the layer on a
  /// non-finite intermediate.
  Mat forward(const Mat& input) const;
  Mat forward(const Mat& input, DenseTape& tape) const;

  /// Accumulates parameter gradients into `grad` (same shapes as *this) and
  /// returns d loss / d input.
  Mat backward(const DenseTape& tape, const Mat& d_output, DenseNet& grad) const;

  void set_zero();
  bool all_finite() const;

 private:
  void check_chain() const;
  std::vector<DenseLayer> layers_;
};

/// Forward pass on a single vector.
Vec dense_apply(const DenseNet& net, const Vec& input);

/// Splits a head output into mean and clamped log-variance halves.
GaussianBatch split_gaussian_head(const Mat& head_output);
/// Inverse of split_gaussian_head for gradients; log-variance gradients are
/// zeroed where the clamp was active.
Mat join_gaussian_head_grad(const Mat& head_output, const Mat& d_mean, const Mat& d_log_var);

Vec reparameterize(const GaussianParams& params, const Vec& noise);
Mat reparameterize(const GaussianBatch& params, const Mat& noise);

double kl_to_standard_normal(const GaussianParams& p);
double kl_diag_gaussian(const GaussianParams& p, const GaussianParams& q);
double gaussian_log_likelihood(const Vec& target, const Vec& predicted_mean, double fixed_var);

// Batched forms. Each returns the batch mean of the per-row quantity and,
// when gradient outputs are given, adds `scale` times the gradient of that
// batch mean into them.

double kl_to_standard_normal(const GaussianBatch& p, double scale = 0.0,
                             Mat* d_mean = nullptr, Mat* d_log_var = nullptr);

struct KlGrads {
  Mat* d_mean_p = nullptr;
  Mat* d_log_var_p = nullptr;
  Mat* d_mean_q = nullptr;
  Mat* d_log_var_q = nullptr;
};
double kl_diag_gaussian(const GaussianBatch& p, const GaussianBatch& q, double scale = 0.0,
                        const KlGrads& grads = {});

double gaussian_log_likelihood(const Mat& target, const Mat& predicted_mean, double fixed_var,
                               double scale = 0.0, Mat* d_pred = nullptr);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter_index = 0;
  double analytic_value = 0.0;
  double numeric_value = 0.0;
};

/// Evaluates the loss at `params`; writes the analytic gradient into `grad`
/// when it is non-empty.
using LossWithGrad = std::function<double(std::span<const double> params, std::span<double> grad)>;

/// Compares the analytic gradient against central differences with
/// relative error |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(const LossWithGrad& loss_fn, std::span<const double> parameters,
                           double epsilon);

}  // namespace iiae

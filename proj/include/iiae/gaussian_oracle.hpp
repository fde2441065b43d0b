#pragma once

// Closed-form information quantities for a jointly Gaussian surrogate of the
// encoder structure:
//   (x, y) ~ N(0, Sigma)
//   z_x = A x + n_x,   z_s = B [x; y] + n_s,   z_y = C y + n_y
// with independent zero-mean Gaussian noises. Every mutual information
// between blocks of (x, y, z_x, z_s, z_y) follows from log-determinants.

#include "iiae/diffmath.hpp"

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace iiae {

enum class Block { x, y, zx, zs, zy };

struct LinearGaussianSystem {
  Mat joint_xy_cov;  // (dx + dy) square, SPD
  Mat enc_x;         // A: dzx x dx
  Mat enc_s;         // B: dzs x (dx + dy)
  Mat enc_y;         // C: dzy x dy
  Mat noise_x_cov;   // dzx square, SPD
  Mat noise_s_cov;
  Mat noise_y_cov;

  Eigen::Index dx() const { return enc_x.cols(); }
  Eigen::Index dy() const { return enc_y.cols(); }

  /// Covariance of (x, y, z_x, z_s, z_y) in that order.
  Mat full_covariance() const;
  std::vector<Eigen::Index> indices(std::initializer_list<Block> blocks) const;
  void validate() const;

  struct Dims {
    int dx = 3, dy = 3, dzx = 2, dzs = 2, dzy = 2;
  };
  /// Random SPD joint covariance with cross-domain correlation, random
  /// encoder matrices and diagonal noise.
  static LinearGaussianSystem random(std::uint64_t seed, Dims dims);
  static LinearGaussianSystem random(std::uint64_t seed) { return random(seed, Dims{}); }
};

class SingularCovarianceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// I(a; b | c) in nats; pass an empty `conditioning` for plain MI.
double gaussian_mi(const LinearGaussianSystem& system, std::initializer_list<Block> group_a,
                   std::initializer_list<Block> group_b, std::initializer_list<Block> conditioning = {});

struct MiIdentityReport {
  // | I(Zx;Zs) - [ -I(X;Zx,Zs) + I(X;Zx) + I(X;Zs) ] |
  double decomposition_residual_x = 0.0;
  // Same with Y / Zy.
  double decomposition_residual_y = 0.0;
  // | [I(X;Zs) - I(X;Zs|Y)] - [I(Y;Zs) - I(Y;Zs|X)] |
  double interaction_symmetry_residual = 0.0;
  double interaction_information = 0.0;

  double max_residual() const;
};

MiIdentityReport verify_mi_identity(const LinearGaussianSystem& system);

/// Full-covariance Gaussian conditional p(v | u) = N(gain u + offset, cov).
struct LinearGaussianConditional {
  Mat gain;
  Vec offset;
  Mat cov;
};

/// True q(z_s | y) of the system.
LinearGaussianConditional shared_marginal_given_y(const LinearGaussianSystem& system);
/// True aggregate posterior q(z_x) as a conditional with an empty input.
LinearGaussianConditional aggregate_exclusive_x(const LinearGaussianSystem& system);
/// True posterior q(x | z_x, z_s).
LinearGaussianConditional posterior_x_given_codes(const LinearGaussianSystem& system);

struct BoundCheck {
  std::string name;
  double exact = 0.0;      // closed-form information quantity
  double estimate = 0.0;   // Monte-Carlo estimate of the variational bound
  double std_error = 0.0;  // of the estimate
  /// Signed so that a valid bound gives gap >= 0.
  double gap = 0.0;
  bool holds = false;                 // gap >= -4 SE
  bool insufficient_samples = false;  // SE larger than |gap|
};

struct BoundReport {
  std::vector<BoundCheck> checks;
  bool all_hold() const;
};

/// Variational approximations plugged into the bounds.
struct BoundApproximations {
  LinearGaussianConditional r_y;      // r(z_s | y), bounds I(X;Zs|Y) from above
  LinearGaussianConditional prior_x;  // p(z_x) (gain has zero columns), bounds I(X;Zx) from above
  LinearGaussianConditional decoder;  // p(x | z_x, z_s), bounds I(X;Zx,Zs) - H(X) from below
};

/// The tight choice: every approximation equals the true distribution.
BoundApproximations exact_approximations(const LinearGaussianSystem& system);

BoundReport verify_bound_directions(const LinearGaussianSystem& system, const BoundApproximations& approx,
                                    std::size_t mc_samples, std::uint64_t seed);

/// Full-covariance Gaussian helpers.
double kl_full_gaussian(const Vec& mean_p, const Mat& cov_p, const Vec& mean_q, const Mat& cov_q);
double log_det_spd(const Mat& m);

}  // namespace iiae

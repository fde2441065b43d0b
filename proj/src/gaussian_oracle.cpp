#include "iiae/gaussian_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace iiae {

namespace {

Mat gather(const Mat& m, const std::vector<Eigen::Index>& rows, const std::vector<Eigen::Index>& cols) {
  Mat out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(rows[i], cols[j]);
  }
  return out;
}

Mat solve_spd(const Mat& a, const Mat& b) {
  Eigen::LLT<Mat> llt(a);
  if (llt.info() != Eigen::Success) throw SingularCovarianceError("covariance is not positive definite");
  return llt.solve(b);
}

// Sigma_{a|c}
Mat conditional_cov(const Mat& full, const std::vector<Eigen::Index>& a, const std::vector<Eigen::Index>& c) {
  Mat saa = gather(full, a, a);
  if (c.empty()) return saa;
  const Mat sac = gather(full, a, c);
  const Mat scc = gather(full, c, c);
  return saa - sac * solve_spd(scc, sac.transpose());
}

std::vector<Eigen::Index> concat(std::vector<Eigen::Index> a, const std::vector<Eigen::Index>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Mat random_spd(std::mt19937_64& rng, Eigen::Index d, double ridge) {
  std::normal_distribution<double> n01;
  Mat g(d, d);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
  return g * g.transpose() / static_cast<double>(d) + ridge * Mat::Identity(d, d);
}

Mat random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n01;
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

Mat random_diag(std::mt19937_64& rng, Eigen::Index d) {
  std::uniform_real_distribution<double> u(0.2, 1.5);
  Vec v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = u(rng);
  return v.asDiagonal();
}

double log_density(const Vec& v, const Vec& mean, const Eigen::LLT<Mat>& llt, double log_det) {
  const Vec diff = v - mean;
  const Vec w = llt.matrixL().solve(diff);
  return -0.5 * (static_cast<double>(v.size()) * std::log(2.0 * std::numbers::pi) + log_det + w.squaredNorm());
}

struct RunningMean {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    sum_sq += v * v;
    ++n;
  }
  double mean() const { return sum / static_cast<double>(n); }
  double std_error() const {
    const double m = mean();
    const double var = std::max(0.0, (sum_sq / static_cast<double>(n) - m * m)) * static_cast<double>(n) /
                       static_cast<double>(n - 1);
    return std::sqrt(var / static_cast<double>(n));
  }
};

BoundCheck finish(std::string name, double exact, const RunningMean& est, double gap) {
  BoundCheck c;
  c.name = std::move(name);
  c.exact = exact;
  c.estimate = est.mean();
  c.std_error = est.std_error();
  c.gap = gap;
  c.holds = gap >= -4.0 * c.std_error;
  c.insufficient_samples = c.std_error > std::abs(gap);
  return c;
}

}  // namespace

double log_det_spd(const Mat& m) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw SingularCovarianceError("covariance is not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double kl_full_gaussian(const Vec& mean_p, const Mat& cov_p, const Vec& mean_q, const Mat& cov_q) {
  const Eigen::Index d = mean_p.size();
  const Mat q_inv_p = solve_spd(cov_q, cov_p);
  const Vec diff = mean_q - mean_p;
  const Vec solved = solve_spd(cov_q, diff);
  const double maha = diff.dot(solved);
  return 0.5 * (q_inv_p.trace() + maha - static_cast<double>(d) + log_det_spd(cov_q) - log_det_spd(cov_p));
}

Mat LinearGaussianSystem::full_covariance() const {
  const Eigen::Index dx_ = dx(), dy_ = dy();
  const Eigen::Index dzx = enc_x.rows(), dzs = enc_s.rows(), dzy = enc_y.rows();
  const Eigen::Index total = dx_ + dy_ + dzx + dzs + dzy;
  Mat lift = Mat::Zero(total, dx_ + dy_);
  lift.topRows(dx_ + dy_).setIdentity();
  lift.block(dx_ + dy_, 0, dzx, dx_) = enc_x;
  lift.block(dx_ + dy_ + dzx, 0, dzs, dx_ + dy_) = enc_s;
  lift.block(dx_ + dy_ + dzx + dzs, dx_, dzy, dy_) = enc_y;
  Mat cov = lift * joint_xy_cov * lift.transpose();
  cov.block(dx_ + dy_, dx_ + dy_, dzx, dzx) += noise_x_cov;
  cov.block(dx_ + dy_ + dzx, dx_ + dy_ + dzx, dzs, dzs) += noise_s_cov;
  cov.block(dx_ + dy_ + dzx + dzs, dx_ + dy_ + dzx + dzs, dzy, dzy) += noise_y_cov;
  return cov;
}

std::vector<Eigen::Index> LinearGaussianSystem::indices(std::initializer_list<Block> blocks) const {
  const Eigen::Index sizes[] = {dx(), dy(), enc_x.rows(), enc_s.rows(), enc_y.rows()};
  Eigen::Index starts[5];
  Eigen::Index acc = 0;
  for (int i = 0; i < 5; ++i) {
    starts[i] = acc;
    acc += sizes[i];
  }
  std::vector<Eigen::Index> out;
  for (Block b : blocks) {
    const int k = static_cast<int>(b);
    for (Eigen::Index i = 0; i < sizes[k]; ++i) out.push_back(starts[k] + i);
  }
  return out;
}

void LinearGaussianSystem::validate() const {
  const Eigen::Index d = joint_xy_cov.rows();
  if (joint_xy_cov.cols() != d || enc_x.cols() + enc_y.cols() != d || enc_s.cols() != d) {
    throw StructuralError("LinearGaussianSystem: encoder widths do not match the joint covariance");
  }
  if (noise_x_cov.rows() != enc_x.rows() || noise_s_cov.rows() != enc_s.rows() || noise_y_cov.rows() != enc_y.rows()) {
    throw StructuralError("LinearGaussianSystem: noise covariance sizes do not match the codes");
  }
  log_det_spd(full_covariance());
}

LinearGaussianSystem LinearGaussianSystem::random(std::uint64_t seed, Dims d) {
  std::mt19937_64 rng(seed);
  LinearGaussianSystem s;
  s.joint_xy_cov = random_spd(rng, d.dx + d.dy, 0.3);
  s.enc_x = random_matrix(rng, d.dzx, d.dx);
  s.enc_s = random_matrix(rng, d.dzs, d.dx + d.dy);
  s.enc_y = random_matrix(rng, d.dzy, d.dy);
  s.noise_x_cov = random_diag(rng, d.dzx);
  s.noise_s_cov = random_diag(rng, d.dzs);
  s.noise_y_cov = random_diag(rng, d.dzy);
  return s;
}

double gaussian_mi(const LinearGaussianSystem& system, std::initializer_list<Block> group_a,
                   std::initializer_list<Block> group_b, std::initializer_list<Block> conditioning) {
  for (Block a : group_a) {
    for (Block b : group_b) {
      if (a == b) throw StructuralError("gaussian_mi: groups must be disjoint");
    }
    for (Block c : conditioning) {
      if (a == c) throw StructuralError("gaussian_mi: conditioning overlaps a group");
    }
  }
  for (Block b : group_b) {
    for (Block c : conditioning) {
      if (b == c) throw StructuralError("gaussian_mi: conditioning overlaps a group");
    }
  }
  const Mat full = system.full_covariance();
  const auto a = system.indices(group_a);
  const auto b = system.indices(group_b);
  const auto c = system.indices(conditioning);
  return 0.5 * (log_det_spd(conditional_cov(full, a, c)) + log_det_spd(conditional_cov(full, b, c)) -
                log_det_spd(conditional_cov(full, concat(a, b), c)));
}

double MiIdentityReport::max_residual() const {
  return std::max({decomposition_residual_x, decomposition_residual_y, interaction_symmetry_residual});
}

MiIdentityReport verify_mi_identity(const LinearGaussianSystem& s) {
  using B = Block;
  MiIdentityReport r;
  const double lhs_x = gaussian_mi(s, {B::zx}, {B::zs});
  const double rhs_x = -gaussian_mi(s, {B::x}, {B::zx, B::zs}) + gaussian_mi(s, {B::x}, {B::zx}) +
                       gaussian_mi(s, {B::x}, {B::zs});
  r.decomposition_residual_x = std::abs(lhs_x - rhs_x);

  const double lhs_y = gaussian_mi(s, {B::zy}, {B::zs});
  const double rhs_y = -gaussian_mi(s, {B::y}, {B::zy, B::zs}) + gaussian_mi(s, {B::y}, {B::zy}) +
                       gaussian_mi(s, {B::y}, {B::zs});
  r.decomposition_residual_y = std::abs(lhs_y - rhs_y);

  const double via_x = gaussian_mi(s, {B::x}, {B::zs}) - gaussian_mi(s, {B::x}, {B::zs}, {B::y});
  const double via_y = gaussian_mi(s, {B::y}, {B::zs}) - gaussian_mi(s, {B::y}, {B::zs}, {B::x});
  r.interaction_symmetry_residual = std::abs(via_x - via_y);
  r.interaction_information = via_x;
  return r;
}

LinearGaussianConditional shared_marginal_given_y(const LinearGaussianSystem& s) {
  const Mat full = s.full_covariance();
  const auto zs = s.indices({Block::zs});
  const auto y = s.indices({Block::y});
  const Mat s_zy = gather(full, zs, y);
  LinearGaussianConditional c;
  c.gain = solve_spd(gather(full, y, y), s_zy.transpose()).transpose();
  c.offset = Vec::Zero(static_cast<Eigen::Index>(zs.size()));
  c.cov = conditional_cov(full, zs, y);
  return c;
}

LinearGaussianConditional aggregate_exclusive_x(const LinearGaussianSystem& s) {
  const Mat full = s.full_covariance();
  const auto zx = s.indices({Block::zx});
  LinearGaussianConditional c;
  c.gain = Mat::Zero(static_cast<Eigen::Index>(zx.size()), 0);
  c.offset = Vec::Zero(static_cast<Eigen::Index>(zx.size()));
  c.cov = gather(full, zx, zx);
  return c;
}

LinearGaussianConditional posterior_x_given_codes(const LinearGaussianSystem& s) {
  const Mat full = s.full_covariance();
  const auto x = s.indices({Block::x});
  const auto z = s.indices({Block::zx, Block::zs});
  const Mat s_xz = gather(full, x, z);
  LinearGaussianConditional c;
  c.gain = solve_spd(gather(full, z, z), s_xz.transpose()).transpose();
  c.offset = Vec::Zero(static_cast<Eigen::Index>(x.size()));
  c.cov = conditional_cov(full, x, z);
  return c;
}

BoundApproximations exact_approximations(const LinearGaussianSystem& s) {
  return {shared_marginal_given_y(s), aggregate_exclusive_x(s), posterior_x_given_codes(s)};
}

bool BoundReport::all_hold() const {
  return std::all_of(checks.begin(), checks.end(), [](const BoundCheck& c) { return c.holds; });
}

BoundReport verify_bound_directions(const LinearGaussianSystem& s, const BoundApproximations& approx,
                                    std::size_t mc_samples, std::uint64_t seed) {
  if (mc_samples < 2) throw std::invalid_argument("verify_bound_directions: need at least 2 samples");
  s.validate();
  using B = Block;
  const Eigen::Index dx = s.dx(), dy = s.dy();
  const Eigen::Index dzx = s.enc_x.rows(), dzs = s.enc_s.rows();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  auto draw = [&](Eigen::Index d) {
    Vec v(d);
    for (Eigen::Index i = 0; i < d; ++i) v(i) = n01(rng);
    return v;
  };
  const Mat l_xy = Eigen::LLT<Mat>(s.joint_xy_cov).matrixL();
  const Mat l_nx = Eigen::LLT<Mat>(s.noise_x_cov).matrixL();
  const Mat l_ns = Eigen::LLT<Mat>(s.noise_s_cov).matrixL();
  const Eigen::LLT<Mat> dec_llt(approx.decoder.cov);
  if (dec_llt.info() != Eigen::Success) throw SingularCovarianceError("decoder covariance is not positive definite");
  const double dec_log_det = log_det_spd(approx.decoder.cov);

  RunningMean cond_shared, vib, recon;
  for (std::size_t i = 0; i < mc_samples; ++i) {
    const Vec xy = l_xy * draw(dx + dy);
    const Vec x = xy.head(dx);
    const Vec y = xy.tail(dy);

    const Vec qs_mean = s.enc_s * xy;
    const Vec r_mean = approx.r_y.gain * y + approx.r_y.offset;
    cond_shared.add(kl_full_gaussian(qs_mean, s.noise_s_cov, r_mean, approx.r_y.cov));

    const Vec qx_mean = s.enc_x * x;
    vib.add(kl_full_gaussian(qx_mean, s.noise_x_cov, approx.prior_x.offset, approx.prior_x.cov));

    Vec z(dzx + dzs);
    z.head(dzx) = qx_mean + l_nx * draw(dzx);
    z.tail(dzs) = qs_mean + l_ns * draw(dzs);
    recon.add(log_density(x, approx.decoder.gain * z + approx.decoder.offset, dec_llt, dec_log_det));
  }

  const Mat full = s.full_covariance();
  const double h_x = 0.5 * (static_cast<double>(dx) * std::log(2.0 * std::numbers::pi * std::numbers::e) +
                            log_det_spd(gather(full, s.indices({B::x}), s.indices({B::x}))));

  BoundReport report;
  const double i_x_zs_given_y = gaussian_mi(s, {B::x}, {B::zs}, {B::y});
  report.checks.push_back(
      finish("conditional_shared_upper", i_x_zs_given_y, cond_shared, cond_shared.mean() - i_x_zs_given_y));
  const double i_x_zx = gaussian_mi(s, {B::x}, {B::zx});
  report.checks.push_back(finish("exclusive_vib_upper", i_x_zx, vib, vib.mean() - i_x_zx));
  const double i_x_codes = gaussian_mi(s, {B::x}, {B::zx, B::zs});
  auto rc = finish("reconstruction_lower", i_x_codes, recon, i_x_codes - (recon.mean() + h_x));
  rc.estimate = recon.mean() + h_x;
  report.checks.push_back(rc);
  return report;
}

}  // namespace iiae

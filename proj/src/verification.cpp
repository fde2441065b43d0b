#include "iiae/verification.hpp"

#include "iiae/gaussian_oracle.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace iiae {

using nlohmann::json;

bool SuiteReport::passed() const {
  for (const auto& p : properties) {
    if (!p.passed) return false;
  }
  return true;
}

std::vector<std::string> SuiteReport::failures() const {
  std::vector<std::string> out;
  for (const auto& p : properties) {
    if (!p.passed) out.push_back(p.name);
  }
  return out;
}

json to_json(const SuiteReport& r) {
  json props = json::array();
  for (const auto& p : r.properties) {
    props.push_back({{"name", p.name}, {"passed", p.passed}, {"value", p.value}, {"detail", p.detail}});
  }
  return json{{"suite", r.suite}, {"passed", r.passed()}, {"failures", r.failures()}, {"properties", props}};
}

std::vector<GradCase> gradient_cases() {
  auto make = [](ObjectiveVariant v, double lambda) {
    ObjectiveParams p;
    p.variant = v;
    p.lambda = lambda;
    return p;
  };
  return {
      {"elbo", make(ObjectiveVariant::elbo, 0.0)},
      {"iiae lambda=0.5", make(ObjectiveVariant::iiae, 0.5)},
      {"iiae lambda=2", make(ObjectiveVariant::iiae, 2.0)},
      {"iiae lambda=50", make(ObjectiveVariant::iiae, 50.0)},
      {"ii", make(ObjectiveVariant::ii, 2.0)},
      {"ii_mi", make(ObjectiveVariant::ii_mi, 2.0)},
      {"elbo+ii", make(ObjectiveVariant::elbo_plus_ii, 2.0)},
      {"elbo+ii-mi", make(ObjectiveVariant::elbo_plus_ii_mi, 2.0)},
  };
}

ModelConfig gradient_check_model() {
  ModelConfig c;
  c.x_dim = 5;
  c.y_dim = 4;
  c.zx_dim = 2;
  c.zs_dim = 3;
  c.zy_dim = 2;
  c.fe_width = 6;
  c.excl_hidden = {5};
  c.single_shared_hidden = {4};
  c.joint_shared_hidden = {5};
  c.dec_hidden = {5};
  return c;
}

double objective_gradient_error(const ObjectiveParams& params, std::uint64_t seed, double epsilon) {
  const ModelConfig cfg = gradient_check_model();
  const IIAEModel base = IIAEModel::initialized(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> n01;
  const Eigen::Index rows = 4;
  Batch batch{Mat(rows, cfg.x_dim), Mat(rows, cfg.y_dim)};
  for (Eigen::Index i = 0; i < batch.x.size(); ++i) batch.x.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < batch.y.size(); ++i) batch.y.data()[i] = u(rng);
  BatchNoise noise = BatchNoise::zeros(cfg, rows);
  for (Mat* m : {&noise.zx, &noise.zs, &noise.zy}) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n01(rng);
  }

  IIAEModel work = base;
  IIAEModel grad = IIAEModel::zeros(cfg);
  LossWithGrad fn = [&](std::span<const double> theta, std::span<double> g) {
    work.unflatten(theta);
    if (g.empty()) return evaluate_objective(work, batch, noise, params).total;
    grad.unflatten(std::vector<double>(g.size(), 0.0));
    const double v = evaluate_objective(work, batch, noise, params, &grad).total;
    const auto flat = grad.flatten();
    std::copy(flat.begin(), flat.end(), g.begin());
    return v;
  };
  const auto theta = base.flatten();
  return grad_check(fn, theta, epsilon).max_relative_error;
}

SuiteReport check_gradients(int seeds, double tolerance) {
  SuiteReport report{"grads", {}};
  for (const auto& c : gradient_cases()) {
    double worst = 0.0;
    for (int s = 0; s < seeds; ++s) worst = std::max(worst, objective_gradient_error(c.params, 1000 + s));
    std::ostringstream detail;
    detail << "max relative error " << worst << " over " << seeds << " seeds";
    report.properties.push_back({"gradient " + c.label, worst < tolerance, worst, detail.str()});
  }
  return report;
}

namespace {

GaussianParams random_gaussian(std::mt19937_64& rng, Eigen::Index dim) {
  std::normal_distribution<double> mean(0.0, 1.0);
  std::uniform_real_distribution<double> lv(-1.5, 1.5);
  GaussianParams p{Vec(dim), Vec(dim)};
  for (Eigen::Index i = 0; i < dim; ++i) {
    p.mean(i) = mean(rng);
    p.log_var(i) = lv(rng);
  }
  return p;
}

double diag_log_density(const Vec& z, const GaussianParams& p) {
  const double log2pi = std::log(2.0 * M_PI);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double d = z(i) - p.mean(i);
    acc += -0.5 * (log2pi + p.log_var(i) + d * d * std::exp(-p.log_var(i)));
  }
  return acc;
}

// Mean and standard error of log p(z) - log q(z), z ~ p.
std::pair<double, double> mc_kl(const GaussianParams& p, const GaussianParams& q, std::size_t samples,
                                std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  double sum = 0.0, sq = 0.0;
  Vec eps(p.dim());
  for (std::size_t s = 0; s < samples; ++s) {
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = n01(rng);
    const Vec z = reparameterize(p, eps);
    const double v = diag_log_density(z, p) - diag_log_density(z, q);
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(samples);
  const double mean = sum / n;
  const double var = std::max(sq / n - mean * mean, 0.0);
  return {mean, std::sqrt(var / n)};
}

}  // namespace

SuiteReport check_kl(int distributions, std::size_t samples, std::uint64_t seed) {
  SuiteReport report{"kl", {}};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(1, 8);
  for (int i = 0; i < distributions; ++i) {
    const Eigen::Index d = dim(rng);
    const GaussianParams p = random_gaussian(rng, d);
    const GaussianParams q = random_gaussian(rng, d);
    const GaussianParams standard = GaussianParams::standard(d);

    const auto [mc_std, se_std] = mc_kl(p, standard, samples, rng);
    const double cf_std = kl_to_standard_normal(p);
    const double z_std = std::abs(cf_std - mc_std) / se_std;
    report.properties.push_back({"kl_to_standard_normal #" + std::to_string(i), z_std <= 4.0, z_std,
                                 "closed " + std::to_string(cf_std) + " mc " + std::to_string(mc_std)});

    const auto [mc_pq, se_pq] = mc_kl(p, q, samples, rng);
    const double cf_pq = kl_diag_gaussian(p, q);
    const double z_pq = std::abs(cf_pq - mc_pq) / se_pq;
    report.properties.push_back({"kl_diag_gaussian #" + std::to_string(i), z_pq <= 4.0, z_pq,
                                 "closed " + std::to_string(cf_pq) + " mc " + std::to_string(mc_pq)});
  }
  return report;
}

SuiteReport check_mi_identity(int systems, double tolerance) {
  SuiteReport report{"mi-identity", {}};
  for (int i = 0; i < systems; ++i) {
    const auto sys = LinearGaussianSystem::random(static_cast<std::uint64_t>(i));
    const MiIdentityReport r = verify_mi_identity(sys);
    const std::string tag = " system " + std::to_string(i);
    report.properties.push_back({"decomposition x" + tag, r.decomposition_residual_x < tolerance,
                                 r.decomposition_residual_x, ""});
    report.properties.push_back({"decomposition y" + tag, r.decomposition_residual_y < tolerance,
                                 r.decomposition_residual_y, ""});
    report.properties.push_back({"interaction symmetry" + tag, r.interaction_symmetry_residual < tolerance,
                                 r.interaction_symmetry_residual,
                                 "interaction information " + std::to_string(r.interaction_information)});
  }
  return report;
}

namespace {

// Deliberately wrong approximations: the exact ones with shifted means and
// inflated covariances.
BoundApproximations perturbed_approximations(const LinearGaussianSystem& sys, std::mt19937_64& rng) {
  BoundApproximations a = exact_approximations(sys);
  std::normal_distribution<double> n01;
  for (LinearGaussianConditional* c : {&a.r_y, &a.prior_x, &a.decoder}) {
    for (Eigen::Index i = 0; i < c->offset.size(); ++i) c->offset(i) += 0.3 * n01(rng);
    for (Eigen::Index i = 0; i < c->gain.size(); ++i) c->gain.data()[i] *= 1.0 + 0.2 * n01(rng);
    c->cov *= 1.5;
  }
  return a;
}

}  // namespace

SuiteReport check_bounds(int systems, std::size_t mc_samples, std::uint64_t seed) {
  SuiteReport report{"bounds", {}};
  std::mt19937_64 rng(seed);
  for (int i = 0; i < systems; ++i) {
    const auto sys = LinearGaussianSystem::random(seed + 100 + static_cast<std::uint64_t>(i));
    const BoundReport loose = verify_bound_directions(sys, perturbed_approximations(sys, rng), mc_samples, rng());
    for (const auto& c : loose.checks) {
      std::ostringstream d;
      d << "exact " << c.exact << " bound " << c.estimate << " se " << c.std_error;
      report.properties.push_back({c.name + " system " + std::to_string(i), c.holds, c.gap, d.str()});
    }
  }
  const auto tight_sys = LinearGaussianSystem::random(seed + 7);
  const BoundReport tight = verify_bound_directions(tight_sys, exact_approximations(tight_sys), mc_samples, rng());
  for (const auto& c : tight.checks) {
    std::ostringstream d;
    d << "gap " << c.gap << " se " << c.std_error;
    report.properties.push_back({c.name + " tight", std::abs(c.gap) <= 4.0 * c.std_error, c.gap, d.str()});
  }
  return report;
}

}  // namespace iiae

#include "iiae/diffmath.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace iiae;

namespace {

// Monte-Carlo oracle: mean and standard error of log p(z) - log q(z) with
// z ~ p drawn directly from N(mean, exp(log_var)).
struct McEstimate {
  double mean;
  double se;
};

double log_density(const Vec& z, const Vec& mean, const Vec& log_var) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double var = std::exp(log_var(i));
    const double d = z(i) - mean(i);
    acc += -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * d * d / var;
  }
  return acc;
}

McEstimate mc_kl(const Vec& mp, const Vec& lp, const Vec& mq, const Vec& lq, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  double s = 0.0, ss = 0.0;
  Vec z(mp.size());
  for (std::size_t k = 0; k < n; ++k) {
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = mp(i) + std::exp(0.5 * lp(i)) * n01(rng);
    const double v = log_density(z, mp, lp) - log_density(z, mq, lq);
    s += v;
    ss += v * v;
  }
  const double mean = s / static_cast<double>(n);
  return {mean, std::sqrt((ss / static_cast<double>(n) - mean * mean) / static_cast<double>(n))};
}

Vec v1(double a) { return Vec::Constant(1, a); }

DenseNet random_net(std::vector<int> dims, Activation hidden, Activation head, std::mt19937_64& rng) {
  DenseNet net = DenseNet::zeros(dims, hidden, head);
  for (auto& layer : net.layers()) {
    layer.weight = testutil::random_matrix(layer.weight.rows(), layer.weight.cols(), rng, 0.5);
    layer.bias = testutil::random_vector(layer.bias.size(), rng, 0.1);
  }
  return net;
}

std::vector<double> flatten(const DenseNet& net) {
  std::vector<double> out;
  for (const auto& l : net.layers()) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

void unflatten(DenseNet& net, std::span<const double> flat) {
  std::size_t k = 0;
  for (auto& l : net.layers()) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = flat[k++];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = flat[k++];
  }
}

}  // namespace

TEST_CASE("dense_apply hand-evaluated cases") {
  SUBCASE("zero weights with a tanh head give zeros") {
    const std::vector<int> dims{3, 4, 2};
    const DenseNet net = DenseNet::zeros(dims, Activation::leaky_relu, Activation::tanh);
    const Vec out = dense_apply(net, Vec::Constant(3, 7.0));
    CHECK(out.size() == 2);
    CHECK(out.isZero(0.0));
  }
  SUBCASE("identity layer") {
    DenseNet net({DenseLayer{Mat::Identity(2, 2), Vec::Zero(2), Activation::identity}});
    Vec in(2);
    in << 1.0, 2.0;
    CHECK(dense_apply(net, in) == in);
  }
  SUBCASE("one leaky unit") {
    DenseNet net({DenseLayer{Mat::Constant(1, 1, 2.0), Vec::Constant(1, 1.0), Activation::leaky_relu}});
    CHECK(dense_apply(net, v1(-1.0))(0) == doctest::Approx(-0.2).epsilon(1e-15));
  }
}

TEST_CASE("dense net structure errors") {
  CHECK_THROWS_AS(DenseNet({DenseLayer{Mat::Zero(2, 3), Vec::Zero(3), Activation::identity},
                            DenseLayer{Mat::Zero(4, 1), Vec::Zero(1), Activation::identity}}),
                  StructuralError);
  const std::vector<int> dims{2, 2};
  DenseNet net = DenseNet::zeros(dims, Activation::leaky_relu, Activation::identity);
  CHECK_THROWS_AS(dense_apply(net, Vec::Zero(3)), StructuralError);
  net.layers()[0].bias(0) = std::numeric_limits<double>::infinity();
  CHECK_FALSE(net.all_finite());
  CHECK_THROWS_AS(dense_apply(net, Vec::Zero(2)), NumericalError);
}

TEST_CASE("reparameterize examples") {
  std::mt19937_64 rng(3);
  const GaussianParams any(testutil::random_vector(4, rng), testutil::random_vector(4, rng));
  CHECK(reparameterize(any, Vec::Zero(4)) == any.mean);
  CHECK(reparameterize(GaussianParams(v1(0.0), v1(0.0)), v1(1.5))(0) == 1.5);
  CHECK(reparameterize(GaussianParams(v1(2.0), v1(std::log(4.0))), v1(-1.0))(0) ==
        doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("reparameterize preserves the distribution") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  const GaussianParams p(Vec::LinSpaced(3, -1.0, 2.0), Vec::LinSpaced(3, -1.5, 1.0));
  const std::size_t n = 100000;
  Vec sum = Vec::Zero(3), sq = Vec::Zero(3);
  Vec eps(3);
  for (std::size_t k = 0; k < n; ++k) {
    for (Eigen::Index i = 0; i < 3; ++i) eps(i) = n01(rng);
    const Vec z = reparameterize(p, eps);
    sum += z;
    sq += z.cwiseProduct(z);
  }
  for (Eigen::Index i = 0; i < 3; ++i) {
    const double mean = sum(i) / n;
    const double var = sq(i) / n - mean * mean;
    const double true_var = std::exp(p.log_var(i));
    CHECK(std::abs(mean - p.mean(i)) < 4.0 * std::sqrt(true_var / n));
    // Var of the sample variance of a Gaussian is 2 sigma^4 / n.
    CHECK(std::abs(var - true_var) < 4.0 * std::sqrt(2.0 * true_var * true_var / n));
  }
}

TEST_CASE("kl_to_standard_normal frozen values") {
  CHECK(kl_to_standard_normal(GaussianParams::standard(3)) == 0.0);
  CHECK(kl_to_standard_normal(GaussianParams(v1(1.0), v1(0.0))) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(kl_to_standard_normal(GaussianParams(v1(0.0), v1(std::log(4.0)))) ==
        doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-14));
  CHECK(0.5 * (4.0 - 1.0 - std::log(4.0)) == doctest::Approx(0.80685).epsilon(1e-5));

  const auto a = mc_kl(v1(1.0), v1(0.0), v1(0.0), v1(0.0), 1000000, 1);
  CHECK(std::abs(a.mean - 0.5) < 4.0 * a.se);
  const auto b = mc_kl(v1(0.0), v1(std::log(4.0)), v1(0.0), v1(0.0), 1000000, 2);
  CHECK(std::abs(b.mean - 0.80685) < 4.0 * b.se + 1e-5);
}

TEST_CASE("kl_diag_gaussian frozen values and asymmetry") {
  const GaussianParams n01(v1(0.0), v1(0.0)), n11(v1(1.0), v1(0.0)), ne(v1(0.0), v1(1.0));
  CHECK(kl_diag_gaussian(n01, n01) == 0.0);
  CHECK(kl_diag_gaussian(n01, n11) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(kl_diag_gaussian(ne, n01) == doctest::Approx(0.5 * (-1.0 + std::exp(1.0) - 1.0)).epsilon(1e-14));
  CHECK(0.5 * (std::exp(1.0) - 2.0) == doctest::Approx(0.35914).epsilon(1e-5));
  // KL(N(0,e) || N(0,1)) differs from KL(N(0,1) || N(0,e)).
  CHECK(std::abs(kl_diag_gaussian(ne, n01) - kl_diag_gaussian(n01, ne)) > 0.1);

  const auto a = mc_kl(v1(0.0), v1(0.0), v1(1.0), v1(0.0), 1000000, 3);
  CHECK(std::abs(a.mean - 0.5) < 4.0 * a.se);
  const auto b = mc_kl(v1(0.0), v1(1.0), v1(0.0), v1(0.0), 1000000, 4);
  CHECK(std::abs(b.mean - 0.5 * (std::exp(1.0) - 2.0)) < 4.0 * b.se);
}

TEST_CASE("kl_diag_gaussian agrees with Monte-Carlo on random pairs") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 8);
  std::uniform_real_distribution<double> mean(-2.0, 2.0), lv(-2.0, 2.0);
  for (int t = 0; t < 20; ++t) {
    const int d = dim(rng);
    Vec mp(d), lp(d), mq(d), lq(d);
    for (int i = 0; i < d; ++i) {
      mp(i) = mean(rng);
      lp(i) = lv(rng);
      mq(i) = mean(rng);
      lq(i) = lv(rng);
    }
    const double closed = kl_diag_gaussian(GaussianParams(mp, lp), GaussianParams(mq, lq));
    CHECK(closed >= 0.0);
    const auto mc = mc_kl(mp, lp, mq, lq, 100000, 100 + t);
    CHECK(std::abs(closed - mc.mean) < 4.0 * mc.se);
  }
}

TEST_CASE("KL nonnegativity on random encoder outputs") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 1000; ++t) {
    const GaussianParams p(testutil::random_vector(4, rng, 2.0), testutil::random_vector(4, rng, 2.0));
    const GaussianParams q(testutil::random_vector(4, rng, 2.0), testutil::random_vector(4, rng, 2.0));
    CHECK(kl_to_standard_normal(p) >= 0.0);
    CHECK(kl_diag_gaussian(p, q) >= 0.0);
  }
}

TEST_CASE("gaussian_log_likelihood") {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi);
  CHECK(gaussian_log_likelihood(v1(0.3), v1(0.3), 1.0) == doctest::Approx(c).epsilon(1e-15));
  CHECK(c == doctest::Approx(-0.91894).epsilon(1e-5));
  CHECK(gaussian_log_likelihood(v1(1.0), v1(0.0), 1.0) == doctest::Approx(c - 0.5).epsilon(1e-15));

  // Exact fit is stationary for any variance.
  Mat target = Mat::Constant(2, 3, 0.25);
  for (double fv : {0.1, 1.0, 3.0}) {
    Mat d = Mat::Zero(2, 3);
    gaussian_log_likelihood(target, target, fv, 1.0, &d);
    CHECK(d.isZero(0.0));
  }
}

TEST_CASE("batched forms average the per-row quantities") {
  std::mt19937_64 rng(8);
  const GaussianBatch p{testutil::random_matrix(5, 3, rng), testutil::random_matrix(5, 3, rng, 0.5)};
  const GaussianBatch q{testutil::random_matrix(5, 3, rng), testutil::random_matrix(5, 3, rng, 0.5)};
  const Mat t = testutil::random_matrix(5, 3, rng), m = testutil::random_matrix(5, 3, rng);
  double ks = 0.0, kd = 0.0, ll = 0.0;
  for (Eigen::Index i = 0; i < 5; ++i) {
    ks += kl_to_standard_normal(p.row(i)) / 5.0;
    kd += kl_diag_gaussian(p.row(i), q.row(i)) / 5.0;
    ll += gaussian_log_likelihood(Vec(t.row(i).transpose()), Vec(m.row(i).transpose()), 0.7) / 5.0;
  }
  CHECK(kl_to_standard_normal(p) == doctest::Approx(ks).epsilon(1e-13));
  CHECK(kl_diag_gaussian(p, q) == doctest::Approx(kd).epsilon(1e-13));
  CHECK(gaussian_log_likelihood(t, m, 0.7) == doctest::Approx(ll).epsilon(1e-13));
}

TEST_CASE("batched loss gradients match central differences") {
  std::mt19937_64 rng(9);
  const Eigen::Index rows = 3, dim = 2;
  const std::size_t n = static_cast<std::size_t>(4 * rows * dim);
  std::vector<double> theta(n);
  for (auto& v : theta) v = std::normal_distribution<double>(0.0, 0.8)(rng);
  const Mat target = testutil::random_matrix(rows, dim, rng);

  auto unpack = [&](std::span<const double> th, Eigen::Index block) {
    Mat m(rows, dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = th[static_cast<std::size_t>(block * rows * dim + i)];
    return m;
  };
  LossWithGrad fn = [&](std::span<const double> th, std::span<double> g) {
    const GaussianBatch p{unpack(th, 0), unpack(th, 1)}, q{unpack(th, 2), unpack(th, 3)};
    if (g.empty()) {
      return 0.7 * kl_diag_gaussian(p, q) + 1.3 * kl_to_standard_normal(p) - gaussian_log_likelihood(target, q.mean, 0.5);
    }
    Mat dm_p = Mat::Zero(rows, dim), dl_p = dm_p, dm_q = dm_p, dl_q = dm_p;
    double v = kl_diag_gaussian(p, q, 0.7, KlGrads{&dm_p, &dl_p, &dm_q, &dl_q});
    v += kl_to_standard_normal(p, 1.3, &dm_p, &dl_p);
    v -= gaussian_log_likelihood(target, q.mean, 0.5, -1.0, &dm_q);
    const Mat* blocks[] = {&dm_p, &dl_p, &dm_q, &dl_q};
    for (int b = 0; b < 4; ++b) {
      for (Eigen::Index i = 0; i < blocks[b]->size(); ++i) g[static_cast<std::size_t>(b * rows * dim + i)] = blocks[b]->data()[i];
    }
    return v;
  };
  CHECK(grad_check(fn, theta, 1e-5).max_relative_error < 1e-6);
}

TEST_CASE("grad_check on a quadratic") {
  LossWithGrad fn = [](std::span<const double> th, std::span<double> g) {
    if (!g.empty()) g[0] = th[0];
    return 0.5 * th[0] * th[0];
  };
  const std::vector<double> theta{3.0};
  const GradCheckReport r = grad_check(fn, theta, 1e-4);
  CHECK(r.analytic_value == 3.0);
  CHECK(r.numeric_value == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(r.max_relative_error < 1e-8);
  CHECK(r.max_relative_error >= 0.0);
}

TEST_CASE("grad_check reports the worst parameter") {
  // Deliberately wrong gradient in the second coordinate.
  LossWithGrad fn = [](std::span<const double> th, std::span<double> g) {
    if (!g.empty()) {
      g[0] = 2.0 * th[0];
      g[1] = 3.0 * th[1];
    }
    return th[0] * th[0] + th[1] * th[1];
  };
  const std::vector<double> theta{1.0, 1.0};
  const GradCheckReport r = grad_check(fn, theta, 1e-5);
  CHECK(r.worst_parameter_index == 1);
  CHECK(r.max_relative_error == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("grad_check rejects non-finite losses") {
  LossWithGrad fn = [](std::span<const double> th, std::span<double> g) {
    if (!g.empty()) g[0] = 1.0;
    return th[0] > 0.0 ? std::nan("") : 0.0;
  };
  const std::vector<double> theta{0.0};
  CHECK_THROWS_AS(grad_check(fn, theta, 1e-3), NumericalError);
}

TEST_CASE("KL of a Gaussian head over a 2-layer DenseNet passes the gradient check") {
  std::mt19937_64 rng(21);
  DenseNet net = random_net({4, 6, 2 * 3}, Activation::leaky_relu, Activation::identity, rng);
  const Mat input = testutil::random_matrix(5, 4, rng);
  const std::vector<double> theta = flatten(net);
  DenseNet work = net;
  LossWithGrad fn = [&](std::span<const double> th, std::span<double> g) {
    unflatten(work, th);
    DenseTape tape;
    const Mat out = work.forward(input, tape);
    const GaussianBatch p = split_gaussian_head(out);
    if (g.empty()) return kl_to_standard_normal(p);
    Mat dm = Mat::Zero(p.rows(), p.dim()), dl = dm;
    const double v = kl_to_standard_normal(p, 1.0, &dm, &dl);
    DenseNet grad = work;
    grad.set_zero();
    work.backward(tape, join_gaussian_head_grad(out, dm, dl), grad);
    const auto flat = flatten(grad);
    std::copy(flat.begin(), flat.end(), g.begin());
    return v;
  };
  CHECK(grad_check(fn, theta, 1e-5).max_relative_error < 1e-4);
}

TEST_CASE("backward returns the input gradient") {
  std::mt19937_64 rng(22);
  const DenseNet net = random_net({3, 5, 4, 2}, Activation::leaky_relu, Activation::tanh, rng);
  const Mat input = testutil::random_matrix(2, 3, rng);
  const Mat weights = testutil::random_matrix(2, 2, rng);
  DenseTape tape;
  net.forward(input, tape);
  DenseNet grad = net;
  grad.set_zero();
  const Mat d_in = net.backward(tape, weights, grad);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < input.size(); ++i) {
    Mat a = input, b = input;
    a.data()[i] += h;
    b.data()[i] -= h;
    const double num = ((net.forward(a) - net.forward(b)).cwiseProduct(weights)).sum() / (2 * h);
    CHECK(d_in.data()[i] == doctest::Approx(num).epsilon(1e-6));
  }
}

TEST_CASE("log-variance clamp") {
  Mat head(1, 4);
  head << 0.5, -1.0, 25.0, -30.0;
  const GaussianBatch g = split_gaussian_head(head);
  CHECK(g.log_var(0, 0) == kLogVarMax);
  CHECK(g.log_var(0, 1) == kLogVarMin);
  const Mat d = join_gaussian_head_grad(head, Mat::Ones(1, 2), Mat::Ones(1, 2));
  CHECK(d(0, 0) == 1.0);
  CHECK(d(0, 1) == 1.0);
  CHECK(d(0, 2) == 0.0);
  CHECK(d(0, 3) == 0.0);
  CHECK_THROWS_AS(split_gaussian_head(Mat::Zero(1, 3)), StructuralError);
}

TEST_CASE("GaussianParams validation") {
  CHECK_THROWS_AS(GaussianParams(Vec::Zero(2), Vec::Zero(3)).validate(), StructuralError);
  Vec bad = Vec::Zero(2);
  bad(1) = std::nan("");
  CHECK_THROWS_AS(GaussianParams(bad, Vec::Zero(2)).validate(), NumericalError);
  CHECK_NOTHROW(GaussianParams::standard(2).validate());
  CHECK_THROWS_AS(kl_diag_gaussian(GaussianParams::standard(2), GaussianParams::standard(3)), StructuralError);
  CHECK(GaussianParams::standard(2).variance() == Vec::Ones(2));
}

TEST_CASE("activation names round-trip") {
  for (Activation a : {Activation::leaky_relu, Activation::tanh, Activation::identity}) {
    CHECK(activation_from_string(to_string(a)) == a);
  }
  CHECK_THROWS_AS(activation_from_string("relu6"), std::invalid_argument);
}

#include "iiae/trainer.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

using namespace iiae;

namespace {

PairedDataset small_data(std::int64_t n = 256, std::uint64_t seed = 0) {
  GenSpec g;
  g.n = n;
  g.seed = seed;
  return gen_synthetic(g);
}

TrainConfig small_config(std::int64_t steps = 20) {
  TrainConfig c;
  c.total_steps = steps;
  c.eval_every = 10;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("Adam leaves parameters alone under a zero gradient") {
  std::vector<double> p{1.0, -2.0, 3.5}, g(3, 0.0);
  const auto before = p;
  Adam adam(3, 0.1);
  for (int i = 0; i < 5; ++i) adam.step(p, g);
  CHECK(p == before);
  CHECK(adam.steps_taken() == 5);
}

TEST_CASE("Adam first step moves each coordinate by lr against the gradient sign") {
  std::vector<double> p{0.0, 0.0, 0.0}, g{3.0, -0.01, 250.0};
  Adam adam(3, 0.01, 0.9, 0.999, 1e-12);
  adam.step(p, g);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(p[2] == doctest::Approx(-0.01).epsilon(1e-9));

  // Second step against a hand-rolled bias-corrected update.
  const std::vector<double> g2{1.0, 1.0, -1.0};
  std::vector<double> expect = p;
  for (std::size_t i = 0; i < 3; ++i) {
    const double m = 0.9 * 0.1 * g[i] + 0.1 * g2[i];
    const double v = 0.999 * 0.001 * g[i] * g[i] + 0.001 * g2[i] * g2[i];
    expect[i] -= 0.01 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-12);
  }
  adam.step(p, g2);
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  std::vector<double> wrong(2, 0.0);
  CHECK_THROWS_AS(adam.step(wrong, wrong), StructuralError);
}

TEST_CASE("training is bitwise reproducible") {
  const PairedDataset ds = small_data();
  const TrainConfig c = small_config();
  const TrainResult a = train(c, ds), b = train(c, ds);
  CHECK(a.model.flatten() == b.model.flatten());
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i].loss.total == b.records[i].loss.total);
  TrainConfig other = c;
  other.seed = 1;
  CHECK(train(other, ds).model.flatten() != a.model.flatten());
}

TEST_CASE("identical runs write identical checkpoints") {
  testutil::TempDir dir("trainer");
  const PairedDataset ds = small_data();
  const TrainConfig c = small_config();
  train(c, ds, {dir / "a.ckpt", dir / "a.log", {{"argv", {"x"}}}});
  train(c, ds, {dir / "b.ckpt", dir / "b.log", {{"argv", {"x"}}}});
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  const LoadedCheckpoint ck = load_checkpoint(dir / "a.ckpt");
  CHECK(ck.model.flatten() == train(c, ds).model.flatten());
}

TEST_CASE("step log has one JSON line per record with monotone steps") {
  testutil::TempDir dir("trainer");
  const PairedDataset ds = small_data();
  TrainConfig c = small_config(25);
  const TrainResult r = train(c, ds, {std::nullopt, dir / "run.log", {}});
  std::ifstream in(dir / "run.log");
  std::string line;
  std::vector<std::int64_t> steps;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "total", "rec_x", "rec_y", "kl_zx", "kl_zy", "kl_zs_prior", "kl_zs_rx", "kl_zs_ry",
                            "wall_ms"}) {
      CHECK_MESSAGE(j.contains(key), key);
    }
    steps.push_back(j.at("step").get<std::int64_t>());
  }
  CHECK(steps == std::vector<std::int64_t>{1, 10, 20, 25});
  CHECK(r.records.size() == 4);
  for (std::size_t i = 1; i < r.records.size(); ++i) CHECK(r.records[i].wall_ms >= r.records[i - 1].wall_ms);
}

TEST_CASE("every logged KL is nonnegative") {
  const PairedDataset ds = small_data();
  TrainConfig c = small_config(40);
  c.eval_every = 1;
  const TrainResult r = train(c, ds);
  CHECK(r.records.size() == 40);
  for (const auto& rec : r.records) {
    CHECK(rec.loss.kl_zx >= 0.0);
    CHECK(rec.loss.kl_zy >= 0.0);
    CHECK(rec.loss.kl_zs_prior >= 0.0);
    CHECK(rec.loss.kl_zs_rx >= 0.0);
    CHECK(rec.loss.kl_zs_ry >= 0.0);
  }
}

TEST_CASE("short run reduces the loss") {
  // Median over three seeds of the step-200 loss minus the step-1 loss.
  GenSpec g;
  g.n = 2048;
  const PairedDataset ds = gen_synthetic(g);
  std::vector<double> deltas;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    TrainConfig c;
    c.total_steps = 200;
    c.eval_every = 100;
    c.seed = seed;
    const TrainResult r = train(c, ds);
    REQUIRE(r.records.front().step == 1);
    REQUIRE(r.records.back().step == 200);
    deltas.push_back(r.records.back().loss.total - r.records.front().loss.total);
  }
  std::sort(deltas.begin(), deltas.end());
  CHECK(deltas[1] < 0.0);
}

TEST_CASE("lambda = 0 reports the r-encoder KLs without weighting them") {
  const PairedDataset ds = small_data();
  TrainConfig c = small_config(10);
  c.objective.lambda = 0.0;
  const TrainResult r = train(c, ds);
  for (const auto& rec : r.records) {
    const auto& b = rec.loss;
    CHECK(b.kl_zs_rx > 0.0);
    const double elbo = -(b.recon_weight * (b.rec_x + b.rec_y) - b.kl_zx - b.kl_zy - b.kl_zs_prior);
    CHECK(b.total == doctest::Approx(elbo).epsilon(1e-12));
  }
}

TEST_CASE("eval_pass") {
  const PairedDataset ds = small_data(100);
  const TrainConfig c = small_config(30);
  const TrainResult r = train(c, ds);
  const LossBreakdown a = eval_pass(r.model, ds, c.objective, 5), b = eval_pass(r.model, ds, c.objective, 5);
  CHECK(a.total == b.total);
  CHECK(a.kl_zs_rx == b.kl_zs_rx);
  // Batching only changes the noise draw layout, not the average's scale.
  const LossBreakdown full = eval_pass(r.model, ds, c.objective, 5, 1000);
  CHECK(full.total == doctest::Approx(a.total).epsilon(0.05));
  MESSAGE("last batch loss " << r.records.back().loss.total << ", full pass " << a.total);

  const ModelConfig mc = c.model;
  PairedDataset zeros;
  zeros.x = Mat::Zero(7, mc.x_dim);
  zeros.y = Mat::Zero(7, mc.y_dim);
  const LossBreakdown z = eval_pass(IIAEModel::zeros(mc), zeros, c.objective, 3, 4);
  const double per_dim = -0.5 * std::log(2 * std::numbers::pi);
  CHECK(z.rec_x == doctest::Approx(per_dim * mc.x_dim).epsilon(1e-12));
  CHECK(z.rec_y == doctest::Approx(per_dim * mc.y_dim).epsilon(1e-12));
  CHECK(z.kl_zx == doctest::Approx(0.0));
  CHECK(z.kl_zs_prior == doctest::Approx(0.0));
  CHECK(z.kl_zs_rx == doctest::Approx(0.0));

  PairedDataset empty;
  empty.x = Mat(0, mc.x_dim);
  empty.y = Mat(0, mc.y_dim);
  CHECK_THROWS_AS(eval_pass(r.model, empty, c.objective), std::invalid_argument);
}

TEST_CASE("training argument errors") {
  const PairedDataset ds = small_data(32);
  TrainConfig c = small_config();
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(train(c, ds), std::invalid_argument);
  c = small_config();
  c.batch_size = 0;
  CHECK_THROWS_AS(train(c, ds), std::invalid_argument);
  c = small_config();
  c.total_steps = 0;
  CHECK_THROWS_AS(train(c, ds), std::invalid_argument);
  c = small_config();
  c.model.x_dim = 5;
  CHECK_THROWS_AS(train(c, ds), StructuralError);
  PairedDataset empty;
  empty.x = Mat(0, 16);
  empty.y = Mat(0, 16);
  CHECK_THROWS_AS(train(small_config(), empty), std::invalid_argument);
}

TEST_CASE("divergence is reported with its step") {
  const PairedDataset ds = small_data(64);
  TrainConfig c = small_config(50);
  c.learning_rate = 1e200;
  c.float32_params = false;
  CHECK_THROWS_WITH_AS(train(c, ds), doctest::Contains("step"), TrainingError);
}

TEST_CASE("TrainConfig JSON round trip") {
  TrainConfig c = small_config(123);
  c.objective.variant = ObjectiveVariant::ii_mi;
  c.objective.lambda = 1.0;
  c.repairing = Repairing::per_epoch;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(repairing_from_string("sometimes"), std::invalid_argument);
}

TEST_CASE("class re-pairing") {
  const PairedDataset aligned = small_data(128);
  PairedDataset paired = aligned;
  paired.provenance = {{"generator", "pair_by_class"}};
  const TrainConfig c = small_config(30);

  // Aligned data is left aligned by default; class-paired data is re-paired.
  TrainConfig never = c;
  never.repairing = Repairing::never;
  TrainConfig epoch = c;
  epoch.repairing = Repairing::per_epoch;
  const auto base = train(c, aligned).model.flatten();
  CHECK(train(never, paired).model.flatten() == base);
  CHECK(train(c, paired).model.flatten() == train(epoch, aligned).model.flatten());
  CHECK(train(c, paired).model.flatten() != base);

  PairedDataset unlabeled = aligned;
  unlabeled.shared_class.reset();
  CHECK_THROWS_AS(train(epoch, unlabeled), std::invalid_argument);
}

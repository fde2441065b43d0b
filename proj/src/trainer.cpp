#include "iiae/trainer.hpp"

#include "iiae/file_util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

namespace iiae {

using nlohmann::json;

std::string to_string(Repairing r) {
  switch (r) {
    case Repairing::automatic: return "auto";
    case Repairing::per_epoch: return "epoch";
    case Repairing::never: return "never";
  }
  return "auto";
}

Repairing repairing_from_string(const std::string& s) {
  if (s == "auto") return Repairing::automatic;
  if (s == "epoch") return Repairing::per_epoch;
  if (s == "never") return Repairing::never;
  throw std::invalid_argument("unknown re-pairing mode '" + s + "' (auto|epoch|never)");
}

void TrainConfig::validate() const {
  objective.validate();
  model.validate();
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw std::invalid_argument("Adam epsilon must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (total_steps < 1) throw std::invalid_argument("total steps must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be > 0");
}

json to_json(const TrainConfig& c) {
  return json{{"variant", to_string(c.objective.variant)},
              {"lambda", c.objective.lambda},
              {"recon_weight", c.objective.recon_weight},
              {"fixed_var", c.objective.fixed_var},
              {"model", c.model},
              {"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"batch_size", c.batch_size},
              {"total_steps", c.total_steps},
              {"eval_every", c.eval_every},
              {"seed", c.seed},
              {"clip_norm", c.clip_norm},
              {"float32_params", c.float32_params},
              {"repairing", to_string(c.repairing)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.objective.variant = variant_from_string(j.at("variant").get<std::string>());
  c.objective.lambda = j.at("lambda").get<double>();
  c.objective.recon_weight = j.at("recon_weight").get<double>();
  c.objective.fixed_var = j.value("fixed_var", 1.0);
  c.model = j.at("model").get<ModelConfig>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.value("beta1", 0.9);
  c.beta2 = j.value("beta2", 0.999);
  c.adam_eps = j.value("adam_eps", 1e-8);
  c.batch_size = j.at("batch_size").get<int>();
  c.total_steps = j.at("total_steps").get<std::int64_t>();
  c.eval_every = j.value("eval_every", std::int64_t{100});
  c.seed = j.at("seed").get<std::uint64_t>();
  c.clip_norm = j.value("clip_norm", 100.0);
  c.float32_params = j.value("float32_params", true);
  c.repairing = repairing_from_string(j.value("repairing", "auto"));
  return c;
}

json to_json(const StepRecord& r) {
  json j = to_json(r.loss);
  j["step"] = r.step;
  j["wall_ms"] = r.wall_ms;
  return j;
}

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw StructuralError("Adam: parameter count changed");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

void Adam::step(IIAEModel& params, const IIAEModel& grad) {
  std::vector<double> flat = params.flatten();
  step(flat, grad.flatten());
  params.unflatten(flat);
}

BatchNoise sample_noise(const ModelConfig& c, Eigen::Index rows, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  auto fill = [&](Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n01(rng);
    }
    return m;
  };
  BatchNoise n;
  n.zx = fill(c.zx_dim);
  n.zs = fill(c.zs_dim);
  n.zy = fill(c.zy_dim);
  return n;
}

namespace {

// `partner`, when non-empty, maps each x row to the y row it is paired with.
Batch gather_batch(const PairedDataset& ds, std::span<const Eigen::Index> rows,
                   const std::vector<Eigen::Index>& partner = {}) {
  Batch b{Mat(static_cast<Eigen::Index>(rows.size()), ds.x.cols()),
          Mat(static_cast<Eigen::Index>(rows.size()), ds.y.cols())};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.x.row(static_cast<Eigen::Index>(i)) = ds.x.row(rows[i]);
    b.y.row(static_cast<Eigen::Index>(i)) = ds.y.row(partner.empty() ? rows[i] : partner[static_cast<std::size_t>(rows[i])]);
  }
  return b;
}

// Permutes y partners within each class.
void repair_within_class(const std::vector<int>& labels, std::vector<Eigen::Index>& partner, std::mt19937_64& rng) {
  std::map<int, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  partner.resize(labels.size());
  for (auto& [c, rows] : by_class) {
    std::vector<Eigen::Index> ys = rows;
    std::shuffle(ys.begin(), ys.end(), rng);
    for (std::size_t k = 0; k < rows.size(); ++k) partner[static_cast<std::size_t>(rows[k])] = ys[k];
  }
}

bool repairs(const TrainConfig& c, const PairedDataset& ds) {
  switch (c.repairing) {
    case Repairing::per_epoch: return true;
    case Repairing::never: return false;
    case Repairing::automatic: return ds.provenance.is_object() && ds.provenance.value("generator", "") == "pair_by_class";
  }
  return false;
}

double global_norm(const IIAEModel& grad) {
  double sq = 0.0;
  for (const auto& [name, data] : grad.tensors()) {
    for (double v : data) sq += v * v;
  }
  return std::sqrt(sq);
}

void scale_all(IIAEModel& grad, double factor) {
  for (auto& t : grad.tensors()) {
    for (double& v : t.data) v *= factor;
  }
}

// Seeds for the independent streams of one run.
constexpr std::uint64_t kInitStream = 0x1f83d9abfb41bd6bULL;
constexpr std::uint64_t kOrderStream = 0x5be0cd19137e2179ULL;
constexpr std::uint64_t kNoiseStream = 0x6a09e667f3bcc908ULL;
constexpr std::uint64_t kPairStream = 0x3c6ef372fe94f82bULL;

}  // namespace

TrainResult train(const TrainConfig& config, const PairedDataset& dataset, const TrainOutputs& outputs) {
  config.validate();
  dataset.validate();
  if (dataset.size() == 0) throw std::invalid_argument("train: dataset is empty");
  if (dataset.x.cols() != config.model.x_dim || dataset.y.cols() != config.model.y_dim) {
    throw StructuralError("train: dataset widths do not match the model config");
  }
  const bool repair = repairs(config, dataset);
  if (repair && !dataset.shared_class) throw std::invalid_argument("train: re-pairing needs shared_class labels");

  TrainResult result;
  result.model = IIAEModel::initialized(config.model, config.seed ^ kInitStream);
  if (config.float32_params) result.model.round_to_float32();
  IIAEModel grad = IIAEModel::zeros(config.model);
  std::vector<double> params = result.model.flatten();
  Adam adam(params.size(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);

  std::mt19937_64 order_rng(config.seed ^ kOrderStream);
  std::mt19937_64 noise_rng(config.seed ^ kNoiseStream);
  std::mt19937_64 pair_rng(config.seed ^ kPairStream);
  std::vector<Eigen::Index> partner;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(dataset.size()));
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(std::min<Eigen::Index>(config.batch_size, dataset.size()));
  std::size_t cursor = order.size();  // forces a shuffle on the first step

  const auto start = std::chrono::steady_clock::now();
  for (std::int64_t step = 1; step <= config.total_steps; ++step) {
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), order_rng);
      if (repair) repair_within_class(*dataset.shared_class, partner, pair_rng);
      cursor = 0;
    }
    const Batch b = gather_batch(dataset, std::span<const Eigen::Index>(order).subspan(cursor, batch), partner);
    cursor += batch;
    const BatchNoise noise = sample_noise(config.model, b.x.rows(), noise_rng);

    for (auto& t : grad.tensors()) std::fill(t.data.begin(), t.data.end(), 0.0);
    LossBreakdown loss;
    try {
      loss = evaluate_objective(result.model, b, noise, config.objective, &grad);
    } catch (const NumericalError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    }
    if (auto bad = loss.first_non_finite()) {
      throw TrainingError("non-finite loss term '" + *bad + "' at step " + std::to_string(step));
    }

    const double norm = global_norm(grad);
    if (!std::isfinite(norm)) throw TrainingError("non-finite gradient at step " + std::to_string(step));
    if (norm > config.clip_norm) scale_all(grad, config.clip_norm / norm);

    adam.step(params, grad.flatten());
    if (config.float32_params) {
      for (double& v : params) v = static_cast<double>(static_cast<float>(v));
    }
    result.model.unflatten(params);

    if (step == 1 || step % config.eval_every == 0 || step == config.total_steps) {
      const auto now = std::chrono::steady_clock::now();
      result.records.push_back({step, loss, std::chrono::duration<double, std::milli>(now - start).count()});
    }
  }

  if (outputs.log) {
    write_atomically(*outputs.log, [&](std::ostream& out) {
      for (const auto& r : result.records) out << to_json(r).dump() << '\n';
    });
  }
  if (outputs.checkpoint) {
    json snapshot = to_json(config);
    snapshot["invocation"] = outputs.invocation;
    save_checkpoint(result.model, snapshot, config.total_steps, config.seed, *outputs.checkpoint);
  }
  return result;
}

LossBreakdown eval_pass(const IIAEModel& model, const PairedDataset& dataset, const ObjectiveParams& params,
                        std::uint64_t noise_seed, int batch_size) {
  if (dataset.size() == 0) throw std::invalid_argument("eval_pass: dataset is empty");
  if (batch_size < 1) throw std::invalid_argument("eval_pass: batch size must be >= 1");
  std::mt19937_64 rng(noise_seed);
  LossBreakdown acc;
  acc.variant = params.variant;
  acc.lambda = params.lambda;
  acc.recon_weight = params.recon_weight;
  const Eigen::Index n = dataset.size();
  std::vector<Eigen::Index> rows;
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index count = std::min<Eigen::Index>(batch_size, n - start);
    rows.resize(static_cast<std::size_t>(count));
    std::iota(rows.begin(), rows.end(), start);
    const Batch b = gather_batch(dataset, rows);
    const BatchNoise noise = sample_noise(model.config, count, rng);
    const LossBreakdown part = evaluate_objective(model, b, noise, params);
    const double w = static_cast<double>(count) / static_cast<double>(n);
    acc.rec_x += w * part.rec_x;
    acc.rec_y += w * part.rec_y;
    acc.rec_x_shared += w * part.rec_x_shared;
    acc.rec_y_shared += w * part.rec_y_shared;
    acc.kl_zx += w * part.kl_zx;
    acc.kl_zy += w * part.kl_zy;
    acc.kl_zs_prior += w * part.kl_zs_prior;
    acc.kl_zs_rx += w * part.kl_zs_rx;
    acc.kl_zs_ry += w * part.kl_zs_ry;
    acc.total += w * part.total;
  }
  return acc;
}

}  // namespace iiae

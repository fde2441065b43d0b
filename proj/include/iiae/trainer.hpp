#pragma once

#include "iiae/data.hpp"
#include "iiae/model.hpp"
#include "iiae/objective.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <optional>
#include <string>
#include <vector>

namespace iiae {

/// How y partners are chosen for class-paired data. `automatic` re-pairs
/// every epoch when the dataset came from pair_by_class and keeps rows
/// aligned otherwise.
enum class Repairing { automatic, per_epoch, never };

std::string to_string(Repairing r);
Repairing repairing_from_string(const std::string& s);

struct TrainConfig {
  ObjectiveParams objective;
  ModelConfig model = ModelConfig::synthetic_default(16, 16);
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 64;
  std::int64_t total_steps = 20000;
  std::int64_t eval_every = 100;
  std::uint64_t seed = 0;
  double clip_norm = 100.0;
  /// Keep parameters representable as float32 after every update so that
  /// checkpoints round-trip exactly.
  bool float32_params = true;
  Repairing repairing = Repairing::automatic;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepRecord {
  std::int64_t step = 0;
  LossBreakdown loss;
  double wall_ms = 0.0;
};

nlohmann::json to_json(const StepRecord& r);

class Adam {
 public:
  Adam(std::size_t size, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// One update of `params` in tensors() order.
  void step(IIAEModel& params, const IIAEModel& grad);
  void step(std::span<double> params, std::span<const double> grad);
  std::int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> log;
  nlohmann::json invocation = nlohmann::json::object();  // echoed into artifacts
};

struct TrainResult {
  IIAEModel model;
  std::vector<StepRecord> records;
};

/// Mini-batch Adam on the configured objective. Batch order comes from one
/// seeded stream, reparameterization noise from another, parameter init
/// from a third; single-threaded runs are bitwise reproducible.
TrainResult train(const TrainConfig& config, const PairedDataset& dataset, const TrainOutputs& outputs = {});

/// Full-dataset average breakdown with frozen noise (no updates).
LossBreakdown eval_pass(const IIAEModel& model, const PairedDataset& dataset, const ObjectiveParams& params,
                        std::uint64_t noise_seed = 0, int batch_size = 1024);

/// Fills a batch of standard-normal draws.
BatchNoise sample_noise(const ModelConfig& c, Eigen::Index rows, std::mt19937_64& rng);

}  // namespace iiae

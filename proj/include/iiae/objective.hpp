#pragma once

// Training objectives. Every objective is returned as a loss to minimize,
// i.e. the negated lower bound. Entropy constants H(X), H(Y) are dropped.

#include "iiae/model.hpp"

#include <optional>
#include <string>

namespace iiae {

enum class ObjectiveVariant {
  elbo,             // plain ELBO
  iiae,             // (1+l) ELBO + l KL(q_s||p) - l (KL(q_s||r_x) + KL(q_s||r_y))
  ii,               // interaction information only; shared-only reconstructions
  ii_mi,            // interaction information minus shared/exclusive MI
  elbo_plus_ii,     // ELBO + l * II
  elbo_plus_ii_mi,  // ELBO + l * (II - MI)
};

std::string to_string(ObjectiveVariant v);
ObjectiveVariant variant_from_string(const std::string& s);

struct ObjectiveParams {
  ObjectiveVariant variant = ObjectiveVariant::iiae;
  double lambda = 2.0;
  double recon_weight = 10.0;
  double fixed_var = 1.0;  // decoder likelihood variance

  void validate() const;
};

/// Per-term decomposition. rec_* are batch-mean log-likelihoods (nats), KL
/// fields are batch means. Terms outside a variant's formula are still
/// reported where they are defined; II zeroes the exclusive-path fields.
struct LossBreakdown {
  ObjectiveVariant variant = ObjectiveVariant::iiae;
  double rec_x = 0.0;
  double rec_y = 0.0;
  double rec_x_shared = 0.0;  // log p(x | z_s) with the exclusive input zeroed
  double rec_y_shared = 0.0;
  double kl_zx = 0.0;
  double kl_zy = 0.0;
  double kl_zs_prior = 0.0;
  double kl_zs_rx = 0.0;
  double kl_zs_ry = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double recon_weight = 0.0;

  /// NaN/Inf check; returns the name of the first non-finite field.
  std::optional<std::string> first_non_finite() const;
};

nlohmann::json to_json(const LossBreakdown& b);

struct Batch {
  Mat x;  // rows = pairs
  Mat y;
};

/// Standard-normal draws, one row per pair.
struct BatchNoise {
  Mat zx, zs, zy;

  static BatchNoise zeros(const ModelConfig& c, Eigen::Index rows);
};

/// Evaluates the objective. When `grad` is non-null it must have the
/// architecture of `model`; the gradient of `total` is added into it.
LossBreakdown evaluate_objective(const IIAEModel& model, const Batch& batch, const BatchNoise& noise,
                                 const ObjectiveParams& params, IIAEModel* grad = nullptr);

LossBreakdown elbo_terms(const IIAEModel& model, const Batch& batch, const BatchNoise& noise,
                         double recon_weight = 10.0, double fixed_var = 1.0, IIAEModel* grad = nullptr);

LossBreakdown iiae_loss(const IIAEModel& model, const Batch& batch, const BatchNoise& noise, double lambda,
                        double recon_weight, double fixed_var = 1.0, IIAEModel* grad = nullptr);

/// `variant` must be one of the four interaction-information ablations.
LossBreakdown ablation_loss(const IIAEModel& model, const Batch& batch, const BatchNoise& noise,
                            ObjectiveVariant variant, double lambda, double recon_weight,
                            double fixed_var = 1.0, IIAEModel* grad = nullptr);

}  // namespace iiae

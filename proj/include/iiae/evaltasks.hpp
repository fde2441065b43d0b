#pragma once

// Downstream evaluation: representation extraction, exhaustive retrieval
// with Recall@K / mAP / Precision@K, linear probes and batch translation.

#include "iiae/data.hpp"
#include "iiae/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace iiae {

enum class Domain { x, y };
enum class Representation { shared, exclusive_x, exclusive_y };
enum class Metric { euclidean, cosine };

std::string to_string(Representation r);
std::string to_string(Metric m);
Representation representation_from_string(const std::string& s);
Metric metric_from_string(const std::string& s);

/// Posterior means: r(z_s|.) for shared, q(z_x|x) / q(z_y|y) for exclusive.
/// An exclusive representation must match the item domain.
Mat embed(const IIAEModel& model, const Mat& items, Domain domain, Representation representation);

/// relevance[q] lists the database indices relevant to query q.
using Relevance = std::vector<std::vector<Eigen::Index>>;

/// Query i is relevant only to database item i.
Relevance pair_relevance(Eigen::Index n);
/// Query i is relevant to every database item with the same label.
Relevance class_relevance(const std::vector<int>& query_labels, const std::vector<int>& database_labels);

struct RetrievalReport {
  Metric metric = Metric::euclidean;
  Representation representation = Representation::shared;
  std::map<int, double> recall_at;
  std::map<int, double> precision_at;
  double mean_average_precision = 0.0;
  std::vector<Eigen::Index> first_relevant_rank;  // 1-based, per query

  double recall(int k) const { return recall_at.at(k); }
};

nlohmann::json to_json(const RetrievalReport& r);

/// Database indices of one query ordered best-first; ties break by
/// ascending index.
std::vector<Eigen::Index> rank_database(const Vec& query, const Mat& database, Metric metric);

/// Exhaustive ranking of the database for every query. K larger than the
/// database is truncated to the database size.
RetrievalReport retrieve(const Mat& queries, const Mat& database, Metric metric, const Relevance& relevance,
                         const std::vector<int>& ks, Representation representation = Representation::shared);

struct AblationReports {
  RetrievalReport shared;       // x -> y with single-view shared encoders
  RetrievalReport exclusive_x;  // x -> y, queries by q(z_x|x), database by q(z_y|y)
  RetrievalReport exclusive_y;  // y -> x, queries by q(z_y|y), database by q(z_x|x)
};

enum class GroundTruth { pair, shared_class };

AblationReports exclusive_ablation(const IIAEModel& model, const PairedDataset& test, Metric metric,
                                   const std::vector<int>& ks, GroundTruth ground_truth = GroundTruth::pair);

enum class ProbeKind { classification, regression };

struct ProbeReport {
  std::string target;
  Representation representation = Representation::shared;
  ProbeKind kind = ProbeKind::classification;
  double score = 0.0;  // accuracy for classes, mean R^2 for continuous targets
};

nlohmann::json to_json(const ProbeReport& r);

/// 5-fold cross-validated ridge-regularized linear probe on standardized
/// features: multinomial logistic regression for class labels (stored as
/// one column of integers), least squares for continuous targets.
ProbeReport probe(const Mat& embeddings, const Mat& targets, ProbeKind kind, std::uint64_t seed = 0,
                  int folds = 5);

struct TranslationResult {
  Mat outputs;
  std::optional<double> mse;  // against the paired targets, when present
};

struct TranslateOptions {
  Direction direction = Direction::x_to_y;
  bool guided = false;
  std::uint64_t noise_seed = 0;  // prior mode
  std::optional<std::filesystem::path> out_path;
  nlohmann::json invocation = nlohmann::json::object();
};

/// Translates every row; guided mode uses the paired item of the target
/// domain as the reference. Writes a single-domain IIPD file when asked.
TranslationResult translate_batch(const IIAEModel& model, const PairedDataset& dataset, const TranslateOptions& opts);

/// Worker count from IIAE_THREADS (default 1).
int configured_threads();

}  // namespace iiae

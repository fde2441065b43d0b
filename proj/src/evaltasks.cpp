#include "iiae/evaltasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <thread>

namespace iiae {

using nlohmann::json;

std::string to_string(Representation r) {
  switch (r) {
    case Representation::shared: return "shared";
    case Representation::exclusive_x: return "exclusive_x";
    case Representation::exclusive_y: return "exclusive_y";
  }
  return "shared";
}

std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

Representation representation_from_string(const std::string& s) {
  if (s == "shared") return Representation::shared;
  if (s == "exclusive_x" || s == "exclusive-x") return Representation::exclusive_x;
  if (s == "exclusive_y" || s == "exclusive-y") return Representation::exclusive_y;
  throw std::invalid_argument("unknown representation '" + s + "'");
}

Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw std::invalid_argument("unknown metric '" + s + "'");
}

int configured_threads() {
  if (const char* env = std::getenv("IIAE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

namespace {

template <typename Fn>
void parallel_for(Eigen::Index n, Fn&& fn) {
  const int threads = std::min<Eigen::Index>(configured_threads(), std::max<Eigen::Index>(n, 1));
  if (threads <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (Eigen::Index i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

Mat embed(const IIAEModel& model, const Mat& items, Domain domain, Representation representation) {
  switch (representation) {
    case Representation::shared:
      return domain == Domain::x ? encode_rx(model, items).mean : encode_ry(model, items).mean;
    case Representation::exclusive_x:
      if (domain != Domain::x) throw StructuralError("embed: exclusive_x applies to x items only");
      return encode_qx(model, items).mean;
    case Representation::exclusive_y:
      if (domain != Domain::y) throw StructuralError("embed: exclusive_y applies to y items only");
      return encode_qy(model, items).mean;
  }
  return {};
}

Relevance pair_relevance(Eigen::Index n) {
  Relevance r(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = {i};
  return r;
}

Relevance class_relevance(const std::vector<int>& query_labels, const std::vector<int>& database_labels) {
  std::map<int, std::vector<Eigen::Index>> by_label;
  for (std::size_t j = 0; j < database_labels.size(); ++j) {
    by_label[database_labels[j]].push_back(static_cast<Eigen::Index>(j));
  }
  Relevance r(query_labels.size());
  for (std::size_t i = 0; i < query_labels.size(); ++i) {
    auto it = by_label.find(query_labels[i]);
    if (it != by_label.end()) r[i] = it->second;
  }
  return r;
}

json to_json(const RetrievalReport& r) {
  json recall = json::object(), precision = json::object();
  for (const auto& [k, v] : r.recall_at) recall[std::to_string(k)] = v;
  for (const auto& [k, v] : r.precision_at) precision[std::to_string(k)] = v;
  return json{{"metric", to_string(r.metric)},
              {"representation", to_string(r.representation)},
              {"recall_at", recall},
              {"precision_at", precision},
              {"mAP", r.mean_average_precision},
              {"first_relevant_rank", r.first_relevant_rank}};
}

std::vector<Eigen::Index> rank_database(const Vec& query, const Mat& database, Metric metric) {
  const Eigen::Index n = database.rows();
  Vec score(n);  // lower is better
  if (metric == Metric::euclidean) {
    for (Eigen::Index j = 0; j < n; ++j) score(j) = (database.row(j).transpose() - query).squaredNorm();
  } else {
    const double qn = query.norm();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double dn = database.row(j).norm();
      const double denom = qn * dn;
      score(j) = denom > 0.0 ? -database.row(j).dot(query) / denom : 0.0;
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return score(a) < score(b); });
  return order;
}

RetrievalReport retrieve(const Mat& queries, const Mat& database, Metric metric, const Relevance& relevance,
                         const std::vector<int>& ks, Representation representation) {
  if (queries.cols() != database.cols()) {
    throw StructuralError("retrieve: query width " + std::to_string(queries.cols()) + " differs from database width " +
                          std::to_string(database.cols()));
  }
  if (static_cast<Eigen::Index>(relevance.size()) != queries.rows()) {
    throw StructuralError("retrieve: relevance list does not cover every query");
  }
  if (database.rows() == 0) throw StructuralError("retrieve: empty database");
  for (std::size_t q = 0; q < relevance.size(); ++q) {
    if (relevance[q].empty()) throw std::invalid_argument("retrieve: query " + std::to_string(q) + " has no relevant item");
  }
  for (int k : ks) {
    if (k < 1) throw std::invalid_argument("retrieve: K must be >= 1");
  }

  const Eigen::Index nq = queries.rows();
  const Eigen::Index nd = database.rows();
  std::vector<double> ap(static_cast<std::size_t>(nq));
  std::vector<Eigen::Index> first(static_cast<std::size_t>(nq));
  std::vector<std::vector<Eigen::Index>> hits_at(ks.size(), std::vector<Eigen::Index>(static_cast<std::size_t>(nq)));

  parallel_for(nq, [&](Eigen::Index q) {
    const auto order = rank_database(queries.row(q).transpose(), database, metric);
    std::vector<char> relevant(static_cast<std::size_t>(nd), 0);
    for (auto j : relevance[static_cast<std::size_t>(q)]) relevant[static_cast<std::size_t>(j)] = 1;

    double precision_sum = 0.0;
    Eigen::Index hits = 0;
    Eigen::Index first_rank = 0;
    std::vector<Eigen::Index> cumulative(static_cast<std::size_t>(nd));
    for (Eigen::Index r = 0; r < nd; ++r) {
      if (relevant[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])]) {
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        if (first_rank == 0) first_rank = r + 1;
      }
      cumulative[static_cast<std::size_t>(r)] = hits;
    }
    const auto uq = static_cast<std::size_t>(q);
    ap[uq] = precision_sum / static_cast<double>(hits);
    first[uq] = first_rank;
    for (std::size_t k = 0; k < ks.size(); ++k) {
      const Eigen::Index cut = std::min<Eigen::Index>(ks[k], nd);
      hits_at[k][uq] = cumulative[static_cast<std::size_t>(cut - 1)];
    }
  });

  RetrievalReport report;
  report.metric = metric;
  report.representation = representation;
  report.first_relevant_rank = first;
  report.mean_average_precision = std::accumulate(ap.begin(), ap.end(), 0.0) / static_cast<double>(nq);
  for (std::size_t k = 0; k < ks.size(); ++k) {
    const Eigen::Index cut = std::min<Eigen::Index>(ks[k], nd);
    double recall = 0.0, precision = 0.0;
    for (Eigen::Index q = 0; q < nq; ++q) {
      const auto h = hits_at[k][static_cast<std::size_t>(q)];
      recall += h > 0 ? 1.0 : 0.0;
      precision += static_cast<double>(h) / static_cast<double>(cut);
    }
    report.recall_at[ks[k]] = recall / static_cast<double>(nq);
    report.precision_at[ks[k]] = precision / static_cast<double>(nq);
  }
  return report;
}

AblationReports exclusive_ablation(const IIAEModel& model, const PairedDataset& test, Metric metric,
                                   const std::vector<int>& ks, GroundTruth ground_truth) {
  if (test.y.cols() == 0) throw StructuralError("exclusive_ablation: test set has no y domain");
  if (model.config.zx_dim != model.config.zy_dim) {
    throw StructuralError("exclusive_ablation: exclusive codes have different widths");
  }
  Relevance rel;
  if (ground_truth == GroundTruth::pair) {
    rel = pair_relevance(test.size());
  } else {
    if (!test.shared_class) throw std::invalid_argument("exclusive_ablation: class ground truth needs labels");
    rel = class_relevance(*test.shared_class, *test.shared_class);
  }
  AblationReports out;
  const Mat sx = embed(model, test.x, Domain::x, Representation::shared);
  const Mat sy = embed(model, test.y, Domain::y, Representation::shared);
  out.shared = retrieve(sx, sy, metric, rel, ks, Representation::shared);
  const Mat ex = embed(model, test.x, Domain::x, Representation::exclusive_x);
  const Mat ey = embed(model, test.y, Domain::y, Representation::exclusive_y);
  out.exclusive_x = retrieve(ex, ey, metric, rel, ks, Representation::exclusive_x);
  out.exclusive_y = retrieve(ey, ex, metric, rel, ks, Representation::exclusive_y);
  return out;
}

json to_json(const ProbeReport& r) {
  return json{{"target", r.target},
              {"representation", to_string(r.representation)},
              {"kind", r.kind == ProbeKind::classification ? "class" : "continuous"},
              {"score", r.score}};
}

namespace {

constexpr double kRidge = 1e-3;

struct Standardizer {
  Eigen::RowVectorXd mean, scale;

  explicit Standardizer(const Mat& m) {
    mean = m.colwise().mean();
    const Mat centered = m.rowwise() - mean;
    scale = (centered.array().square().colwise().sum() / static_cast<double>(std::max<Eigen::Index>(m.rows(), 1)))
                .sqrt()
                .matrix();
    for (Eigen::Index j = 0; j < scale.size(); ++j) {
      if (!(scale(j) > 1e-12)) scale(j) = 1.0;
    }
  }
  // Standardized features with a trailing bias column.
  Mat apply(const Mat& m) const {
    Mat out(m.rows(), m.cols() + 1);
    out.leftCols(m.cols()) = ((m.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    out.col(m.cols()).setOnes();
    return out;
  }
};

Mat softmax_rows(const Mat& logits) {
  Mat p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  return p.array().colwise() / p.rowwise().sum().array();
}

// Multinomial logistic regression by gradient descent; returns weights
// (features + bias) x classes.
Mat fit_softmax(const Mat& features, const std::vector<int>& labels, int classes) {
  const Eigen::Index n = features.rows();
  Mat onehot = Mat::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  Mat w = Mat::Zero(features.cols(), classes);
  // Adam on a smooth convex objective; a fixed iteration budget keeps the
  // probe deterministic.
  Mat m = Mat::Zero(w.rows(), w.cols()), v = Mat::Zero(w.rows(), w.cols());
  const double lr = 0.05, b1 = 0.9, b2 = 0.999;
  for (int it = 1; it <= 400; ++it) {
    const Mat p = softmax_rows(features * w);
    Mat g = features.transpose() * (p - onehot) / static_cast<double>(n) + kRidge * w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
    w -= (lr * (m / c1).array() / ((v / c2).array().sqrt() + 1e-8)).matrix();
  }
  return w;
}

Mat fit_ridge(const Mat& features, const Mat& targets) {
  Mat gram = features.transpose() * features;
  gram.diagonal().array() += kRidge * static_cast<double>(features.rows());
  return gram.ldlt().solve(features.transpose() * targets);
}

}  // namespace

ProbeReport probe(const Mat& embeddings, const Mat& targets, ProbeKind kind, std::uint64_t seed, int folds) {
  const Eigen::Index n = embeddings.rows();
  if (targets.rows() != n) throw StructuralError("probe: embeddings and targets have different row counts");
  if (folds < 2 || n < folds) throw std::invalid_argument("probe: need at least as many rows as folds (>= 2)");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < order.size(); ++i) fold_of[static_cast<std::size_t>(order[i])] = static_cast<int>(i % folds);

  ProbeReport report;
  report.kind = kind;

  std::vector<int> labels;
  int classes = 0;
  if (kind == ProbeKind::classification) {
    if (targets.cols() != 1) throw StructuralError("probe: class targets must be a single column");
    labels.resize(static_cast<std::size_t>(n));
    std::set<int> unique;
    for (Eigen::Index i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(targets(i, 0)));
      if (labels[static_cast<std::size_t>(i)] < 0) throw std::invalid_argument("probe: class labels must be >= 0");
      unique.insert(labels[static_cast<std::size_t>(i)]);
    }
    if (unique.size() < 2) throw std::invalid_argument("probe: class targets have a single class");
    classes = *unique.rbegin() + 1;
  }

  Mat predictions(n, targets.cols());
  std::vector<int> predicted_labels(static_cast<std::size_t>(n));
  for (int f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> train_rows, test_rows;
    for (Eigen::Index i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == f ? test_rows : train_rows).push_back(i);
    Mat tr(static_cast<Eigen::Index>(train_rows.size()), embeddings.cols());
    for (std::size_t i = 0; i < train_rows.size(); ++i) tr.row(static_cast<Eigen::Index>(i)) = embeddings.row(train_rows[i]);
    Mat te(static_cast<Eigen::Index>(test_rows.size()), embeddings.cols());
    for (std::size_t i = 0; i < test_rows.size(); ++i) te.row(static_cast<Eigen::Index>(i)) = embeddings.row(test_rows[i]);
    const Standardizer st(tr);
    const Mat ftr = st.apply(tr), fte = st.apply(te);

    if (kind == ProbeKind::classification) {
      std::vector<int> ytr;
      for (auto r : train_rows) ytr.push_back(labels[static_cast<std::size_t>(r)]);
      const Mat w = fit_softmax(ftr, ytr, classes);
      const Mat logits = fte * w;
      for (std::size_t i = 0; i < test_rows.size(); ++i) {
        Eigen::Index best;
        logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
        predicted_labels[static_cast<std::size_t>(test_rows[i])] = static_cast<int>(best);
      }
    } else {
      Mat ytr(static_cast<Eigen::Index>(train_rows.size()), targets.cols());
      for (std::size_t i = 0; i < train_rows.size(); ++i) ytr.row(static_cast<Eigen::Index>(i)) = targets.row(train_rows[i]);
      const Mat w = fit_ridge(ftr, ytr);
      const Mat pred = fte * w;
      for (std::size_t i = 0; i < test_rows.size(); ++i) predictions.row(test_rows[i]) = pred.row(static_cast<Eigen::Index>(i));
    }
  }

  if (kind == ProbeKind::classification) {
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      correct += predicted_labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
    }
    report.score = static_cast<double>(correct) / static_cast<double>(n);
  } else {
    double r2_sum = 0.0;
    for (Eigen::Index j = 0; j < targets.cols(); ++j) {
      const double mean = targets.col(j).mean();
      const double sst = (targets.col(j).array() - mean).square().sum();
      const double sse = (targets.col(j) - predictions.col(j)).squaredNorm();
      r2_sum += sst > 0.0 ? 1.0 - sse / sst : 0.0;
    }
    report.score = r2_sum / static_cast<double>(targets.cols());
  }
  return report;
}

TranslationResult translate_batch(const IIAEModel& model, const PairedDataset& dataset, const TranslateOptions& opts) {
  const bool to_y = opts.direction == Direction::x_to_y;
  const Mat& source = to_y ? dataset.x : dataset.y;
  const Mat& target = to_y ? dataset.y : dataset.x;
  const bool has_targets = target.cols() > 0 && target.rows() == source.rows();
  if (opts.guided && !has_targets) {
    throw std::invalid_argument("translate_batch: guided mode needs paired references from the target domain");
  }
  const Eigen::Index n = source.rows();
  const int excl_dim = to_y ? model.config.zy_dim : model.config.zx_dim;

  const Mat shared = to_y ? encode_rx(model, source).mean : encode_ry(model, source).mean;
  Mat exclusive;
  if (opts.guided) {
    exclusive = to_y ? encode_qy(model, target).mean : encode_qx(model, target).mean;
  } else {
    std::mt19937_64 rng(opts.noise_seed);
    std::normal_distribution<double> n01;
    exclusive.resize(n, excl_dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < excl_dim; ++j) exclusive(i, j) = n01(rng);
    }
  }

  TranslationResult result;
  result.outputs = to_y ? decode_y(model, exclusive, shared) : decode_x(model, exclusive, shared);
  if (has_targets) result.mse = (result.outputs - target).squaredNorm() / static_cast<double>(target.size());

  if (opts.out_path) {
    PairedDataset out;
    out.x = result.outputs.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
    out.y = Mat(n, 0);
    out.split = dataset.split;
    out.provenance = json{{"generator", "translate"},
                          {"direction", to_y ? "x2y" : "y2x"},
                          {"mode", opts.guided ? "guided" : "prior"},
                          {"noise_seed", opts.noise_seed},
                          {"invocation", opts.invocation}};
    if (result.mse) out.provenance["mse"] = *result.mse;
    save_dataset(out, *opts.out_path);
  }
  return result;
}

}  // namespace iiae

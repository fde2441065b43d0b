#pragma once

// Paired two-domain datasets: synthetic generation with ground-truth
// factors, the IIPD binary format, class-based pairing and splits.

#include "iiae/diffmath.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace iiae {

struct PairedDataset {
  Mat x;  // n x x_dim
  Mat y;  // n x y_dim (zero columns for a single-domain file)
  std::optional<std::vector<int>> shared_class;
  std::optional<Mat> excl_x;
  std::optional<Mat> excl_y;
  std::string split = "all";
  nlohmann::json provenance = nlohmann::json::object();

  Eigen::Index size() const { return x.rows(); }
  /// Row counts agree and values are finite.
  void validate() const;
  PairedDataset subset(const std::vector<Eigen::Index>& rows) const;
};

struct GenSpec {
  std::int64_t n = 8192;
  int classes = 8;
  int excl_dim_x = 2;
  int excl_dim_y = 2;
  int x_dim = 16;
  int y_dim = 16;
  int embed_dim = 4;     // class codebook width
  int hidden_width = 32;
  int depth = 2;         // dense tanh layers of the ground-truth generator
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const GenSpec& s);

/// The frozen ground-truth maps and class codebook of one generator seed.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const GenSpec& spec);

  /// Noise-free domain outputs for a class and an exclusive draw.
  Vec render_x(int cls, const Vec& excl) const;
  Vec render_y(int cls, const Vec& excl) const;
  const Mat& codebook() const { return codebook_; }

 private:
  GenSpec spec_;
  Mat codebook_;
  std::vector<DenseLayer> gx_, gy_;
};

/// x = tanh(Gx([codebook[s]; e_x])) + noise, likewise y, clipped to [-1, 1]
/// and rounded to float32. Gx, Gy and the codebook depend on the seed only;
/// `sample_seed` (defaulting to the seed) drives the per-row draws, so two
/// calls with one seed and different sample seeds give a class-matched
/// train/test pair.
PairedDataset gen_synthetic(const GenSpec& spec, std::optional<std::uint64_t> sample_seed = std::nullopt);

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "IIPD" magic, version byte, one JSON header line, then float32 LE
/// row-major blocks in the header's block order.
void save_dataset(const PairedDataset& ds, const std::filesystem::path& path);
PairedDataset load_dataset(const std::filesystem::path& path);

struct PairingResult {
  PairedDataset pairs;
  std::size_t skipped_classes = 0;  // classes present in only one domain
};

/// For each of `rounds`, draws one item per common class from each domain.
PairingResult pair_by_class(const Mat& features_x, const std::vector<int>& labels_x, const Mat& features_y,
                            const std::vector<int>& labels_y, std::size_t rounds, std::uint64_t seed);

enum class SplitMode { rows, class_disjoint };

struct SplitResult {
  PairedDataset train;
  PairedDataset test;
};

/// `train_fraction` of rows (or of classes, in class-disjoint mode) goes to
/// train; deterministic per seed.
SplitResult split(const PairedDataset& ds, double train_fraction, std::uint64_t seed,
                  SplitMode mode = SplitMode::rows);

}  // namespace iiae

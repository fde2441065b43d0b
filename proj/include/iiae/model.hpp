#pragma once

// The two-domain auto-encoder: per-domain feature extractors, five Gaussian
// posterior heads and two tanh decoders, plus checkpoint IO.

#include "iiae/diffmath.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace iiae {

/// Layer widths and latent sizes. Hidden lists exclude the input and the
/// 2 x latent head output.
struct ModelConfig {
  int x_dim = 512;
  int y_dim = 512;
  int zx_dim = 64;
  int zs_dim = 64;
  int zy_dim = 64;
  int fe_width = 512;
  std::vector<int> excl_hidden{512, 256};
  std::vector<int> single_shared_hidden{256};
  std::vector<int> joint_shared_hidden{512};
  std::vector<int> dec_hidden{128};

  /// Fully-connected sketch/photo retrieval configuration on 512-d features.
  static ModelConfig retrieval_default() { return {}; }
  /// Desk-scale configuration used for synthetic data.
  static ModelConfig synthetic_default(int x_dim, int y_dim);

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct IIAEModel {
  ModelConfig config;
  DenseNet fe_x, fe_y;
  DenseNet head_qx, head_qy;
  DenseNet head_rx, head_ry;
  DenseNet head_qs;
  DenseNet dec_x, dec_y;

  /// All-zero parameters with the architecture of `config`.
  static IIAEModel zeros(const ModelConfig& config);
  /// Glorot-uniform weights, zero biases.
  static IIAEModel initialized(const ModelConfig& config, std::uint64_t seed);

  std::size_t parameter_count() const;

  /// Named parameter tensors in a fixed order shared by every model with the
  /// same config.
  struct TensorRef {
    std::string name;
    std::vector<std::int64_t> shape;
    std::span<double> data;
  };
  std::vector<TensorRef> tensors();
  std::vector<std::pair<std::string, std::span<const double>>> tensors() const;
  std::vector<std::pair<std::string, const DenseNet*>> networks() const;
  std::vector<std::pair<std::string, DenseNet*>> networks();

  /// Copies every parameter into / out of a flat vector in tensors() order.
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  /// Rounds all parameters to the nearest 32-bit float.
  void round_to_float32();
};

struct EncoderNoise {
  Vec zx, zs, zy;
};

struct EncodedPair {
  GaussianParams qx, qy, qs, rx, ry;
  Vec z_x, z_s, z_y;
  EncoderNoise noise;
};

EncodedPair encode_pair(const IIAEModel& model, const Vec& x, const Vec& y, const EncoderNoise& noise);

/// Number of feature-extractor evaluations on the calling thread.
std::size_t feature_extractor_evaluations();

/// Decoder means. Output components lie in (-1, 1).
Vec decode_x(const IIAEModel& model, const Vec& z_x, const Vec& z_s);
Vec decode_y(const IIAEModel& model, const Vec& z_y, const Vec& z_s);

// Batched single-view encoders used by retrieval and translation.
GaussianBatch encode_qx(const IIAEModel& model, const Mat& x);
GaussianBatch encode_qy(const IIAEModel& model, const Mat& y);
GaussianBatch encode_rx(const IIAEModel& model, const Mat& x);
GaussianBatch encode_ry(const IIAEModel& model, const Mat& y);
Mat decode_x(const IIAEModel& model, const Mat& z_x, const Mat& z_s);
Mat decode_y(const IIAEModel& model, const Mat& z_y, const Mat& z_s);

enum class Direction { x_to_y, y_to_x };

struct PriorSample {
  Vec noise;  // standard-normal draw for the target exclusive code
};
struct Guided {
  Vec reference;  // an item of the target domain
};
using TranslationMode = std::variant<PriorSample, Guided>;

/// Shared code = mean of the source single-view encoder; exclusive code from
/// the prior sample or the reference posterior mean; output = decoder mean.
Vec translate(const IIAEModel& model, const Vec& source, Direction direction, const TranslationMode& mode);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LoadedCheckpoint {
  IIAEModel model;
  nlohmann::json config;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

/// JSON manifest line followed by a little-endian float32 parameter blob.
/// Written to a temporary file and renamed into place.
void save_checkpoint(const IIAEModel& model, const nlohmann::json& config, std::int64_t step,
                     std::uint64_t seed, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace iiae

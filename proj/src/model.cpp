#include "iiae/model.hpp"

#include "iiae/file_util.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace iiae {

using nlohmann::json;

ModelConfig ModelConfig::synthetic_default(int x_dim, int y_dim) {
  ModelConfig c;
  c.x_dim = x_dim;
  c.y_dim = y_dim;
  c.zx_dim = 4;
  c.zs_dim = 8;
  c.zy_dim = 4;
  c.fe_width = 64;
  c.excl_hidden = {64};
  c.single_shared_hidden = {64};
  c.joint_shared_hidden = {64};
  c.dec_hidden = {64};
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw StructuralError(std::string("model config: ") + what + " must be >= 1");
  };
  positive(x_dim, "x_dim");
  positive(y_dim, "y_dim");
  positive(zx_dim, "zx_dim");
  positive(zs_dim, "zs_dim");
  positive(zy_dim, "zy_dim");
  positive(fe_width, "fe_width");
  for (const auto* list : {&excl_hidden, &single_shared_hidden, &joint_shared_hidden, &dec_hidden}) {
    for (int w : *list) positive(w, "hidden width");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"x_dim", c.x_dim},
           {"y_dim", c.y_dim},
           {"zx_dim", c.zx_dim},
           {"zs_dim", c.zs_dim},
           {"zy_dim", c.zy_dim},
           {"fe_width", c.fe_width},
           {"excl_hidden", c.excl_hidden},
           {"single_shared_hidden", c.single_shared_hidden},
           {"joint_shared_hidden", c.joint_shared_hidden},
           {"dec_hidden", c.dec_hidden}};
}

void from_json(const json& j, ModelConfig& c) {
  j.at("x_dim").get_to(c.x_dim);
  j.at("y_dim").get_to(c.y_dim);
  j.at("zx_dim").get_to(c.zx_dim);
  j.at("zs_dim").get_to(c.zs_dim);
  j.at("zy_dim").get_to(c.zy_dim);
  j.at("fe_width").get_to(c.fe_width);
  j.at("excl_hidden").get_to(c.excl_hidden);
  j.at("single_shared_hidden").get_to(c.single_shared_hidden);
  j.at("joint_shared_hidden").get_to(c.joint_shared_hidden);
  j.at("dec_hidden").get_to(c.dec_hidden);
}

namespace {

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

thread_local std::size_t g_fe_evaluations = 0;

Mat feature(const DenseNet& fe, const Mat& input) {
  ++g_fe_evaluations;
  return fe.forward(input);
}

Mat concat_cols(const Mat& a, const Mat& b) {
  Mat out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

void check_cols(const Mat& m, int expected, const char* what) {
  if (m.cols() != expected) {
    throw StructuralError(std::string(what) + ": width " + std::to_string(m.cols()) + ", expected " +
                          std::to_string(expected));
  }
}

}  // namespace

IIAEModel IIAEModel::zeros(const ModelConfig& c) {
  c.validate();
  const auto L = Activation::leaky_relu;
  IIAEModel m;
  m.config = c;
  m.fe_x = DenseNet::zeros(std::vector<int>{c.x_dim, c.fe_width}, L, L);
  m.fe_y = DenseNet::zeros(std::vector<int>{c.y_dim, c.fe_width}, L, L);
  m.head_qx = DenseNet::zeros(widths(c.x_dim, c.excl_hidden, 2 * c.zx_dim), L, Activation::identity);
  m.head_qy = DenseNet::zeros(widths(c.y_dim, c.excl_hidden, 2 * c.zy_dim), L, Activation::identity);
  m.head_rx = DenseNet::zeros(widths(c.fe_width, c.single_shared_hidden, 2 * c.zs_dim), L, Activation::identity);
  m.head_ry = DenseNet::zeros(widths(c.fe_width, c.single_shared_hidden, 2 * c.zs_dim), L, Activation::identity);
  m.head_qs = DenseNet::zeros(widths(2 * c.fe_width, c.joint_shared_hidden, 2 * c.zs_dim), L, Activation::identity);
  m.dec_x = DenseNet::zeros(widths(c.zx_dim + c.zs_dim, c.dec_hidden, c.x_dim), L, Activation::tanh);
  m.dec_y = DenseNet::zeros(widths(c.zy_dim + c.zs_dim, c.dec_hidden, c.y_dim), L, Activation::tanh);
  return m;
}

IIAEModel IIAEModel::initialized(const ModelConfig& config, std::uint64_t seed) {
  IIAEModel m = zeros(config);
  std::mt19937_64 rng(seed);
  for (auto& [name, net] : m.networks()) {
    for (auto& layer : net->layers()) {
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = u(rng);
      }
    }
  }
  return m;
}

std::vector<std::pair<std::string, const DenseNet*>> IIAEModel::networks() const {
  return {{"fe_x", &fe_x},     {"fe_y", &fe_y},       {"head_qx", &head_qx},
          {"head_qy", &head_qy}, {"head_rx", &head_rx}, {"head_ry", &head_ry},
          {"head_qs", &head_qs}, {"dec_x", &dec_x},     {"dec_y", &dec_y}};
}

std::vector<std::pair<std::string, DenseNet*>> IIAEModel::networks() {
  return {{"fe_x", &fe_x},     {"fe_y", &fe_y},       {"head_qx", &head_qx},
          {"head_qy", &head_qy}, {"head_rx", &head_rx}, {"head_ry", &head_ry},
          {"head_qs", &head_qs}, {"dec_x", &dec_x},     {"dec_y", &dec_y}};
}

std::size_t IIAEModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, net] : networks()) n += net->parameter_count();
  return n;
}

std::vector<IIAEModel::TensorRef> IIAEModel::tensors() {
  std::vector<TensorRef> out;
  for (auto& [name, net] : networks()) {
    for (std::size_t i = 0; i < net->layers().size(); ++i) {
      auto& l = net->layers()[i];
      const std::string prefix = name + "." + std::to_string(i);
      // Column-major in x out storage is row-major out x in.
      out.push_back({prefix + ".weight", {l.out_dim(), l.in_dim()},
                     std::span<double>(l.weight.data(), static_cast<std::size_t>(l.weight.size()))});
      out.push_back({prefix + ".bias", {l.out_dim()},
                     std::span<double>(l.bias.data(), static_cast<std::size_t>(l.bias.size()))});
    }
  }
  return out;
}

std::vector<std::pair<std::string, std::span<const double>>> IIAEModel::tensors() const {
  std::vector<std::pair<std::string, std::span<const double>>> out;
  for (auto& t : const_cast<IIAEModel*>(this)->tensors()) out.emplace_back(t.name, t.data);
  return out;
}

std::vector<double> IIAEModel::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& [name, data] : tensors()) flat.insert(flat.end(), data.begin(), data.end());
  return flat;
}

void IIAEModel::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw StructuralError("unflatten: expected " + std::to_string(parameter_count()) + " values, got " +
                          std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (auto& t : tensors()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(k), t.data.size(), t.data.begin());
    k += t.data.size();
  }
}

void IIAEModel::round_to_float32() {
  for (auto& t : tensors()) {
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
  }
}

std::size_t feature_extractor_evaluations() { return g_fe_evaluations; }

EncodedPair encode_pair(const IIAEModel& model, const Vec& x, const Vec& y, const EncoderNoise& noise) {
  const auto& c = model.config;
  if (x.size() != c.x_dim || y.size() != c.y_dim) {
    throw StructuralError("encode_pair: input dimensions do not match the model");
  }
  if (noise.zx.size() != c.zx_dim || noise.zs.size() != c.zs_dim || noise.zy.size() != c.zy_dim) {
    throw StructuralError("encode_pair: noise dimensions do not match the latent sizes");
  }
  const Mat xr = x.transpose();
  const Mat yr = y.transpose();
  const Mat hx = feature(model.fe_x, xr);
  const Mat hy = feature(model.fe_y, yr);

  EncodedPair e;
  e.qx = split_gaussian_head(model.head_qx.forward(xr)).row(0);
  e.qy = split_gaussian_head(model.head_qy.forward(yr)).row(0);
  e.rx = split_gaussian_head(model.head_rx.forward(hx)).row(0);
  e.ry = split_gaussian_head(model.head_ry.forward(hy)).row(0);
  e.qs = split_gaussian_head(model.head_qs.forward(concat_cols(hx, hy))).row(0);
  e.noise = noise;
  e.z_x = reparameterize(e.qx, noise.zx);
  e.z_s = reparameterize(e.qs, noise.zs);
  e.z_y = reparameterize(e.qy, noise.zy);
  return e;
}

GaussianBatch encode_qx(const IIAEModel& model, const Mat& x) {
  check_cols(x, model.config.x_dim, "encode_qx");
  return split_gaussian_head(model.head_qx.forward(x));
}

GaussianBatch encode_qy(const IIAEModel& model, const Mat& y) {
  check_cols(y, model.config.y_dim, "encode_qy");
  return split_gaussian_head(model.head_qy.forward(y));
}

GaussianBatch encode_rx(const IIAEModel& model, const Mat& x) {
  check_cols(x, model.config.x_dim, "encode_rx");
  return split_gaussian_head(model.head_rx.forward(feature(model.fe_x, x)));
}

GaussianBatch encode_ry(const IIAEModel& model, const Mat& y) {
  check_cols(y, model.config.y_dim, "encode_ry");
  return split_gaussian_head(model.head_ry.forward(feature(model.fe_y, y)));
}

Mat decode_x(const IIAEModel& model, const Mat& z_x, const Mat& z_s) {
  check_cols(z_x, model.config.zx_dim, "decode_x (exclusive code)");
  check_cols(z_s, model.config.zs_dim, "decode_x (shared code)");
  return model.dec_x.forward(concat_cols(z_x, z_s));
}

Mat decode_y(const IIAEModel& model, const Mat& z_y, const Mat& z_s) {
  check_cols(z_y, model.config.zy_dim, "decode_y (exclusive code)");
  check_cols(z_s, model.config.zs_dim, "decode_y (shared code)");
  return model.dec_y.forward(concat_cols(z_y, z_s));
}

Vec decode_x(const IIAEModel& model, const Vec& z_x, const Vec& z_s) {
  return decode_x(model, Mat(z_x.transpose()), Mat(z_s.transpose())).row(0).transpose();
}

Vec decode_y(const IIAEModel& model, const Vec& z_y, const Vec& z_s) {
  return decode_y(model, Mat(z_y.transpose()), Mat(z_s.transpose())).row(0).transpose();
}

Vec translate(const IIAEModel& model, const Vec& source, Direction direction, const TranslationMode& mode) {
  const bool to_y = direction == Direction::x_to_y;
  const Mat src = source.transpose();
  const Mat shared = to_y ? encode_rx(model, src).mean : encode_ry(model, src).mean;
  const int excl_dim = to_y ? model.config.zy_dim : model.config.zx_dim;

  Mat exclusive;
  if (const auto* prior = std::get_if<PriorSample>(&mode)) {
    if (prior->noise.size() != excl_dim) {
      throw StructuralError("translate: prior noise length does not match the exclusive code");
    }
    exclusive = prior->noise.transpose();
  } else {
    const auto& guided = std::get<Guided>(mode);
    if (guided.reference.size() == 0) {
      throw StructuralError("translate: guided mode requires a reference from the target domain");
    }
    const Mat ref = guided.reference.transpose();
    exclusive = to_y ? encode_qy(model, ref).mean : encode_qx(model, ref).mean;
  }
  const Mat out = to_y ? decode_y(model, exclusive, shared) : decode_x(model, exclusive, shared);
  return out.row(0).transpose();
}

// Checkpoints

void save_checkpoint(const IIAEModel& model, const json& config, std::int64_t step, std::uint64_t seed,
                     const std::filesystem::path& path) {
  IIAEModel m = model;
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& t : m.tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset_bytes", offset}, {"len_floats", t.data.size()}});
    offset += t.data.size() * 4;
  }
  json manifest{{"format", "iiae-checkpoint"},
                {"version", 1},
                {"model", model.config},
                {"config", config},
                {"step", step},
                {"seed", seed},
                {"blob_bytes", offset},
                {"tensors", tensors}};
  write_atomically(path, [&](std::ostream& out) {
    out << manifest.dump() << '\n';
    for (const auto& t : m.tensors()) write_f32_le(out, t.data);
  });
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError("checkpoint has no manifest line");

  json manifest;
  try {
    manifest = json::parse(line);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  }

  LoadedCheckpoint out;
  try {
    if (manifest.at("format") != "iiae-checkpoint") throw CheckpointError("not an iiae checkpoint");
    out.model = IIAEModel::zeros(manifest.at("model").get<ModelConfig>());
    out.config = manifest.value("config", json::object());
    out.step = manifest.at("step").get<std::int64_t>();
    out.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  } catch (const StructuralError& e) {
    throw CheckpointError(std::string("invalid model config in checkpoint: ") + e.what());
  }

  const auto& entries = manifest.at("tensors");
  auto tensors = out.model.tensors();
  if (!entries.is_array() || entries.size() != tensors.size()) {
    throw CheckpointError("checkpoint lists " + std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(tensors.size()));
  }
  // Validate the whole manifest before touching the blob.
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& e = entries[i];
    const auto& t = tensors[i];
    const auto name = e.at("name").get<std::string>();
    if (name != t.name) throw CheckpointError("tensor " + std::to_string(i) + " is '" + name + "', expected '" + t.name + "'");
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    if (shape != t.shape) throw CheckpointError("shape mismatch for tensor '" + name + "' against the model config");
    if (e.at("len_floats").get<std::size_t>() != t.data.size()) {
      throw CheckpointError("length mismatch for tensor '" + name + "'");
    }
    if (e.at("offset_bytes").get<std::size_t>() != expected_offset) {
      throw CheckpointError("offset of tensor '" + name + "' overlaps or leaves a gap");
    }
    expected_offset += t.data.size() * 4;
  }

  std::vector<double> buf;
  for (auto& t : tensors) {
    if (!read_f32_le(in, t.data.size(), buf)) {
      throw CheckpointError("checkpoint blob truncated inside tensor '" + t.name + "'");
    }
    std::copy(buf.begin(), buf.end(), t.data.begin());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("checkpoint blob has trailing bytes");
  }
  return out;
}

}  // namespace iiae

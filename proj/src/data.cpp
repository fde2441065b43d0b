#include "iiae/data.hpp"

#include "iiae/file_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace iiae {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'I', 'I', 'P', 'D'};
constexpr std::uint8_t kVersion = 1;

void check_rows(Eigen::Index rows, Eigen::Index n, const char* what) {
  if (rows != n) {
    throw StructuralError(std::string("dataset: ") + what + " has " + std::to_string(rows) + " rows, expected " +
                          std::to_string(n));
  }
}

Mat take_rows(const Mat& m, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// One random dense tanh stack; weights scaled by 1/sqrt(fan_in).
std::vector<DenseLayer> make_generator(std::mt19937_64& rng, int in, int hidden, int out, int depth) {
  std::normal_distribution<double> n01;
  std::vector<DenseLayer> g;
  int width = in;
  for (int d = 0; d < depth; ++d) {
    const int next = (d + 1 == depth) ? out : hidden;
    DenseLayer l;
    l.weight = Mat(width, next);
    l.bias = Vec(next);
    const double scale = 1.5 / std::sqrt(static_cast<double>(width));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = scale * n01(rng);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = 0.1 * n01(rng);
    l.activation = Activation::tanh;
    g.push_back(std::move(l));
    width = next;
  }
  return g;
}

Vec run_generator(const std::vector<DenseLayer>& layers, const Vec& in) {
  Vec h = in;
  for (const auto& l : layers) h = ((l.weight.transpose() * h) + l.bias).array().tanh().matrix();
  return h;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

void PairedDataset::validate() const {
  const Eigen::Index n = x.rows();
  check_rows(y.rows(), n, "y");
  if (shared_class) check_rows(static_cast<Eigen::Index>(shared_class->size()), n, "shared_class");
  if (excl_x) check_rows(excl_x->rows(), n, "excl_x");
  if (excl_y) check_rows(excl_y->rows(), n, "excl_y");
  if (!x.allFinite() || !y.allFinite()) throw NumericalError("dataset: non-finite values");
}

PairedDataset PairedDataset::subset(const std::vector<Eigen::Index>& rows) const {
  PairedDataset out;
  out.x = take_rows(x, rows);
  out.y = take_rows(y, rows);
  if (shared_class) {
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (auto r : rows) labels.push_back((*shared_class)[static_cast<std::size_t>(r)]);
    out.shared_class = std::move(labels);
  }
  if (excl_x) out.excl_x = take_rows(*excl_x, rows);
  if (excl_y) out.excl_y = take_rows(*excl_y, rows);
  out.split = split;
  out.provenance = provenance;
  return out;
}

void GenSpec::validate() const {
  if (n < 1) throw std::invalid_argument("GenSpec: n must be >= 1");
  if (classes < 2) throw std::invalid_argument("GenSpec: at least 2 shared classes are required");
  if (excl_dim_x < 1 || excl_dim_y < 1 || x_dim < 1 || y_dim < 1 || embed_dim < 1 || hidden_width < 1) {
    throw std::invalid_argument("GenSpec: dimensions must be >= 1");
  }
  if (depth < 1) throw std::invalid_argument("GenSpec: depth must be >= 1");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("GenSpec: noise_std must be >= 0");
}

json to_json(const GenSpec& s) {
  return json{{"n", s.n},
              {"classes", s.classes},
              {"excl_dim_x", s.excl_dim_x},
              {"excl_dim_y", s.excl_dim_y},
              {"x_dim", s.x_dim},
              {"y_dim", s.y_dim},
              {"embed_dim", s.embed_dim},
              {"hidden_width", s.hidden_width},
              {"depth", s.depth},
              {"noise_std", s.noise_std},
              {"seed", s.seed}};
}

SyntheticWorld::SyntheticWorld(const GenSpec& spec) : spec_(spec) {
  spec.validate();
  std::mt19937_64 structure_rng(spec.seed);
  std::normal_distribution<double> n01;
  codebook_.resize(spec.classes, spec.embed_dim);
  for (Eigen::Index i = 0; i < codebook_.size(); ++i) codebook_.data()[i] = n01(structure_rng);
  gx_ = make_generator(structure_rng, spec.embed_dim + spec.excl_dim_x, spec.hidden_width, spec.x_dim, spec.depth);
  gy_ = make_generator(structure_rng, spec.embed_dim + spec.excl_dim_y, spec.hidden_width, spec.y_dim, spec.depth);
}

namespace {

Vec render(const Mat& codebook, const std::vector<DenseLayer>& g, int cls, const Vec& excl, int excl_dim) {
  if (cls < 0 || cls >= codebook.rows()) throw std::invalid_argument("SyntheticWorld: class out of range");
  if (excl.size() != excl_dim) throw StructuralError("SyntheticWorld: exclusive factor width mismatch");
  Vec in(codebook.cols() + excl_dim);
  in << codebook.row(cls).transpose(), excl;
  return run_generator(g, in);
}

}  // namespace

Vec SyntheticWorld::render_x(int cls, const Vec& excl) const {
  return render(codebook_, gx_, cls, excl, spec_.excl_dim_x);
}

Vec SyntheticWorld::render_y(int cls, const Vec& excl) const {
  return render(codebook_, gy_, cls, excl, spec_.excl_dim_y);
}

PairedDataset gen_synthetic(const GenSpec& spec, std::optional<std::uint64_t> sample_seed) {
  const SyntheticWorld world(spec);
  std::normal_distribution<double> n01;

  const std::uint64_t row_seed = sample_seed.value_or(spec.seed);
  std::mt19937_64 rng(row_seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> pick_class(0, spec.classes - 1);

  const auto n = static_cast<Eigen::Index>(spec.n);
  PairedDataset ds;
  ds.x.resize(n, spec.x_dim);
  ds.y.resize(n, spec.y_dim);
  ds.excl_x = Mat(n, spec.excl_dim_x);
  ds.excl_y = Mat(n, spec.excl_dim_y);
  std::vector<int> labels(static_cast<std::size_t>(n));

  for (Eigen::Index i = 0; i < n; ++i) {
    const int s = pick_class(rng);
    labels[static_cast<std::size_t>(i)] = s;
    for (int k = 0; k < spec.excl_dim_x; ++k) (*ds.excl_x)(i, k) = to_f32(n01(rng));
    for (int k = 0; k < spec.excl_dim_y; ++k) (*ds.excl_y)(i, k) = to_f32(n01(rng));
    const Vec xv = world.render_x(s, ds.excl_x->row(i).transpose());
    const Vec yv = world.render_y(s, ds.excl_y->row(i).transpose());
    for (int k = 0; k < spec.x_dim; ++k) {
      const double noise = spec.noise_std > 0.0 ? spec.noise_std * n01(rng) : 0.0;
      ds.x(i, k) = to_f32(std::clamp(xv(k) + noise, -1.0, 1.0));
    }
    for (int k = 0; k < spec.y_dim; ++k) {
      const double noise = spec.noise_std > 0.0 ? spec.noise_std * n01(rng) : 0.0;
      ds.y(i, k) = to_f32(std::clamp(yv(k) + noise, -1.0, 1.0));
    }
  }
  ds.shared_class = std::move(labels);
  ds.provenance = json{{"generator", "gen_synthetic"}, {"spec", to_json(spec)}, {"sample_seed", row_seed}};
  return ds;
}

// IIPD format

void save_dataset(const PairedDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  const Eigen::Index n = ds.size();
  json blocks = json::array();
  blocks.push_back({{"name", "x"}, {"cols", ds.x.cols()}});
  if (ds.y.cols() > 0) blocks.push_back({{"name", "y"}, {"cols", ds.y.cols()}});
  if (ds.shared_class) blocks.push_back({{"name", "shared_class"}, {"cols", 1}});
  if (ds.excl_x) blocks.push_back({{"name", "excl_x"}, {"cols", ds.excl_x->cols()}});
  if (ds.excl_y) blocks.push_back({{"name", "excl_y"}, {"cols", ds.excl_y->cols()}});
  const json header{{"n", n},
                    {"x_dim", ds.x.cols()},
                    {"y_dim", ds.y.cols()},
                    {"blocks", blocks},
                    {"split", ds.split},
                    {"provenance", ds.provenance}};

  auto write_matrix = [](std::ostream& out, const Mat& m) {
    std::vector<double> row_major(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) row_major[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    }
    write_f32_le(out, row_major);
  };

  write_atomically(path, [&](std::ostream& out) {
    out.write(kMagic, 4);
    out.put(static_cast<char>(kVersion));
    out << header.dump() << '\n';
    write_matrix(out, ds.x);
    if (ds.y.cols() > 0) write_matrix(out, ds.y);
    if (ds.shared_class) {
      std::vector<double> labels(ds.shared_class->begin(), ds.shared_class->end());
      write_f32_le(out, labels);
    }
    if (ds.excl_x) write_matrix(out, *ds.excl_x);
    if (ds.excl_y) write_matrix(out, *ds.excl_y);
  });
}

PairedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetFormatError("cannot open dataset '" + path.string() + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, kMagic)) {
    throw DatasetFormatError("'" + path.string() + "' is not an IIPD file (magic mismatch)");
  }
  const int version = in.get();
  if (version != kVersion) throw DatasetFormatError("unsupported IIPD version " + std::to_string(version));
  std::string line;
  if (!std::getline(in, line)) throw DatasetFormatError("IIPD header line missing");

  json header;
  std::int64_t n = 0;
  std::vector<std::pair<std::string, std::int64_t>> blocks;
  PairedDataset ds;
  try {
    header = json::parse(line);
    n = header.at("n").get<std::int64_t>();
    for (const auto& b : header.at("blocks")) blocks.emplace_back(b.at("name").get<std::string>(), b.at("cols").get<std::int64_t>());
    ds.split = header.value("split", "all");
    ds.provenance = header.value("provenance", json::object());
  } catch (const json::exception& e) {
    throw DatasetFormatError(std::string("corrupt IIPD header: ") + e.what());
  }
  if (n < 0) throw DatasetFormatError("IIPD header: negative row count");
  if (blocks.empty() || blocks.front().first != "x") throw DatasetFormatError("IIPD header: first block must be 'x'");

  std::uint64_t expected_floats = 0;
  for (const auto& [name, cols] : blocks) {
    if (cols < 0 || (name == "shared_class" && cols != 1)) {
      throw DatasetFormatError("IIPD header: bad width for block '" + name + "'");
    }
    expected_floats += static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(cols);
  }
  const auto payload_start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto payload_bytes = static_cast<std::uint64_t>(in.tellg() - payload_start);
  in.seekg(payload_start);
  if (payload_bytes != expected_floats * 4) {
    throw DatasetFormatError("IIPD length inconsistency: header declares " + std::to_string(expected_floats * 4) +
                             " payload bytes, file holds " + std::to_string(payload_bytes));
  }

  auto read_matrix = [&](Eigen::Index cols) {
    std::vector<double> buf;
    if (!read_f32_le(in, static_cast<std::size_t>(n * cols), buf)) throw DatasetFormatError("IIPD payload truncated");
    Mat m(n, cols);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = buf[static_cast<std::size_t>(i * cols + j)];
    }
    return m;
  };

  ds.y = Mat(n, 0);
  for (const auto& [name, cols] : blocks) {
    Mat m = read_matrix(cols);
    if (name == "x") {
      ds.x = std::move(m);
    } else if (name == "y") {
      ds.y = std::move(m);
    } else if (name == "shared_class") {
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(m(i, 0));
      ds.shared_class = std::move(labels);
    } else if (name == "excl_x") {
      ds.excl_x = std::move(m);
    } else if (name == "excl_y") {
      ds.excl_y = std::move(m);
    } else {
      throw DatasetFormatError("IIPD: unknown block '" + name + "'");
    }
  }
  ds.validate();
  return ds;
}

PairingResult pair_by_class(const Mat& features_x, const std::vector<int>& labels_x, const Mat& features_y,
                            const std::vector<int>& labels_y, std::size_t rounds, std::uint64_t seed) {
  if (static_cast<Eigen::Index>(labels_x.size()) != features_x.rows() ||
      static_cast<Eigen::Index>(labels_y.size()) != features_y.rows()) {
    throw StructuralError("pair_by_class: label and feature row counts differ");
  }
  std::map<int, std::vector<Eigen::Index>> by_class_x, by_class_y;
  for (std::size_t i = 0; i < labels_x.size(); ++i) by_class_x[labels_x[i]].push_back(static_cast<Eigen::Index>(i));
  for (std::size_t i = 0; i < labels_y.size(); ++i) by_class_y[labels_y[i]].push_back(static_cast<Eigen::Index>(i));

  std::vector<int> common;
  std::set<int> all;
  for (const auto& [c, rows] : by_class_x) {
    all.insert(c);
    if (by_class_y.count(c)) common.push_back(c);
  }
  for (const auto& [c, rows] : by_class_y) all.insert(c);
  if (common.empty()) throw std::invalid_argument("pair_by_class: the two domains share no class");

  std::mt19937_64 rng(seed);
  const auto total = static_cast<Eigen::Index>(rounds * common.size());
  PairingResult result;
  result.skipped_classes = all.size() - common.size();
  auto& ds = result.pairs;
  ds.x.resize(total, features_x.cols());
  ds.y.resize(total, features_y.cols());
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(total));
  Eigen::Index row = 0;
  for (std::size_t r = 0; r < rounds; ++r) {
    for (int c : common) {
      const auto& xs = by_class_x[c];
      const auto& ys = by_class_y[c];
      std::uniform_int_distribution<std::size_t> px(0, xs.size() - 1), py(0, ys.size() - 1);
      ds.x.row(row) = features_x.row(xs[px(rng)]);
      ds.y.row(row) = features_y.row(ys[py(rng)]);
      labels.push_back(c);
      ++row;
    }
  }
  ds.shared_class = std::move(labels);
  ds.provenance = json{{"generator", "pair_by_class"}, {"rounds", rounds}, {"seed", seed},
                       {"skipped_classes", result.skipped_classes}};
  return result;
}

SplitResult split(const PairedDataset& ds, double train_fraction, std::uint64_t seed, SplitMode mode) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train fraction must lie strictly between 0 and 1");
  }
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> train_rows, test_rows;
  if (mode == SplitMode::rows) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(ds.size()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ds.size())));
    if (n_train == 0 || n_train == order.size()) throw std::invalid_argument("split: a split would receive no rows");
    train_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
  } else {
    if (!ds.shared_class) throw std::invalid_argument("split: class-disjoint mode needs shared_class labels");
    std::set<int> unique(ds.shared_class->begin(), ds.shared_class->end());
    std::vector<int> classes(unique.begin(), unique.end());
    std::shuffle(classes.begin(), classes.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(classes.size())));
    if (n_train == 0 || n_train == classes.size()) {
      throw std::invalid_argument("split: a split would receive no classes");
    }
    const std::set<int> train_classes(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(n_train));
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      (train_classes.count((*ds.shared_class)[static_cast<std::size_t>(i)]) ? train_rows : test_rows).push_back(i);
    }
  }
  SplitResult out{ds.subset(train_rows), ds.subset(test_rows)};
  out.train.split = "train";
  out.test.split = "test";
  return out;
}

}  // namespace iiae

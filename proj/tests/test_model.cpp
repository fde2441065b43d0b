#include "iiae/model.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace iiae;
using nlohmann::json;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::synthetic_default(6, 5);
  c.zx_dim = 2;
  c.zs_dim = 3;
  c.zy_dim = 2;
  c.fe_width = 7;
  c.excl_hidden = {6, 5};
  c.single_shared_hidden = {4};
  c.joint_shared_hidden = {6};
  c.dec_hidden = {5};
  return c;
}

// Random weights and biases (the initializer leaves biases at zero).
IIAEModel random_model(const ModelConfig& c, std::uint64_t seed) {
  IIAEModel m = IIAEModel::initialized(c, seed);
  std::mt19937_64 rng(seed + 1);
  for (auto& t : m.tensors()) {
    if (t.name.ends_with(".bias")) {
      for (double& v : t.data) v = std::normal_distribution<double>(0.0, 0.1)(rng);
    }
  }
  return m;
}

EncoderNoise random_noise(const ModelConfig& c, std::mt19937_64& rng) {
  return {testutil::random_vector(c.zx_dim, rng), testutil::random_vector(c.zs_dim, rng),
          testutil::random_vector(c.zy_dim, rng)};
}

bool same(const GaussianParams& a, const GaussianParams& b) { return a.mean == b.mean && a.log_var == b.log_var; }

std::size_t dense(std::size_t in, std::size_t out) { return in * out + out; }

std::pair<json, std::string> split_checkpoint(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string line;
  std::getline(in, line);
  std::stringstream rest;
  rest << in.rdbuf();
  return {json::parse(line), rest.str()};
}

void write_checkpoint(const std::filesystem::path& p, const json& manifest, const std::string& blob) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << manifest.dump() << '\n' << blob;
}

}  // namespace

TEST_CASE("zero-parameter model encodes to the prior and passes noise through") {
  const ModelConfig c = small_config();
  const IIAEModel m = IIAEModel::zeros(c);
  std::mt19937_64 rng(1);
  const EncoderNoise noise = random_noise(c, rng);
  const EncodedPair e = encode_pair(m, testutil::random_vector(6, rng), testutil::random_vector(5, rng), noise);
  for (const GaussianParams* g : {&e.qx, &e.qy, &e.qs, &e.rx, &e.ry}) {
    CHECK(g->mean.isZero(0.0));
    CHECK(g->log_var.isZero(0.0));
  }
  CHECK(e.z_x == noise.zx);
  CHECK(e.z_s == noise.zs);
  CHECK(e.z_y == noise.zy);
}

TEST_CASE("encode_pair is deterministic") {
  const ModelConfig c = small_config();
  const IIAEModel m = random_model(c, 4);
  std::mt19937_64 rng(2);
  const Vec x = testutil::random_vector(6, rng), y = testutil::random_vector(5, rng);
  const EncoderNoise noise = random_noise(c, rng);
  const EncodedPair a = encode_pair(m, x, y, noise), b = encode_pair(m, x, y, noise);
  CHECK(same(a.qx, b.qx));
  CHECK(same(a.qs, b.qs));
  CHECK(same(a.ry, b.ry));
  CHECK(a.z_s == b.z_s);
}

TEST_CASE("structural independence of the encoders") {
  const ModelConfig c = small_config();
  const IIAEModel m = random_model(c, 5);
  std::mt19937_64 rng(3);
  const Vec x1 = testutil::random_vector(6, rng), x2 = testutil::random_vector(6, rng);
  const Vec y1 = testutil::random_vector(5, rng), y2 = testutil::random_vector(5, rng);
  const EncoderNoise noise = random_noise(c, rng);
  const EncodedPair a = encode_pair(m, x1, y1, noise);
  const EncodedPair by = encode_pair(m, x1, y2, noise);
  const EncodedPair bx = encode_pair(m, x2, y1, noise);
  CHECK(same(a.rx, by.rx));
  CHECK(same(a.qx, by.qx));
  CHECK_FALSE(same(a.qy, by.qy));
  CHECK_FALSE(same(a.qs, by.qs));
  CHECK(same(a.ry, bx.ry));
  CHECK(same(a.qy, bx.qy));
  CHECK_FALSE(same(a.qs, bx.qs));
  CHECK_FALSE(same(a.rx, bx.rx));
}

TEST_CASE("feature extractors run once per domain per encode_pair") {
  const ModelConfig c = small_config();
  const IIAEModel m = random_model(c, 6);
  std::mt19937_64 rng(4);
  const std::size_t before = feature_extractor_evaluations();
  encode_pair(m, testutil::random_vector(6, rng), testutil::random_vector(5, rng), random_noise(c, rng));
  CHECK(feature_extractor_evaluations() - before == 2);
}

TEST_CASE("encode_pair validates dimensions") {
  const ModelConfig c = small_config();
  const IIAEModel m = IIAEModel::zeros(c);
  std::mt19937_64 rng(4);
  const EncoderNoise noise = random_noise(c, rng);
  CHECK_THROWS_AS(encode_pair(m, Vec::Zero(5), Vec::Zero(5), noise), StructuralError);
  EncoderNoise bad = noise;
  bad.zs = Vec::Zero(1);
  CHECK_THROWS_AS(encode_pair(m, Vec::Zero(6), Vec::Zero(5), bad), StructuralError);
}

TEST_CASE("decoders") {
  const ModelConfig c = small_config();
  CHECK(decode_x(IIAEModel::zeros(c), Vec(Vec::Ones(2)), Vec(Vec::Ones(3))).isZero(0.0));
  const IIAEModel m = random_model(c, 7);
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const Vec out = decode_y(m, testutil::random_vector(2, rng, 5.0), testutil::random_vector(3, rng, 5.0));
    CHECK(out.size() == 5);
    CHECK((out.array().abs() < 1.0).all());
  }
  // Batched and single-row forms agree.
  const Mat zx = testutil::random_matrix(3, 2, rng), zs = testutil::random_matrix(3, 3, rng);
  const Mat batch = decode_x(m, zx, zs);
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(batch.row(i).transpose().isApprox(decode_x(m, Vec(zx.row(i).transpose()), Vec(zs.row(i).transpose())), 1e-14));
  }
}

TEST_CASE("translate") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(6);
  const Vec x = testutil::random_vector(6, rng), y = testutil::random_vector(5, rng);

  SUBCASE("zero model gives zeros in every mode") {
    const IIAEModel z = IIAEModel::zeros(c);
    CHECK(translate(z, x, Direction::x_to_y, PriorSample{testutil::random_vector(2, rng)}).isZero(0.0));
    CHECK(translate(z, x, Direction::x_to_y, Guided{y}).isZero(0.0));
    CHECK(translate(z, y, Direction::y_to_x, Guided{x}).isZero(0.0));
  }
  SUBCASE("guided output is the decoder at the posterior means") {
    const IIAEModel m = random_model(c, 8);
    const Vec expected = decode_y(m, Vec(encode_qy(m, y.transpose()).mean.row(0).transpose()),
                                  Vec(encode_rx(m, x.transpose()).mean.row(0).transpose()));
    CHECK(translate(m, x, Direction::x_to_y, Guided{y}) == expected);
  }
  SUBCASE("zero prior noise equals a reference with zero exclusive mean") {
    IIAEModel m = random_model(c, 9);
    m.head_qy.set_zero();
    CHECK(translate(m, x, Direction::x_to_y, PriorSample{Vec::Zero(2)}) == translate(m, x, Direction::x_to_y, Guided{y}));
  }
  SUBCASE("errors") {
    const IIAEModel m = random_model(c, 10);
    CHECK_THROWS_AS(translate(m, x, Direction::x_to_y, Guided{Vec()}), StructuralError);
    CHECK_THROWS_AS(translate(m, x, Direction::x_to_y, PriorSample{Vec::Zero(3)}), StructuralError);
  }
}

TEST_CASE("parameter count of the retrieval configuration") {
  const ModelConfig c = ModelConfig::retrieval_default();
  CHECK(c.zs_dim == 64);
  CHECK(c.zx_dim == 64);
  CHECK(c.zy_dim == 64);
  const std::size_t fe = dense(512, 512);
  const std::size_t excl = dense(512, 512) + dense(512, 256) + dense(256, 128);
  const std::size_t single = dense(512, 256) + dense(256, 128);
  const std::size_t joint = dense(1024, 512) + dense(512, 128);
  const std::size_t dec = dense(128, 128) + dense(128, 512);
  CHECK(IIAEModel::zeros(c).parameter_count() == 2 * fe + 2 * excl + 2 * single + joint + 2 * dec);
}

TEST_CASE("tensor naming and flatten round trip") {
  const ModelConfig c = small_config();
  IIAEModel m = random_model(c, 11);
  const auto ts = m.tensors();
  CHECK(ts.front().name == "fe_x.0.weight");
  CHECK(ts.front().shape == std::vector<Eigen::Index>{c.fe_width, c.x_dim});
  std::size_t total = 0;
  for (const auto& t : ts) total += t.data.size();
  CHECK(total == m.parameter_count());

  const auto flat = m.flatten();
  IIAEModel other = IIAEModel::zeros(c);
  other.unflatten(flat);
  CHECK(other.flatten() == flat);
  CHECK_THROWS_AS(other.unflatten(std::vector<double>(3, 0.0)), StructuralError);
}

TEST_CASE("model config validation and JSON") {
  ModelConfig c = small_config();
  const json j = c;
  CHECK(j.get<ModelConfig>() == c);
  c.zs_dim = 0;
  CHECK_THROWS_AS(c.validate(), StructuralError);
  CHECK_THROWS_AS(IIAEModel::zeros(c), StructuralError);
}

TEST_CASE("initialization is seeded and Glorot-bounded") {
  const ModelConfig c = small_config();
  const IIAEModel a = IIAEModel::initialized(c, 3), b = IIAEModel::initialized(c, 3), d = IIAEModel::initialized(c, 4);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != d.flatten());
  for (const auto& [name, net] : a.networks()) {
    for (const auto& layer : net->layers()) {
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
      CHECK(layer.weight.cwiseAbs().maxCoeff() <= bound);
      CHECK(layer.bias.isZero(0.0));
    }
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  testutil::TempDir dir("ckpt");
  const ModelConfig c = small_config();
  IIAEModel m = random_model(c, 12);
  m.round_to_float32();
  const auto path = dir / "model.ckpt";
  save_checkpoint(m, json{{"note", "test"}}, 42, 7, path);

  SUBCASE("round trip is exact") {
    const LoadedCheckpoint ck = load_checkpoint(path);
    CHECK(ck.model.config == c);
    CHECK(ck.model.flatten() == m.flatten());
    CHECK(ck.step == 42);
    CHECK(ck.seed == 7);
    CHECK(ck.config.at("note") == "test");
    std::mt19937_64 rng(13);
    const Vec x = testutil::random_vector(6, rng), y = testutil::random_vector(5, rng);
    const EncoderNoise noise = random_noise(c, rng);
    CHECK(encode_pair(ck.model, x, y, noise).z_s == encode_pair(m, x, y, noise).z_s);
  }
  SUBCASE("edited shape") {
    auto [manifest, blob] = split_checkpoint(path);
    manifest["tensors"][0]["shape"] = json::array({c.fe_width + 1, c.x_dim});
    write_checkpoint(path, manifest, blob);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("shape mismatch"), CheckpointError);
  }
  SUBCASE("truncated blob names the tensor") {
    auto [manifest, blob] = split_checkpoint(path);
    blob.pop_back();
    write_checkpoint(path, manifest, blob);
    const std::string last = manifest["tensors"].back()["name"];
    const std::string expected = "truncated inside tensor '" + last + "'";
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains(expected.c_str()), CheckpointError);
  }
  SUBCASE("trailing bytes") {
    auto [manifest, blob] = split_checkpoint(path);
    write_checkpoint(path, manifest, blob + "xxxx");
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SUBCASE("not a checkpoint") {
    write_checkpoint(path, json{{"format", "other"}}, "");
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  }
}

TEST_CASE("checkpoint save leaves no temp files") {
  testutil::TempDir dir("ckpt_tmp");
  save_checkpoint(IIAEModel::zeros(small_config()), json::object(), 0, 0, dir / "a.ckpt");
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    (void)e;
    ++files;
  }
  CHECK(files == 1);
}

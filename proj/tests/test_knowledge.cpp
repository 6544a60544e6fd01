#include "laser/knowledge.hpp"

#include "laser/error.hpp"
#include "laser/io_util.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

using namespace laser;
using laser::ad::Matrix;
using laser::ad::Tensor;

namespace {

double gelu_scalar(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// y = W2^T gelu(W1^T x + b1) + b2, written with explicit loops.
std::vector<double> mlp_scalar(const std::vector<double>& x, const Matrix& w1, const Matrix& b1,
                               const Matrix& w2, const Matrix& b2) {
  std::vector<double> hidden(static_cast<size_t>(w1.cols()));
  for (int j = 0; j < w1.cols(); ++j) {
    double s = b1(0, j);
    for (size_t i = 0; i < x.size(); ++i) s += x[i] * w1(static_cast<int>(i), j);
    hidden[static_cast<size_t>(j)] = gelu_scalar(s);
  }
  std::vector<double> out(static_cast<size_t>(w2.cols()));
  for (int k = 0; k < w2.cols(); ++k) {
    double s = b2(0, k);
    for (int j = 0; j < w1.cols(); ++j) s += hidden[static_cast<size_t>(j)] * w2(j, k);
    out[static_cast<size_t>(k)] = s;
  }
  return out;
}

KnowledgeVector vec(Side side, std::int64_t id, std::vector<float> v) {
  return {side, id, std::move(v), "tmpl-v1"};
}

}  // namespace

TEST_CASE("pool_mean") {
  Matrix same(3, 2);
  same << 1.5, -2, 1.5, -2, 1.5, -2;
  CHECK(pool_mean(same)(0) == 1.5);
  CHECK(pool_mean(same)(1) == -2);
  Matrix eye(2, 2);
  eye << 1, 0, 0, 1;
  CHECK(pool_mean(eye)(0) == 0.5);
  CHECK(pool_mean(eye)(1) == 0.5);

  std::mt19937_64 rng(1);
  Matrix r = ad::normal_matrix(7, 16, 1.0, rng);
  auto m = pool_mean(r);
  for (int c = 0; c < 16; ++c) {
    double total = 0;
    for (int row = 0; row < 7; ++row) total += r(row, c);
    CHECK(std::abs(m(c) - total / 7) < 1e-12);
  }
  CHECK_THROWS_AS(pool_mean(Matrix(0, 4)), InvalidArgument);
}

TEST_CASE("MoE: scalar oracle on a hand-set 2-expert adapter") {
  MoeConfig cfg{Side::item, 3, 2, 2, 2, 0};
  MoeAdapter a(cfg);
  auto params = a.parameters();
  double v = 0.1;
  for (auto& p : params) {
    for (Eigen::Index i = 0; i < p.value().size(); ++i) {
      p.mutable_value().data()[i] = std::sin(v) * 0.8;
      v += 0.37;
    }
  }
  std::vector<double> x = {0.5, -1.25, 2.0};
  auto g = mlp_scalar(x, params[0].value(), params[1].value(), params[2].value(), params[3].value());
  const double mx = std::max(g[0], g[1]);
  const double e0 = std::exp(g[0] - mx), e1 = std::exp(g[1] - mx);
  const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
  auto x0 = mlp_scalar(x, params[4].value(), params[5].value(), params[6].value(), params[7].value());
  auto x1 = mlp_scalar(x, params[8].value(), params[9].value(), params[10].value(), params[11].value());

  KnowledgeVector h = vec(Side::item, 1, {0.5f, -1.25f, 2.0f});
  auto z = adapt(a, h);
  REQUIRE(z.vector.size() == 2);
  for (size_t k = 0; k < 2; ++k) CHECK(std::abs(z.vector[k] - (a0 * x0[k] + a1 * x1[k])) < 1e-10);
}

TEST_CASE("MoE: J=1 reduction, equal logits, simplex and convexity") {
  std::mt19937_64 rng(2);
  MoeAdapter one(MoeConfig{Side::user, 8, 4, 1, 0, 3});
  Tensor h = Tensor::constant(ad::normal_matrix(5, 8, 1.0, rng));
  {
    ad::NoGradGuard ng;
    CHECK(one.forward(h).value() == one.expert(0, h).value());
  }

  MoeAdapter four(MoeConfig{Side::user, 8, 4, 4, 0, 4});
  four.parameters()[2].mutable_value().setZero();  // gate output layer
  four.parameters()[3].mutable_value().setZero();
  {
    ad::NoGradGuard ng;
    Matrix alpha = four.gate(h).value();
    CHECK((alpha.array() - 0.25).abs().maxCoeff() < 1e-15);
  }

  MoeAdapter moe(MoeConfig{Side::user, 8, 4, 4, 0, 5});
  ad::NoGradGuard ng;
  Tensor many = Tensor::constant(ad::normal_matrix(1000, 8, 2.0, rng));
  Tensor alpha;
  Matrix z = moe.forward(many, &alpha).value();
  CHECK(alpha.value().minCoeff() >= 0.0);
  CHECK((alpha.value().rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
  Matrix lo = moe.expert(0, many).value(), hi = lo;
  for (int j = 1; j < 4; ++j) {
    Matrix e = moe.expert(j, many).value();
    lo = lo.cwiseMin(e);
    hi = hi.cwiseMax(e);
  }
  CHECK(((z - lo).minCoeff()) >= -1e-6);
  CHECK(((hi - z).minCoeff()) >= -1e-6);
}

TEST_CASE("MoE: gradients match finite differences on a dim-4, 2-expert adapter") {
  std::mt19937_64 rng(3);
  MoeAdapter a(MoeConfig{Side::user, 4, 3, 2, 0, 6});
  Tensor h = Tensor::constant(ad::normal_matrix(6, 4, 1.0, rng));
  Tensor w = Tensor::constant(ad::normal_matrix(6, 3, 1.0, rng));
  std::vector<Tensor> params(a.parameters().begin(), a.parameters().end());
  auto res = testing::finite_difference_check(params, [&] { return ad::sum_all(ad::mul(a.forward(h), w)); },
                                              40, 9);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("adapt rejects side and dimension mismatches") {
  MoeAdapter a(MoeConfig{Side::user, 3, 2, 2, 0, 0});
  CHECK_THROWS_AS(adapt(a, vec(Side::item, 1, {1, 2, 3})), MismatchError);
  CHECK_THROWS_AS(adapt(a, vec(Side::user, 1, {1, 2})), MismatchError);
  CHECK_THROWS_AS(MoeAdapter(MoeConfig{Side::user, 3, 2, 0, 0, 0}), InvalidArgument);
}

TEST_CASE("precompute: identical prompts, empty input, thread independence") {
  ReferenceLmConfig c;
  c.layers = 1;
  c.hidden_dim = 8;
  c.heads = 2;
  auto lm = ReferenceLm::create(c, {"one two three four", "five six"});
  std::vector<std::pair<std::int64_t, std::string>> prompts = {
      {1, "one two three"}, {2, "one two three"}, {3, "five six four"}, {4, ""}};
  auto r1 = precompute_side(lm, prompts, Side::item, "v", 1);
  auto r4 = precompute_side(lm, prompts, Side::item, "v", 4);
  REQUIRE(r1.vectors.size() == 3);
  CHECK(r1.failures.size() == 1);
  CHECK(r1.failures[0].entity_id == 4);
  CHECK(r1.vectors[0].vector == r1.vectors[1].vector);
  for (size_t i = 0; i < 3; ++i) CHECK(r1.vectors[i].vector == r4.vectors[i].vector);
  CHECK(precompute_side(lm, {}, Side::user, "v").vectors.empty());

  auto dir = testing::scratch_dir("precompute");
  KnowledgeCache::write(r1.vectors, dir / "c.bin");
  auto cache = KnowledgeCache::open(dir / "c.bin");
  auto again = precompute_side(lm, prompts, Side::item, "v", 2);
  for (const auto& v : again.vectors) CHECK(cache.read(v.entity_id).vector == v.vector);
}

TEST_CASE("cache round trip, lookups and template check") {
  auto dir = testing::scratch_dir("cache");
  std::vector<KnowledgeVector> vs = {vec(Side::user, 10, {1.f, 2.f, -0.f}),
                                     vec(Side::user, 3, {1e-30f, 3.4e38f, -7.25f}),
                                     vec(Side::user, 99, {0.1f, 0.2f, 0.3f})};
  auto written = cache_write(vs, dir / "u.bin");
  CHECK(written.count() == 3);
  for (const auto& v : vs) {
    auto back = cache_read(dir / "u.bin", v.entity_id);
    CHECK(std::memcmp(back.vector.data(), v.vector.data(), v.vector.size() * 4) == 0);
  }
  auto cache = KnowledgeCache::open(dir / "u.bin");
  CHECK(cache.side() == Side::user);
  CHECK(cache.dim() == 3);
  CHECK_THROWS_AS(cache.read(12345), NotFoundError);
  CHECK_NOTHROW(cache.check_template("tmpl-v1"));
  CHECK_THROWS_AS(cache.check_template("tmpl-v2"), MismatchError);

  auto bad = vs;
  bad[1].vector.push_back(1.f);
  CHECK_THROWS_AS(cache_write(bad, dir / "bad.bin"), MismatchError);
  bad = vs;
  bad[1].entity_id = 10;
  CHECK_THROWS_AS(cache_write(bad, dir / "bad.bin"), InvalidArgument);
}

TEST_CASE("cache corruption: truncation, magic, CRC") {
  auto dir = testing::scratch_dir("corrupt");
  std::vector<KnowledgeVector> vs;
  for (int i = 0; i < 5; ++i) vs.push_back(vec(Side::item, i, {float(i), 1.f, 2.f, 3.f}));
  cache_write(vs, dir / "i.bin");
  const std::string bytes = read_file(dir / "i.bin");

  // Header is 7 + 1 + 1 + 4 + 8 + 32 = 53 bytes; records are 8 + 16 bytes.
  const size_t cut = 53 + 24 * 2 + 10;
  try {
    KnowledgeCache::parse(bytes.substr(0, cut), "i.bin");
    FAIL("truncated cache parsed");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset " + std::to_string(53 + 24 * 2 + 8)) != std::string::npos);
  }

  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(KnowledgeCache::parse(magic, "i.bin"), doctest::Contains("bad magic"), FormatError);

  std::string flipped = bytes;
  flipped[53 + 10] ^= 0x01;
  CHECK_THROWS_WITH_AS(KnowledgeCache::parse(flipped, "i.bin"), doctest::Contains("CRC"), FormatError);
}

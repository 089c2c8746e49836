#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "stan/transformer.hpp"

using stan::AttentionModule;
using stan::AttentionParams;
using stan::Shape;
using DT = stan::TensorT<double>;

namespace {

AttentionParams<double> identity_params(int tokens, int d) {
  stan::Rng rng(1);
  AttentionParams<double> p(tokens, d, rng);
  for (auto* m : {&p.wq, &p.wk, &p.wv}) {
    std::fill(m->data(), m->data() + m->numel(), 0.0);
    for (int i = 0; i < d; ++i) m->data()[i * d + i] = 1.0;
  }
  return p;
}

void zero_all(stan::ParamList<double>& params) {
  for (auto& e : params) std::fill(e.tensor.data(), e.tensor.data() + e.tensor.numel(), 0.0);
}

}  // namespace

TEST_CASE("qkv projection: identity weights reproduce x, zero x gives zeros") {
  stan::Rng rng(2);
  DT x = oracle::random_tensor<double>({5, 3}, rng);
  auto p = identity_params(5, 3);
  auto [q, k, v] = stan::qkv_project(x, p);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(q.data()[i] == x.data()[i]);
    CHECK(k.data()[i] == x.data()[i]);
    CHECK(v.data()[i] == x.data()[i]);
  }

  DT zero = DT::zeros({5, 3});
  auto [q0, k0, v0] = stan::qkv_project(zero, p);
  for (int64_t i = 0; i < q0.numel(); ++i) {
    CHECK(q0.data()[i] == 0.0);
    CHECK(k0.data()[i] == 0.0);
    CHECK(v0.data()[i] == 0.0);
  }
}

TEST_CASE("qkv projection: random case vs triple-loop oracle") {
  stan::Rng rng(3);
  auto xv = oracle::random_vec(4 * 3, rng);
  DT x = DT::from({4, 3}, xv);
  AttentionParams<double> p(4, 3, rng);
  auto [q, k, v] = stan::qkv_project(x, p);
  auto wq = std::vector<double>(p.wq.data(), p.wq.data() + 9);
  auto ref = oracle::matmul(xv, 4, 3, wq, 3);
  for (int i = 0; i < 12; ++i) CHECK(std::abs(q.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("qkv projection: width mismatch throws") {
  AttentionParams<double> p = identity_params(4, 3);
  CHECK_THROWS_AS(stan::qkv_project(DT::zeros({4, 5}), p), stan::ShapeError);
}

TEST_CASE("single-token attention returns V exactly") {
  stan::Rng rng(5);
  DT q = oracle::random_tensor<double>({1, 3}, rng);
  DT k = oracle::random_tensor<double>({1, 3}, rng);
  DT v = oracle::random_tensor<double>({1, 4}, rng);
  DT out = stan::scaled_attention(q, k, v);
  CHECK(out.shape() == Shape{1, 4});
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == v.data()[i]);
}

TEST_CASE("zero-Q attention returns the mean of V rows") {
  stan::Rng rng(7);
  DT q = DT::zeros({4, 3});
  DT k = oracle::random_tensor<double>({4, 3}, rng);
  DT v = oracle::random_tensor<double>({4, 2}, rng);
  DT out = stan::scaled_attention(q, k, v);
  for (int e = 0; e < 2; ++e) {
    double mean = 0;
    for (int j = 0; j < 4; ++j) mean += v.data()[j * 2 + e];
    mean /= 4;
    for (int i = 0; i < 4; ++i) CHECK(std::abs(out.data()[i * 2 + e] - mean) < 1e-9);
  }
}

TEST_CASE("attention random case vs direct-formula oracle") {
  stan::Rng rng(9);
  auto qv = oracle::random_vec(4 * 3, rng);
  auto kv = oracle::random_vec(4 * 3, rng);
  auto vv = oracle::random_vec(4 * 3, rng);
  DT out = stan::scaled_attention(DT::from({4, 3}, qv), DT::from({4, 3}, kv), DT::from({4, 3}, vv));
  auto ref = oracle::attention(qv, kv, vv, 4, 3, 3);
  for (int i = 0; i < 12; ++i) CHECK(std::abs(out.data()[i] - ref[i]) < 1e-9);
}

TEST_CASE("attention weights are row-stochastic") {
  stan::Rng rng(11);
  DT q = oracle::random_tensor<double>({6, 4}, rng, -3.0, 3.0);
  DT k = oracle::random_tensor<double>({6, 4}, rng, -3.0, 3.0);
  DT w = stan::attention_weights(q, k);
  for (int i = 0; i < 6; ++i) {
    double s = 0;
    for (int j = 0; j < 6; ++j) {
      const double x = w.data()[i * 6 + j];
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("attention dimension mismatches throw") {
  CHECK_THROWS_AS(stan::scaled_attention(DT::zeros({4, 3}), DT::zeros({4, 2}), DT::zeros({4, 3})),
                  stan::ShapeError);
  CHECK_THROWS_AS(stan::scaled_attention(DT::zeros({4, 3}), DT::zeros({5, 3}), DT::zeros({4, 3})),
                  stan::ShapeError);
}

TEST_CASE("scaled_attention is permutation-equivariant") {
  stan::Rng rng(13);
  const int n = 6, d = 4;
  DT x = oracle::random_tensor<double>({n, d}, rng);
  AttentionParams<double> p(n, d, rng);

  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  DT xp = DT::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) xp.data()[i * d + j] = x.data()[perm[i] * d + j];

  auto [q, k, v] = stan::qkv_project(x, p);
  DT out = stan::scaled_attention(q, k, v);
  auto [q2, k2, v2] = stan::qkv_project(xp, p);
  DT out_p = stan::scaled_attention(q2, k2, v2);

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(std::abs(out_p.data()[i * d + j] - out.data()[perm[i] * d + j]) < 1e-6);
}

TEST_CASE("a non-constant positional embedding breaks permutation equivariance") {
  stan::Rng rng(17);
  const int n = 6, d = 4;
  DT x = oracle::random_tensor<double>({n, d}, rng);
  AttentionParams<double> p(n, d, rng);
  // make the embedding clearly non-constant
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) p.pos.data()[i * d + j] = 0.5 * i - 0.2 * j;

  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  DT xp = DT::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) xp.data()[i * d + j] = x.data()[perm[i] * d + j];

  DT out = stan::transformer_block(stan::add(x, p.pos), p);
  DT out_p = stan::transformer_block(stan::add(xp, p.pos), p);

  double max_dev = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      max_dev = std::max(max_dev,
                         std::abs(out_p.data()[i * d + j] - out.data()[perm[i] * d + j]));
  CHECK(max_dev > 1e-3);
}

TEST_CASE("transformer block: zero MLP makes it the identity") {
  stan::Rng rng(19);
  const int n = 8, d = 4;
  AttentionParams<double> p(n, d, rng);
  for (auto* t : {&p.mlp1.w, &p.mlp1.b, &p.mlp2.w, &p.mlp2.b})
    std::fill(t->data(), t->data() + t->numel(), 0.0);
  DT x = oracle::random_tensor<double>({n, d}, rng);
  DT y = stan::transformer_block(x, p);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("transformer block output shape equals input shape") {
  stan::Rng rng(23);
  for (int rep = 0; rep < 4; ++rep) {
    const int n = 2 + rng.uniform_int(12);
    const int d = 1 + rng.uniform_int(6);
    AttentionParams<double> p(n, d, rng);
    DT x = oracle::random_tensor<double>({n, d}, rng);
    CHECK(stan::transformer_block(x, p).shape() == x.shape());
  }
}

TEST_CASE("residual decomposition: block output minus x is the MLP term") {
  stan::Rng rng(29);
  const int n = 6, d = 4;
  AttentionParams<double> p(n, d, rng);
  DT x = oracle::random_tensor<double>({n, d}, rng);
  DT y = stan::transformer_block(x, p);
  auto [q, k, v] = stan::qkv_project(x, p);
  DT m = p.mlp2.forward(stan::relu(p.mlp1.forward(stan::scaled_attention(q, k, v))));
  DT y2 = stan::add(m, x);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == y2.data()[i]);
}

TEST_CASE("attention module: zero weights double a spatially constant map") {
  stan::Rng rng(31);
  AttentionModule<double> mod(2, 3, 32, 32, 8, rng);
  stan::ParamList<double> params;
  mod.params("m", params);
  zero_all(params);
  DT x = DT::zeros({2, 3, 32, 32});
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < 3; ++c) {
      const double v = 1.0 + t + 10 * c;
      for (int i = 0; i < 32 * 32; ++i) x.data()[(t * 3 + c) * 32 * 32 + i] = v;
    }
  DT y = mod.forward(x);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-12));
}

TEST_CASE("attention module preserves the input shape") {
  stan::Rng rng(37);
  AttentionModule<double> mod(5, 4, 16, 16, 8, rng);
  DT x = oracle::random_tensor<double>({5, 4, 16, 16}, rng);
  CHECK(mod.forward(x).shape() == x.shape());
}

TEST_CASE("attention module token counts follow pooling arithmetic") {
  stan::Rng rng(41);
  CHECK(AttentionModule<double>(5, 13, 32, 32, 8, rng).tokens() == 320);
  CHECK(AttentionModule<double>(3, 8, 16, 16, 8, rng).tokens() == 192);
  CHECK(AttentionModule<double>(1, 16, 8, 8, 8, rng).tokens() == 64);
  // below the pooling floor, the native size is used
  CHECK(AttentionModule<double>(1, 16, 4, 4, 8, rng).tokens() == 16);
}

TEST_CASE("attention module residual delta is constant per upsampling block") {
  stan::Rng rng(43);
  AttentionModule<double> mod(1, 3, 64, 64, 8, rng);
  DT x = oracle::random_tensor<double>({1, 3, 64, 64}, rng);
  DT y = mod.forward(x);
  for (int c = 0; c < 3; ++c)
    for (int bi = 0; bi < 8; ++bi)
      for (int bj = 0; bj < 8; ++bj) {
        const auto delta = [&](int i, int j) {
          const int64_t idx = (static_cast<int64_t>(c) * 64 + i) * 64 + j;
          return y.data()[idx] - x.data()[idx];
        };
        const double ref = delta(bi * 8, bj * 8);
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v)
            CHECK(std::abs(delta(bi * 8 + u, bj * 8 + v) - ref) < 1e-9);
      }
}

TEST_CASE("attention module rejects non-divisible extents") {
  stan::Rng rng(47);
  CHECK_THROWS_AS(AttentionModule<double>(1, 3, 12, 12, 8, rng), stan::ShapeError);
}

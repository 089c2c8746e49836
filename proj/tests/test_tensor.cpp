#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_suite.hpp"
#include "oracles.hpp"
#include "stan/tensor.hpp"

using stan::Shape;
using stan::TensorT;
using DT = stan::TensorT<double>;

TEST_CASE("matmul identity cases") {
  DT eye = DT::from({2, 2}, {1, 0, 0, 1});
  DT m = DT::from({2, 2}, {1, 2, 3, 4});
  DT a = stan::matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(a.data()[i] == m.data()[i]);
  DT b = stan::matmul(m, eye);
  for (int i = 0; i < 4; ++i) CHECK(b.data()[i] == m.data()[i]);
}

TEST_CASE("matmul random vs triple-loop oracle") {
  stan::Rng rng(7);
  auto av = oracle::random_vec(12, rng);
  auto bv = oracle::random_vec(8, rng);
  DT a = DT::from({3, 4}, av);
  DT b = DT::from({4, 2}, bv);
  DT y = stan::matmul(a, b);
  auto ref = oracle::matmul(av, 3, 4, bv, 2);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(y.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch throws") {
  DT a = DT::zeros({2, 3});
  DT b = DT::zeros({4, 2});
  CHECK_THROWS_AS(stan::matmul(a, b), stan::ShapeError);
}

TEST_CASE("softmax fixed points") {
  DT z = stan::softmax_last_dim(DT::from({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(z.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  DT one = stan::softmax_last_dim(DT::from({1}, {5.0}));
  CHECK(one.data()[0] == 1.0);

  DT big = stan::softmax_last_dim(DT::from({3}, {1000, 1000, 1000}));
  for (int i = 0; i < 3; ++i) {
    CHECK(std::isfinite(big.data()[i]));
    CHECK(big.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows sum to 1 and lie in [0,1]") {
  stan::Rng rng(11);
  for (int rep = 0; rep < 30; ++rep) {
    DT x = oracle::random_tensor<double>({4, 7}, rng, -30.0, 30.0);
    DT p = stan::softmax_last_dim(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) {
        const double v = p.data()[r * 7 + j];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("conv2d identity kernel and zero input") {
  DT x = DT::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  DT w = DT::from({1, 1, 1, 1}, {1.0});
  DT b = DT::zeros({1});
  DT y = stan::conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);

  stan::Rng rng(3);
  DT zx = DT::zeros({2, 4, 4});
  DT rw = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
  DT y2 = stan::conv2d(zx, rw, DT::zeros({3}), 1, 1);
  for (int64_t i = 0; i < y2.numel(); ++i) CHECK(y2.data()[i] == 0.0);
}

TEST_CASE("conv2d random vs direct-loop oracle") {
  stan::Rng rng(5);
  auto xv = oracle::random_vec(2 * 5 * 5, rng);
  auto wv = oracle::random_vec(3 * 2 * 3 * 3, rng);
  auto bv = oracle::random_vec(3, rng);
  DT x = DT::from({2, 5, 5}, xv);
  DT w = DT::from({3, 2, 3, 3}, wv);
  DT b = DT::from({3}, bv);
  DT y = stan::conv2d(x, w, b, 2, 1);
  int OH, OW;
  auto ref = oracle::conv2d(xv, 2, 5, 5, wv, 3, 3, 3, bv, 2, 1, OH, OW);
  CHECK(y.shape() == Shape{3, OH, OW});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) < 1e-10);
}

TEST_CASE("conv2d kernel larger than padded input throws") {
  DT x = DT::zeros({1, 3, 3});
  DT w = DT::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(stan::conv2d(x, w, DT::zeros({1}), 1, 0), stan::ShapeError);
}

TEST_CASE("conv3d averaging kernel equals temporal mean") {
  stan::Rng rng(9);
  DT x = oracle::random_tensor<double>({1, 3, 2, 2}, rng);
  DT w = DT::full({1, 1, 3, 1, 1}, 1.0 / 3.0);
  DT y = stan::conv3d(x, w, DT::zeros({1}), 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (int h = 0; h < 2; ++h)
    for (int c = 0; c < 2; ++c) {
      const double mean =
          (x.data()[(0 * 2 + h) * 2 + c] + x.data()[(1 * 2 + h) * 2 + c] +
           x.data()[(2 * 2 + h) * 2 + c]) /
          3.0;
      CHECK(y.data()[h * 2 + c] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("conv3d k_t=1 identity kernel preserves input") {
  stan::Rng rng(13);
  DT x = oracle::random_tensor<double>({1, 3, 4, 4}, rng);
  DT w = DT::from({1, 1, 1, 1, 1}, {1.0});
  DT y = stan::conv3d(x, w, DT::zeros({1}), 0);
  CHECK(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv3d random vs direct-loop oracle") {
  stan::Rng rng(15);
  auto xv = oracle::random_vec(2 * 4 * 5 * 5, rng);
  auto wv = oracle::random_vec(3 * 2 * 3 * 3 * 3, rng);
  auto bv = oracle::random_vec(3, rng);
  DT x = DT::from({2, 4, 5, 5}, xv);
  DT w = DT::from({3, 2, 3, 3, 3}, wv);
  DT b = DT::from({3}, bv);
  DT y = stan::conv3d(x, w, b, 1);
  int OT, OH, OW;
  auto ref = oracle::conv3d(xv, 2, 4, 5, 5, wv, 3, 3, 3, 3, bv, 1, OT, OH, OW);
  CHECK(y.shape() == Shape{3, OT, OH, OW});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) < 1e-10);
}

TEST_CASE("conv3d temporal kernel exceeding extent throws") {
  DT x = DT::zeros({1, 2, 3, 3});
  DT w = DT::zeros({1, 1, 3, 1, 1});
  CHECK_THROWS_AS(stan::conv3d(x, w, DT::zeros({1}), 0), stan::ShapeError);
}

TEST_CASE("pooling and upsampling: constant map round-trip") {
  DT x = DT::full({1, 32, 32}, 7.0);
  DT p = stan::avg_pool2d_to(x, 8, 8);
  for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == 7.0);
  DT u = stan::upsample_nearest2d(p, 32, 32);
  CHECK(u.shape() == x.shape());
  for (int64_t i = 0; i < u.numel(); ++i) CHECK(u.data()[i] == 7.0);
}

TEST_CASE("pooling 2x2 to 1x1 is the arithmetic mean") {
  DT x = DT::from({1, 2, 2}, {1, 2, 3, 4});
  DT p = stan::avg_pool2d_to(x, 1, 1);
  CHECK(p.data()[0] == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("pooling random vs block-loop oracle") {
  stan::Rng rng(21);
  auto xv = oracle::random_vec(16 * 16, rng);
  DT x = DT::from({1, 16, 16}, xv);
  DT p = stan::avg_pool2d_to(x, 8, 8);
  auto ref = oracle::avg_pool(xv, 16, 16, 8, 8);
  for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == ref[i]);
}

TEST_CASE("pooling non-divisible extents throw") {
  DT x = DT::zeros({1, 10, 10});
  CHECK_THROWS_AS(stan::avg_pool2d_to(x, 4, 4), stan::ShapeError);
  DT s = DT::zeros({1, 4, 4});
  CHECK_THROWS_AS(stan::upsample_nearest2d(s, 10, 10), stan::ShapeError);
}

TEST_CASE("reshape and permute round-trip bit-exactly") {
  stan::Rng rng(23);
  DT x = oracle::random_tensor<double>({3, 4, 5}, rng);
  DT r = stan::reshape(stan::reshape(x, {5, 12}), {3, 4, 5});
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(r.data()[i] == x.data()[i]);

  DT p = stan::permute(stan::permute(x, {2, 0, 1}), {1, 2, 0});
  CHECK(p.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(p.data()[i] == x.data()[i]);
}

TEST_CASE("backward: loss = sum(x) gives ones") {
  DT x = DT::from({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  stan::TapeT<double>::Scope scope;
  DT loss = stan::sum_all(x);
  stan::backward(loss);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward: loss = sum(x*x) gives 2x") {
  stan::Rng rng(29);
  DT x = oracle::random_tensor<double>({3, 3}, rng);
  x.set_requires_grad(true);
  stan::TapeT<double>::Scope scope;
  DT loss = stan::sum_all(stan::mul(x, x));
  stan::backward(loss);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-12));
}

TEST_CASE("backward accumulates across multiple uses") {
  stan::Rng rng(31);
  DT x = oracle::random_tensor<double>({4}, rng);
  DT a = oracle::random_tensor<double>({4}, rng);
  DT b = oracle::random_tensor<double>({4}, rng);
  x.set_requires_grad(true);
  stan::TapeT<double>::Scope scope;
  DT loss = stan::sum_all(stan::add(stan::mul(x, a), stan::mul(x, b)));
  stan::backward(loss);
  for (int i = 0; i < 4; ++i)
    CHECK(x.grad()[i] == doctest::Approx(a.data()[i] + b.data()[i]).epsilon(1e-12));
}

TEST_CASE("backward: unused tracked leaf keeps zero grad") {
  DT x = DT::from({2}, {1, 2});
  DT unused = DT::from({2}, {3, 4});
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  stan::TapeT<double>::Scope scope;
  DT loss = stan::sum_all(x);
  stan::backward(loss);
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  DT x = DT::from({2}, {1, 2});
  x.set_requires_grad(true);
  stan::TapeT<double>::Scope scope;
  DT y = stan::scale(x, 2.0);
  CHECK_THROWS_AS(stan::backward(y), stan::ValueError);
}

TEST_CASE("no active tape means no tracking") {
  DT x = DT::from({2}, {1, 2});
  x.set_requires_grad(true);
  DT y = stan::scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("assert_finite flags NaN") {
  DT x = DT::from({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(stan::assert_finite(x, "x"), stan::ValueError);
}

TEST_CASE("gradient suite: every differentiable op matches finite differences") {
  for (auto& entry : gradsuite::build_suite()) {
    INFO(entry.name);
    const double worst = entry.run(20, 0x5eed0000 + 7);
    CHECK_MESSAGE(worst < 1e-5, entry.name, " worst rel err ", worst);
  }
}

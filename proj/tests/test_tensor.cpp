#include <cmath>
#include <random>

#include "capsvl/tensor.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace capsvl;
using ag::Tensor;

namespace {

Tensor random_param(ag::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ag::numel_of(shape));
  for (double& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

// Weighted sum so every output element carries a distinct gradient.
Tensor probe(const Tensor& y) {
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return ag::sum_all(ag::mul(y, Tensor::constant(y.shape(), w)));
}

}  // namespace

TEST_CASE("broadcasting arithmetic matches finite differences") {
  std::mt19937_64 rng(1);
  auto a = random_param({2, 3, 4}, rng);
  auto b = random_param({3, 1}, rng, 0.5, 1.5);
  auto r = testing::gradcheck([&] { return probe(ag::div(ag::mul(a, b) - a, b + a * a + 3.0)); }, {a, b});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("unary ops match finite differences") {
  std::mt19937_64 rng(2);
  auto x = random_param({5, 3}, rng, 0.2, 2.0);
  auto r = testing::gradcheck(
      [&] {
        auto y = ag::exp(ag::scale(x, 0.3)) + ag::log(x) + ag::sqrt(x) + ag::tanh(x) + ag::sigmoid(x) +
                 ag::log_sigmoid(x - 1.0) + ag::gelu(x - 1.0) + ag::square(x);
        return probe(y);
      },
      {x});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("reductions, shapes and softmax match finite differences") {
  std::mt19937_64 rng(3);
  auto x = random_param({2, 3, 4}, rng);
  auto y = random_param({2, 2, 4}, rng);
  auto r = testing::gradcheck(
      [&] {
        auto s = ag::sum(x, 1, true) + ag::mean(x, 2, true);
        auto c = ag::concat({x, y}, 1);
        auto p = ag::permute(c, {2, 0, 1});
        auto sl = ag::slice(p, 2, 1, 3);
        return probe(s) + probe(ag::softmax(sl, 1)) + probe(ag::log_softmax(c, -1)) + probe(ag::reshape(sl, {4, 6}));
      },
      {x, y});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("matmul and bmm match finite differences") {
  std::mt19937_64 rng(4);
  auto x = random_param({2, 3, 4}, rng);
  auto w = random_param({4, 5}, rng);
  auto b1 = random_param({2, 4, 3}, rng);
  auto b2 = random_param({2, 5, 3}, rng);
  auto r = testing::gradcheck(
      [&] { return probe(ag::matmul(x, w)) + probe(ag::bmm(x, b1)) + probe(ag::bmm(ag::bmm(x, b1), b2, true)); },
      {x, w, b1, b2});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("layer norm, cross entropy and embedding match finite differences") {
  std::mt19937_64 rng(5);
  auto x = random_param({3, 6}, rng);
  auto g = random_param({6}, rng, 0.5, 1.5);
  auto b = random_param({6}, rng);
  auto table = random_param({7, 6}, rng);
  const std::vector<int> ids{3, 0, 3, 6};
  const std::vector<int> targets{2, -1, 5};
  auto r = testing::gradcheck(
      [&] {
        auto e = ag::embedding(table, ids, {4});
        return probe(ag::layer_norm(x, g, b, 1e-12)) + ag::cross_entropy(x, targets) + probe(e);
      },
      {x, g, b, table});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  auto logits = Tensor::zeros({4, 10});
  const std::vector<int> t{1, 2, 3, 9};
  CHECK(ag::cross_entropy(logits, t).item() == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  const std::vector<int> none{-1, -1, -1, -1};
  CHECK(ag::cross_entropy(logits, none).item() == 0.0);
}

TEST_CASE("fused attention matches finite differences and normalizes rows") {
  std::mt19937_64 rng(6);
  auto q = random_param({2, 3, 4}, rng);
  auto k = random_param({2, 5, 4}, rng);
  auto v = random_param({2, 5, 4}, rng);
  std::vector<unsigned char> valid{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  Tensor probs;
  auto r = testing::gradcheck([&] { return probe(ag::attention(q, k, v, 2, valid, &probs)); }, {q, k, v});
  CHECK(r.max_rel_error < 1e-6);
  REQUIRE(probs.shape() == ag::Shape{2, 2, 3, 5});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 3; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 5; ++j) s += probs.at({b, h, i, j});
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
  CHECK(probs.at({0, 1, 2, 3}) == 0.0);
  CHECK(probs.at({0, 0, 0, 4}) == 0.0);
}

TEST_CASE("convolution gathers and capsule votes match finite differences") {
  std::mt19937_64 rng(7);
  auto x = random_param({1, 3, 4, 2}, rng);
  auto img = random_param({1, 4, 4, 2}, rng);
  auto poses = random_param({3, 2, 2, 2}, rng);
  auto tr = random_param({2, 3, 2, 2}, rng);
  auto r = testing::gradcheck(
      [&] { return probe(ag::unfold2d(x, 3)) + probe(ag::patchify(img, 2)) + probe(ag::capsule_votes(poses, tr)); },
      {x, img, poses, tr});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("capsule votes multiply pose by transform") {
  auto poses = Tensor::constant({1, 1, 2, 2}, {1, 2, 3, 4});
  auto tr = Tensor::constant({1, 1, 2, 2}, {5, 6, 7, 8});
  auto v = ag::capsule_votes(poses, tr);
  CHECK(v.data()[0] == 19);
  CHECK(v.data()[1] == 22);
  CHECK(v.data()[2] == 43);
  CHECK(v.data()[3] == 50);
}

TEST_CASE("no-grad guard records no history") {
  auto p = Tensor::parameter({2}, {1, 2});
  {
    ag::NoGradGuard guard;
    auto y = ag::mul(p, p);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::mul(p, p).requires_grad());
}

TEST_CASE("broadcast mismatch is rejected") {
  CHECK_THROWS_AS(ag::add(Tensor::zeros({2, 3}), Tensor::zeros({4})), std::invalid_argument);
}

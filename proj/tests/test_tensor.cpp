#include <cmath>
#include <vector>

#include "comet/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace comet;
using T = Tensor<double>;

namespace {

std::vector<double> random_values(Index n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
  return v;
}

T random_tensor(Shape shape, Rng& rng, bool tracked = true, double lo = -1.0, double hi = 1.0) {
  const Index n = shape_size(shape);
  return T::from_values(std::move(shape), random_values(n, rng, lo, hi), tracked);
}

// Scalar probe sum_k w_k y_k with fixed random weights.
T probe(const T& y, const std::vector<double>& w) {
  return dot(T::from_values({y.size()}, w), reshape(y, {y.size()}));
}

std::vector<double> as_vector(const T& t) { return {t.data(), t.data() + t.size()}; }

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("embed_lookup selects and scatters rows") {
  auto table = T::from_values({2, 2}, {1, 2, 3, 4}, true);
  const std::vector<std::int32_t> ids{1, 1};
  auto y = embed_lookup(table, std::span<const std::int32_t>(ids));
  CHECK(y.shape() == Shape{2, 2});
  CHECK(as_vector(y) == std::vector<double>{3, 4, 3, 4});

  const std::vector<std::int32_t> first{0};
  CHECK(as_vector(embed_lookup(table, std::span<const std::int32_t>(first))) == std::vector<double>{1, 2});

  backward(dot(T::full({4}, 1.0), reshape(y, {4})));
  CHECK(as_vector(T::from_values({4}, std::vector<double>(table.grad().data(), table.grad().data() + 4))) ==
        std::vector<double>{0, 0, 2, 2});

  const std::vector<std::int32_t> bad{2};
  CHECK_THROWS_AS(embed_lookup(table, std::span<const std::int32_t>(bad)), IndexError);
  const std::vector<std::int32_t> negative{-1};
  CHECK_THROWS_AS(embed_lookup(table, std::span<const std::int32_t>(negative)), IndexError);
}

TEST_CASE("conv_full_height on constant input") {
  auto map = T::full({50, 128}, 1.0);
  auto kernels = T::full({1, 50, 8}, 1.0);
  auto bias = T::zeros({1});
  auto y = conv_full_height(map, kernels, bias);
  CHECK(y.shape() == Shape{1, 121});
  for (Index k = 0; k < y.size(); ++k) CHECK(y.data()[k] == 400.0);

  auto full_width = conv_full_height(map, T::full({8, 50, 128}, 0.5), T::zeros({8}));
  CHECK(full_width.shape() == Shape{8, 1});
}

TEST_CASE("conv_full_height rejects bad shapes") {
  auto map = T::zeros({3, 5});
  CHECK_THROWS_AS(conv_full_height(map, T::zeros({2, 3, 6}), T::zeros({2})), ShapeError);
  CHECK_THROWS_AS(conv_full_height(map, T::zeros({2, 4, 2}), T::zeros({2})), ShapeError);
  CHECK_THROWS_AS(conv_full_height(map, T::zeros({2, 3, 2}), T::zeros({3})), ShapeError);
}

TEST_CASE("conv_full_height equals the nested-loop oracle bitwise") {
  Rng rng = make_rng(11, 0);
  struct Case {
    Index H, K, C, w, B;
  };
  // small and large position counts exercise both kernel layouts
  for (const Case c : {Case{3, 5, 2, 2, 1}, Case{4, 8, 2, 4, 3}, Case{50, 128, 8, 1, 2}, Case{50, 128, 8, 8, 2},
                       Case{50, 128, 8, 32, 2}, Case{50, 128, 8, 128, 3}, Case{7, 40, 3, 5, 4}}) {
    CAPTURE(c.H);
    CAPTURE(c.K);
    CAPTURE(c.w);
    auto maps = random_tensor({c.B, c.H, c.K}, rng, false);
    auto kernels = random_tensor({c.C, c.H, c.w}, rng, false);
    auto bias = random_tensor({c.C}, rng, false);
    auto y = conv_full_height(maps, kernels, bias);
    const Index T_out = c.K - c.w + 1;
    REQUIRE(y.shape() == Shape{c.B, c.C, T_out});
    for (Index b = 0; b < c.B; ++b) {
      std::vector<double> map(maps.data() + b * c.H * c.K, maps.data() + (b + 1) * c.H * c.K);
      const auto expect = oracle::conv_full_height(map, c.H, c.K, as_vector(kernels), c.C, c.w, as_vector(bias));
      bool equal = true;
      for (Index k = 0; k < c.C * T_out; ++k) equal &= y.data()[b * c.C * T_out + k] == expect[static_cast<std::size_t>(k)];
      CHECK(equal);
      // one sample alone gives the same bits as inside the batch
      auto single = conv_full_height(T::from_values({c.H, c.K}, map), kernels, bias);
      CHECK(std::equal(single.data(), single.data() + single.size(), y.data() + b * c.C * T_out));
    }
  }
}

TEST_CASE("conv_full_height in single precision matches its oracle") {
  Rng rng = make_rng(12, 0);
  using F = Tensor<float>;
  for (Index w : {1, 8, 32, 128}) {
    std::vector<float> map(50 * 128), kernels(static_cast<std::size_t>(8 * 50 * w)), bias(8);
    for (auto* v : {&map, &kernels, &bias})
      for (auto& x : *v) x = static_cast<float>(uniform01(rng) - 0.5);
    auto y = conv_full_height(F::from_values({50, 128}, map), F::from_values({8, 50, w}, kernels),
                              F::from_values({8}, bias));
    const auto expect = oracle::conv_full_height(map, 50, 128, kernels, 8, w, bias);
    CHECK(std::equal(expect.begin(), expect.end(), y.data()));
  }
}

TEST_CASE("conv_full_height gradients match finite differences") {
  Rng rng = make_rng(13, 0);
  for (const auto& [H, K, C, w, B] : std::vector<std::array<Index, 5>>{{3, 5, 2, 2, 1}, {4, 20, 2, 3, 2}, {3, 6, 2, 6, 2}}) {
    auto map = random_tensor(B == 1 ? Shape{H, K} : Shape{B, H, K}, rng);
    auto kernels = random_tensor({C, H, w}, rng);
    auto bias = random_tensor({C}, rng);
    const Index out = B * C * (K - w + 1);
    const auto weights = random_values(out, rng);
    const auto check = oracle::finite_differences(
        {{"map", map}, {"kernels", kernels}, {"bias", bias}},
        [&] { return probe(conv_full_height(map, kernels, bias), weights); });
    CAPTURE(check.worst);
    CHECK(check.max_rel < 1e-6);
    CHECK(check.checked > 0);
  }
}

TEST_CASE("affine") {
  auto x = T::from_values({1, 2}, {1, 1});
  auto y = affine(x, T::from_values({2, 2}, {1, 2, 3, 4}), T::from_values({2}, {1, 1}));
  CHECK(as_vector(y) == std::vector<double>{4, 8});

  Rng rng = make_rng(14, 0);
  auto xs = random_tensor({3, 4}, rng, false);
  auto same = affine(xs, T::from_values({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}), T::zeros({4}));
  CHECK(as_vector(same) == as_vector(xs));

  CHECK_THROWS_AS(affine(xs, T::zeros({2, 5}), T::zeros({2})), ShapeError);
  CHECK_THROWS_AS(affine(xs, T::zeros({2, 4}), T::zeros({3})), ShapeError);

  auto xin = random_tensor({4, 7}, rng);
  auto W = random_tensor({3, 7}, rng);
  auto b = random_tensor({3}, rng);
  const auto weights = random_values(12, rng);
  const auto check = oracle::finite_differences({{"x", xin}, {"W", W}, {"b", b}},
                                                [&] { return probe(affine(xin, W, b), weights); });
  CAPTURE(check.worst);
  CHECK(check.max_rel < 1e-6);
}

TEST_CASE("affine over large inputs sums in index order") {
  Rng rng = make_rng(15, 0);
  const Index B = 5, D = 700, O = 9;
  auto x = random_tensor({B, D}, rng, false);
  auto W = random_tensor({O, D}, rng, false);
  auto b = random_tensor({O}, rng, false);
  auto y = affine(x, W, b);
  bool equal = true;
  for (Index r = 0; r < B; ++r)
    for (Index o = 0; o < O; ++o) {
      double acc = 0;
      for (Index k = 0; k < D; ++k) acc = fused_madd(x.data()[r * D + k], W.data()[o * D + k], acc);
      equal &= y.data()[r * O + o] == acc + b.data()[o];
    }
  CHECK(equal);
}

TEST_CASE("elementwise operations") {
  CHECK(sigmoid(T::scalar(0.0)).item() == 0.5);
  CHECK(as_vector(relu(T::from_values({2}, {-1, 2}))) == std::vector<double>{0, 2});
  CHECK(as_vector(elementwise_mul(T::from_values({2}, {2, 3}), T::from_values({2}, {4, 5}))) ==
        std::vector<double>{8, 15});
  CHECK_THROWS_AS(elementwise_mul(T::zeros({2}), T::zeros({3})), ShapeError);
  CHECK_THROWS_AS(add(T::zeros({2}), T::zeros({3})), ShapeError);

  // relu subgradient at zero is zero
  auto x = T::from_values({3}, {0.0, 1.0, -1.0}, true);
  backward(dot(T::full({3}, 1.0), relu(x)));
  CHECK(x.grad()(0) == 0.0);
  CHECK(x.grad()(1) == 1.0);
  CHECK(x.grad()(2) == 0.0);
}

TEST_CASE("concat of the default filter outputs") {
  std::vector<T> parts;
  for (Index w : {1, 8, 32, 128}) parts.push_back(T::zeros({1, 8 * (128 - w + 1)}));
  CHECK(concat(parts, 1).shape() == Shape{1, 2776});
  CHECK_THROWS_AS(concat(std::vector<T>{T::zeros({1, 2}), T::zeros({2, 2})}, 1), ShapeError);
}

TEST_CASE("dropout") {
  Rng rng = make_rng(16, 0);
  auto x = random_tensor({1000}, rng, false);
  CHECK(as_vector(dropout(x, 0.0, true, rng)) == as_vector(x));
  CHECK(as_vector(dropout(x, 0.3, false, rng)) == as_vector(x));

  auto ones = T::full({100000}, 1.0);
  auto y = dropout(ones, 0.3, true, rng);
  const double mean = y.values().mean();
  CHECK(mean >= 0.98);
  CHECK(mean <= 1.02);
  for (Index k = 0; k < y.size(); ++k) {
    const double v = y.data()[k];
    REQUIRE((v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-15));
  }
}

TEST_CASE("bce_loss") {
  auto half = T::from_values({1}, {0.5});
  CHECK(bce_loss(half, T::from_values({1}, {1.0})).item() == doctest::Approx(0.693147).epsilon(1e-6));

  auto two = bce_loss(T::from_values({2}, {0.3, 0.8}), T::from_values({2}, {1.0, 0.0})).item();
  const double a = bce_loss(T::from_values({1}, {0.3}), T::from_values({1}, {1.0})).item();
  const double b = bce_loss(T::from_values({1}, {0.8}), T::from_values({1}, {0.0})).item();
  CHECK(two == doctest::Approx(a + b).epsilon(1e-15));

  for (double zv : {-2.0, 0.0, 0.7, 3.0}) {
    auto z = T::from_values({1}, {zv}, true);
    backward(bce_loss(sigmoid(z), T::from_values({1}, {1.0})));
    CHECK(z.grad()(0) == doctest::Approx(1.0 / (1.0 + std::exp(-zv)) - 1.0).epsilon(1e-12));
  }

  // saturated probabilities stay finite
  const double clamped = bce_loss(T::from_values({2}, {0.0, 1.0}), T::from_values({2}, {1.0, 0.0})).item();
  CHECK(std::isfinite(clamped));
  CHECK(clamped == doctest::Approx(-2.0 * std::log(1e-7)).epsilon(1e-9));
}

TEST_CASE("backward") {
  Rng rng = make_rng(17, 0);
  auto h = random_tensor({5}, rng, true);
  auto x = random_tensor({5}, rng, false);
  backward(dot(h, x));
  CHECK(as_vector(T::from_values({5}, std::vector<double>(h.grad().data(), h.grad().data() + 5))) == as_vector(x));

  auto once = std::vector<double>(h.grad().data(), h.grad().data() + 5);
  backward(dot(h, x));
  for (int k = 0; k < 5; ++k) CHECK(h.grad()(k) == 2.0 * once[static_cast<std::size_t>(k)]);

  CHECK_THROWS_AS(backward(relu(h)), ContractError);
}

TEST_CASE("every operation matches finite differences") {
  for (const auto& [name, check] : oracle::operation_gradient_checks(18)) {
    CAPTURE(name);
    CAPTURE(check.worst);
    CHECK(check.max_rel < 1e-4);
    CHECK(check.checked > 0);
  }
}

TEST_CASE("conv2d matches a direct loop and finite differences") {
  Rng rng = make_rng(20, 0);
  auto x = random_tensor({2, 2, 9, 11}, rng);
  auto k = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto y = conv2d(x, k, b, 2);
  REQUIRE(y.shape() == Shape{2, 3, 4, 5});
  double worst = 0;
  for (Index n = 0; n < 2; ++n)
    for (Index o = 0; o < 3; ++o)
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 5; ++j) {
          double s = b.data()[o];
          for (Index ci = 0; ci < 2; ++ci)
            for (Index r = 0; r < 3; ++r)
              for (Index t = 0; t < 3; ++t)
                s += k.data()[((o * 2 + ci) * 3 + r) * 3 + t] * x.data()[((n * 2 + ci) * 9 + 2 * i + r) * 11 + 2 * j + t];
          worst = std::max(worst, std::abs(s - y.data()[((n * 3 + o) * 4 + i) * 5 + j]));
        }
  CHECK(worst < 1e-12);

  const auto weights = random_values(y.size(), rng);
  const auto check = oracle::finite_differences({{"x", x}, {"kernels", k}, {"bias", b}},
                                                [&] { return probe(conv2d(x, k, b, 2), weights); });
  CAPTURE(check.worst);
  CHECK(check.max_rel < 1e-4);
  CHECK_THROWS_AS(conv2d(x, random_tensor({3, 1, 3, 3}, rng), b, 2), ShapeError);
}

TEST_CASE("forward passes are bitwise repeatable") {
  Rng rng = make_rng(21, 0);
  auto maps = random_tensor({4, 50, 128}, rng, false);
  auto kernels = random_tensor({8, 50, 32}, rng, false);
  auto bias = random_tensor({8}, rng, false);
  CHECK(as_vector(conv_full_height(maps, kernels, bias)) == as_vector(conv_full_height(maps, kernels, bias)));
}

TEST_CASE("shape invariants") {
  CHECK_THROWS_AS(T::from_values({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(reshape(T::zeros({2, 3}), {4}), ShapeError);
  auto t = T::zeros({2, 3}, true);
  CHECK(t.grad().size() == t.size());
}

}  // TEST_SUITE

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "fd_oracle.hpp"
#include "sct/errors.hpp"
#include "sct/nn.hpp"
#include "sct/tensor.hpp"

using namespace sct;
using sct::testing::max_gradient_error;
using sct::testing::project;
using sct::testing::random_tensor;

namespace {

void check_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(t[i] == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("tensor construction keeps shape and data consistent") {
  const Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK(Tensor::scalar(4.5).item() == 4.5);
}

TEST_CASE("matmul") {
  const Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  check_values(matmul(id, x), {1, 2, 3, 4, 5, 6});
  check_values(matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4})), {11});

  SUBCASE("mismatched inner extents name both shapes") {
    try {
      matmul(x, x);
      FAIL("expected a DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2, 3]") != std::string::npos);
    }
  }

  SUBCASE("gradients match finite differences") {
    std::mt19937_64 rng(1);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    CHECK(max_gradient_error([&] { return project(matmul(a, b)); }, {a, b}) < 1e-6);
  }
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 unit kernel is the identity") {
    const Tensor in = Tensor::from_data({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const Tensor k = Tensor::from_data({1, 1, 1, 1}, {1});
    const Tensor out = conv2d(in, k, Tensor());
    CHECK(out.shape() == Shape{1, 3, 3});
    check_values(out, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  }
  SUBCASE("3x3 ones over 4x4 ones gives 9s") {
    const Tensor out = conv2d(Tensor::full({1, 4, 4}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor());
    CHECK(out.shape() == Shape{1, 2, 2});
    check_values(out, {9, 9, 9, 9});
  }
  SUBCASE("output extent follows floor((h + 2p - k) / s) + 1") {
    const Tensor out = conv2d(Tensor::zeros({2, 7, 6}), Tensor::zeros({3, 2, 3, 3}), Tensor(), {.stride = 2, .padding = 1});
    CHECK(out.shape() == Shape{3, 4, 3});
  }
  SUBCASE("cross-correlation, not convolution") {
    const Tensor in = Tensor::from_data({1, 1, 2}, {1, 2});
    const Tensor out = conv2d(in, Tensor::from_data({1, 1, 1, 2}, {10, 1}), Tensor());
    check_values(out, {12});
  }
  SUBCASE("kernel larger than padded input") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor(), {.padding = 1}), DimensionError);
  }
  SUBCASE("gradients match finite differences") {
    std::mt19937_64 rng(2);
    Tensor in = random_tensor({2, 8, 8}, rng), k = random_tensor({4, 2, 3, 3}, rng), b = random_tensor({4}, rng);
    CHECK(max_gradient_error([&] { return project(conv2d(in, k, b, {.stride = 2, .padding = 1})); }, {in, k, b}) < 1e-5);
  }
  SUBCASE("batched input matches per-sample calls") {
    std::mt19937_64 rng(3);
    const Tensor batch = random_tensor({2, 1, 5, 5}, rng, 1.0, false);
    const Tensor k = random_tensor({2, 1, 3, 3}, rng, 1.0, false);
    const Tensor out = conv2d(batch, k, Tensor());
    for (std::size_t n = 0; n < 2; ++n) {
      const Tensor single = conv2d(reshape(slice_rows(batch, n, 1), {1, 5, 5}), k, Tensor());
      for (std::size_t i = 0; i < single.numel(); ++i) CHECK(out[n * single.numel() + i] == single[i]);
    }
  }
}

TEST_CASE("softmax") {
  check_values(softmax(Tensor::from_data({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  check_values(softmax(Tensor::from_data({2}, {0, std::log(3.0)}), 0), {0.25, 0.75});
  SUBCASE("large inputs stay finite") {
    const Tensor s = softmax(Tensor::from_data({2}, {1000, 1001}), 0);
    CHECK(std::isfinite(s[0]));
    CHECK(s[0] + s[1] == doctest::Approx(1.0));
  }
  SUBCASE("rows sum to one along the chosen axis") {
    std::mt19937_64 rng(4);
    const Tensor x = random_tensor({3, 4, 5}, rng, 3.0, false);
    const Tensor s = softmax(x, 1);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t k = 0; k < 5; ++k) {
        double total = 0.0;
        for (std::size_t j = 0; j < 4; ++j) total += s[(i * 4 + j) * 5 + k];
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
  SUBCASE("jacobian matches finite differences") {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({5}, rng);
    CHECK(max_gradient_error([&] { return project(softmax(x, 0)); }, {x}) < 1e-6);
  }
}

TEST_CASE("layer_normalize") {
  const Tensor gain = Tensor::full({4}, 1.0), bias = Tensor::zeros({4});
  check_values(layer_normalize(Tensor::full({4}, 3.0), gain, bias, 1e-5), {0, 0, 0, 0});
  const Tensor two = layer_normalize(Tensor::from_data({2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-14);
  check_values(two, {-1, 1}, 1e-9);
  SUBCASE("gradients match finite differences") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    CHECK(max_gradient_error([&] { return project(layer_normalize(x, g, b, 1e-5)); }, {x, g, b}) < 1e-5);
  }
}

TEST_CASE("feature_map_normalize is per sample") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({3}, rng), b = random_tensor({3}, rng);
  CHECK(max_gradient_error([&] { return project(feature_map_normalize(x, g, b, 1e-5)); }, {x, g, b}) < 1e-5);
  // Changing sample 1 leaves sample 0 untouched.
  const Tensor base = feature_map_normalize(x.detach(), g.detach(), b.detach(), 1e-5);
  Tensor other = x.detach();
  for (std::size_t i = 48; i < 96; ++i) other.mutable_data()[i] *= 7.0;
  const Tensor changed = feature_map_normalize(other, g.detach(), b.detach(), 1e-5);
  for (std::size_t i = 0; i < 48; ++i) CHECK(base[i] == changed[i]);
}

TEST_CASE("elementwise ops and reductions have correct gradients") {
  std::mt19937_64 rng(8);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), bias = random_tensor({4}, rng);
  Tensor w = random_tensor({4, 2}, rng);
  CHECK(max_gradient_error([&] { return project(add(mul(a, b), sub(a, b))); }, {a, b}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(gelu(affine(a, 1.5, 0.2))); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(log(sigmoid(a))); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(add_bias(a, bias)); }, {a, bias}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(linear(a, w, Tensor::zeros({2}))); }, {a, w}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(transpose(a)); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return mean(mul(a, a)); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(sum_rows(a)); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return prod_all(affine(a, 0.1, 1.0)); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return max_all(a); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] { return project(clamp(a, -0.5, 0.5)); }, {a}) < 1e-6);
  CHECK(max_gradient_error([&] {
          const std::vector<Tensor> rows{slice_rows(a, 1, 2), slice_rows(b, 0, 1)};
          const std::vector<Tensor> cols{slice_cols(a, 0, 1), slice_cols(b, 2, 2)};
          return add(project(concat_rows(rows)), project(concat_cols(cols), 5));
        },
        {a, b}) < 1e-6);
  const std::vector<std::size_t> pick{2, 0, 2};
  CHECK(max_gradient_error([&] { return project(gather_rows(a, pick)); }, {a}) < 1e-6);
  Tensor maps = random_tensor({2, 3, 2, 2}, rng);
  CHECK(max_gradient_error([&] { return project(global_average_pool(maps)); }, {maps}) < 1e-6);
}

TEST_CASE("prod_all handles zeros exactly") {
  Tensor x = Tensor::from_data({3}, {2.0, 0.0, 5.0}, true);
  prod_all(x).backward();
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 10.0);
  CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    sum(x).backward();
    check_values(Tensor::from_data({3}, {x.grad().begin(), x.grad().end()}), {1, 1, 1});
  }
  SUBCASE("x*x at 3 gives 6, and repeated calls accumulate") {
    Tensor x = Tensor::scalar(3.0, true);
    const Tensor y = mul(x, x);
    y.backward();
    CHECK(x.grad()[0] == 6.0);
    y.backward();
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(affine(x, 2.0)), ContractError);
  }
  SUBCASE("shared subexpressions sum their contributions") {
    Tensor x = Tensor::scalar(2.0, true);
    const Tensor y = mul(x, x);
    add(y, mul(y, x)).backward();  // x^2 + x^3
    CHECK(x.grad()[0] == doctest::Approx(2 * 2.0 + 3 * 4.0));
  }
}

TEST_CASE("computation tape is topologically ordered and swept once per op") {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor({2, 2}, rng), b = random_tensor({2, 2}, rng);
  const Tensor c = matmul(a, b);
  const Tensor loss = sum(add(c, mul(c, a)));
  ComputationTape tape(loss);
  const auto records = tape.records();
  CHECK(records.size() == tape.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::uint64_t input : records[i].input_ids) {
      bool produced_earlier = true;
      for (std::size_t j = i; j < records.size(); ++j) produced_earlier = produced_earlier && records[j].id != input;
      CHECK(produced_earlier);
    }
  }
  CHECK(records.back().id == loss.id());
}

TEST_CASE("multi-head attention") {
  std::mt19937_64 rng(10);
  CHECK_THROWS_AS(nn::MultiHeadAttention(6, 4, rng), ConfigError);

  nn::MultiHeadAttention mha(8, 2, rng);
  SUBCASE("a single token attends to itself with weight 1") {
    const Tensor x = random_tensor({1, 8}, rng, 1.0, false);
    std::vector<Tensor> weights;
    mha(x, &weights);
    REQUIRE(weights.size() == 2);
    for (const Tensor& w : weights) CHECK(w[0] == 1.0);
  }
  SUBCASE("rows of every head sum to one") {
    std::vector<Tensor> weights;
    mha(random_tensor({5, 8}, rng, 1.0, false), &weights);
    for (const Tensor& w : weights) {
      for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) total += w[i * 5 + j];
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
  SUBCASE("token permutation permutes outputs") {
    const Tensor x = random_tensor({4, 8}, rng, 1.0, false);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    const Tensor y = mha(x);
    const Tensor y_perm = mha(gather_rows(x, perm));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t e = 0; e < 8; ++e) CHECK(std::abs(y_perm[i * 8 + e] - y[perm[i] * 8 + e]) < 1e-9);
    }
  }
  SUBCASE("projection gradients match finite differences") {
    const Tensor x = random_tensor({4, 8}, rng, 1.0, false);
    nn::ParameterList params;
    mha.collect("mha", params);
    std::vector<Tensor> inputs;
    for (const auto& p : params) inputs.push_back(p.value);
    CHECK(max_gradient_error([&] { return project(mha(x)); }, inputs) < 1e-4);
  }
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(11);
  const Tensor x = Tensor::full({1000}, 1.0);
  const Tensor y = dropout(x, 0.25, rng);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK((y[i] == 0.0 || y[i] == doctest::Approx(1.0 / 0.75)));
    kept += y[i] != 0.0;
  }
  CHECK(kept > 650);
  CHECK(kept < 850);
  CHECK_THROWS_AS(dropout(x, 1.0, rng), ConfigError);
  const Tensor same = dropout(x, 0.0, rng);
  for (std::size_t i = 0; i < 1000; ++i) CHECK(same[i] == 1.0);
}

TEST_CASE("identical inputs give bit-identical outputs") {
  std::mt19937_64 r1(12), r2(12);
  const Tensor a = random_tensor({3, 8, 8}, r1, 1.0, false), b = random_tensor({3, 8, 8}, r2, 1.0, false);
  std::mt19937_64 k1(13), k2(13);
  const Tensor ka = random_tensor({2, 3, 3, 3}, k1, 1.0, false), kb = random_tensor({2, 3, 3, 3}, k2, 1.0, false);
  const Tensor ya = softmax(conv2d(a, ka, Tensor(), {.padding = 1}), 0);
  const Tensor yb = softmax(conv2d(b, kb, Tensor(), {.padding = 1}), 0);
  for (std::size_t i = 0; i < ya.numel(); ++i) CHECK(ya[i] == yb[i]);
}

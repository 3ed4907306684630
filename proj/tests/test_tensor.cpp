#include <cstring>
#include <cmath>
#include <map>

#include "doctest.h"
#include "grad_cases.hpp"
#include "mmfm/tensor.hpp"

using namespace mmfm;

namespace {

std::vector<double> values(const Var<double>& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST_CASE("matmul examples") {
  Tape<double> t;
  auto id = t.leaf({2, 2}, {1, 0, 0, 1});
  auto b = t.leaf({2, 2}, {3, 4, 5, 6});
  CHECK(values(matmul(id, b)) == std::vector<double>{3, 4, 5, 6});

  auto row = t.leaf({1, 2}, {1, 2});
  auto col = t.leaf({2, 1}, {3, 4});
  auto c = matmul(row, col);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> t;
  auto a = t.leaf({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.leaf({2, 3}, std::vector<double>(6, 1.0));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x3]", msg.find("[2x3]") + 1) != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  Tape<double> t;
  auto z = softmax_rows(t.leaf({1, 3}, {0, 0, 0}));
  for (double p : z.value()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto s = softmax_rows(t.leaf({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  CHECK(s.value()[0] == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(s.value()[1] == doctest::Approx(2.0 / 6).epsilon(1e-14));
  CHECK(s.value()[2] == doctest::Approx(3.0 / 6).epsilon(1e-14));
}

TEST_CASE("gradient of sum(softmax) is zero") {
  Tape<double> t;
  auto x = t.leaf({3, 4}, gradcheck::random_values(12, 5), true);
  auto loss = sum(softmax_rows(x));
  t.backward(loss);
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("softmax rows sum to one") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Tape<double> t;
    const int rows = 1 + static_cast<int>(seed % 5), cols = 2 + static_cast<int>(seed % 7);
    auto y = softmax_rows(t.leaf({rows, cols}, gradcheck::random_values(static_cast<std::size_t>(rows * cols), seed, 5.0)));
    for (int r = 0; r < rows; ++r) {
      double s = 0;
      for (int c = 0; c < cols; ++c) {
        const double p = y.value()[static_cast<std::size_t>(r * cols + c)];
        CHECK(p >= 0.0);
        s += p;
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("cross entropy examples") {
  Tape<double> t;
  for (int v : {2, 7, 512}) {
    auto loss = cross_entropy(t.leaf({1, v}, std::vector<double>(static_cast<std::size_t>(v), 0.3)), std::vector<int>{1});
    CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-13));
  }
  auto certain = cross_entropy(t.leaf({1, 3}, {-1e3, 0, -1e3}), std::vector<int>{1});
  CHECK(certain.item() == 0.0);
  auto two = cross_entropy(t.leaf({1, 2}, {0, std::log(3.0)}), std::vector<int>{0});
  CHECK(two.item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy(t.leaf({1, 2}, {0, 0}), std::vector<int>{2}), IndexError);
}

TEST_CASE("backward contracts") {
  SUBCASE("sum of parameters has unit gradient") {
    Tape<double> t;
    auto p = t.leaf({3, 2}, gradcheck::random_values(6, 3), true);
    t.backward(sum(p));
    for (double g : p.grad()) CHECK(g == 1.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape<double> t;
    auto p = t.leaf({3, 2}, gradcheck::random_values(6, 3), true);
    CHECK_THROWS_AS(t.backward(p), ContractError);
  }
  SUBCASE("retained attention gets gradients with frozen parameters") {
    Tape<double> t(true);
    auto q = t.leaf({3, 2}, gradcheck::random_values(6, 1), false);
    auto k = t.leaf({3, 2}, gradcheck::random_values(6, 2), false);
    auto v = t.leaf({3, 2}, gradcheck::random_values(6, 3), false);
    auto a = softmax_rows(causal_mask(matmul_nt(q, k), 0));
    t.retain_attention(0, 0, a);
    auto out = matmul(a, v);
    auto loss = pick(out, 2, 1);
    t.backward(loss);
    REQUIRE(t.retained().size() == 1);
    CHECK(a.grad().size() == 9);
    CHECK(q.grad().empty());
    double mass = 0;
    for (double g : a.grad()) mass += std::abs(g);
    CHECK(mass > 0);
  }
  SUBCASE("retention disabled registers nothing") {
    Tape<double> t(false);
    auto a = softmax_rows(t.leaf({2, 2}, {1, 2, 3, 4}));
    t.retain_attention(0, 0, a);
    CHECK(t.retained().empty());
    CHECK_FALSE(a.requires_grad());
  }
}

TEST_CASE("composite sum((xW)^2) matches finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto r = gradcheck::check(
        [](Tape<double>&, const std::vector<Var<double>>& v) {
          auto y = matmul(v[0], v[1]);
          return sum(mul(y, y));
        },
        {gradcheck::random_input({3, 4}, seed), gradcheck::random_input({4, 2}, seed + 100)});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("matmul gradient of sum(AB) at random 3x3 inputs") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto r = gradcheck::check([](Tape<double>&, const std::vector<Var<double>>& v) { return sum(matmul(v[0], v[1])); },
                              {gradcheck::random_input({3, 3}, seed), gradcheck::random_input({3, 3}, seed + 7)});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("every primitive passes finite-difference checks on 10 instances") {
  std::map<std::string, double> worst;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (auto& c : gradcheck::primitive_cases(seed * 7919)) {
      const auto r = gradcheck::check(c.build, c.inputs);
      worst[c.op] = std::max(worst[c.op], r.max_rel_error);
    }
  }
  for (const auto& [op, err] : worst) {
    INFO(op);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("trailing-dimension broadcast only") {
  Tape<double> t;
  auto a = t.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = t.leaf({3}, {10, 20, 30});
  CHECK(values(add(a, b)) == std::vector<double>{11, 22, 33, 14, 25, 36});
  CHECK(values(mul(a, b)) == std::vector<double>{10, 40, 90, 40, 100, 180});
  auto col = t.leaf({2, 1}, {1, 2});
  CHECK_THROWS_AS(add(a, col), DimensionError);
  CHECK_THROWS_AS(mul(a, t.leaf({2}, {1, 2})), DimensionError);
}

TEST_CASE("causal mask with bidirectional prefix") {
  Tape<double> t;
  auto a = softmax_rows(causal_mask(t.leaf({4, 4}, std::vector<double>(16, 0.0)), 2));
  const auto v = a.value();
  // rows 0,1 see the 2-token prefix; rows 2,3 are causal
  CHECK(v[0 * 4 + 1] == doctest::Approx(0.5));
  CHECK(v[0 * 4 + 2] == 0.0);
  CHECK(v[1 * 4 + 0] == doctest::Approx(0.5));
  CHECK(v[2 * 4 + 3] == 0.0);
  CHECK(v[3 * 4 + 3] == doctest::Approx(0.25));
}

TEST_CASE("non-finite results are rejected") {
  Tape<double> t;
  auto a = t.leaf({1, 2}, {1e300, 1.0});
  CHECK_THROWS_AS(scale(a, 1e300), NumericError);
  CHECK_THROWS_AS(t.leaf({1}, {std::nan("")}), NumericError);
}

TEST_CASE("determinism: same op sequence is bit identical") {
  auto run = [] {
    Tape<float> t;
    auto x = t.leaf({4, 8}, [] {
      std::vector<float> v(32);
      CounterRng rng(42);
      for (float& f : v) f = static_cast<float>(rng.normal());
      return v;
    }());
    auto w = t.leaf({8, 8}, std::vector<float>(64, 0.125f), true);
    auto y = softmax_rows(gelu(matmul(x, w)));
    auto loss = mean(mul(y, y));
    t.backward(loss);
    std::vector<float> out(y.value().begin(), y.value().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("operands from different tapes are rejected") {
  Tape<double> t1, t2;
  auto a = t1.leaf({1, 1}, {1});
  auto b = t2.leaf({1, 1}, {1});
  CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("counter rng reproduces splitmix64") {
  // Reference values of SplitMix64 seeded with 0.
  CounterRng rng(0);
  CHECK(rng.next_u64() == 0xE220A8397B1DCDAFULL);
  CHECK(rng.next_u64() == 0x6E789E6AA1B965F4ULL);
  CHECK(CounterRng::at(0, 1) == 0x6E789E6AA1B965F4ULL);
}

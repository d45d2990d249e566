#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "dualrd/ops.hpp"
#include "dualrd/random.hpp"
#include "dualrd/tensor.hpp"
#include "oracles.hpp"

using namespace dualrd;

namespace {

Tensor<double> randn(Shape shape, uint64_t seed, double scale = 1.0,
                     bool rg = true) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape), rg);
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.normal();
  return t;
}

/// Backward-vs-finite-difference check of `fn` w.r.t. each listed leaf.
void check_grads(const std::vector<Tensor<double>*>& leaves,
                 const std::function<Tensor<double>()>& fn,
                 double rtol = 1e-5) {
  auto loss = fn();
  Tape<double>::active().backward(loss);
  for (auto* leaf : leaves) {
    auto fd = oracles::finite_diff(*leaf, [&]() { return fn().item(); });
    std::vector<double> an(leaf->grad_vec().begin(), leaf->grad_vec().end());
    double err = oracles::max_rel_err(an, fd, 1e-6);
    INFO("max rel err " << err);
    CHECK(err < rtol);
    leaf->zero_grad();
  }
}

}  // namespace

TEST_CASE("backward populates leaf gradients and clears the tape") {
  Tensor<double> x({3}, {1, 2, 3}, true);
  auto loss = sum(x);
  size_t nops = Tape<double>::active().num_entries();
  CHECK(nops > 0);
  size_t executed = Tape<double>::active().backward(loss);
  CHECK(executed == nops);
  CHECK(Tape<double>::active().num_entries() == 0);
  for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  // analytic derivative of sum(x^2)
  Tensor<double> y({2}, {1, 2}, true);
  auto l2 = sum(mul(y, y));
  Tape<double>::active().backward(l2);
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);
}

TEST_CASE("backward rejects non-scalar loss and empty tape") {
  Tensor<double> x({2}, {1, 2}, true);
  auto y = mul(x, x);
  REQUIRE_THROWS_WITH(Tape<double>::active().backward(y),
                      Catch::Matchers::ContainsSubstring("scalar"));
  Tape<double>::active().clear();
  auto s = sum(x);
  Tape<double>::active().backward(s);
  REQUIRE_THROWS_WITH(Tape<double>::active().backward(s),
                      Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("backward flags non-finite gradients with the node id") {
  Tensor<double> x({1}, {0.0}, true);
  auto y = log_op(x);  // -inf forward, nan/inf grads downstream
  auto loss = sum(mul(y, y));
  REQUIRE_THROWS_WITH(Tape<double>::active().backward(loss),
                      Catch::Matchers::ContainsSubstring("node"));
  Tape<double>::active().clear();
  x.zero_grad();
}

TEST_CASE("tape entries are topologically ordered") {
  Tensor<double> a({2}, {1, 2}, true);
  Tensor<double> b({2}, {3, 4}, true);
  auto c = mul(add(a, b), sub(a, b));
  auto loss = sum(c);
  for (const auto& e : Tape<double>::active().entries())
    for (int64_t in : e.in_ids) CHECK(in < e.out_id);
  Tape<double>::active().backward(loss);
}

TEST_CASE("fan-out accumulates gradient once per use") {
  Tensor<double> x({1}, {3.0}, true);
  auto y = add(x, x);  // dy/dx = 2
  auto loss = sum(y);
  Tape<double>::active().backward(loss);
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("stop_gradient blocks ancestors") {
  Tensor<double> x({3}, {1, 2, 3}, true);
  auto d = stop_gradient(x);
  for (int64_t i = 0; i < 3; ++i) CHECK(d.data()[i] == x.data()[i]);
  CHECK_FALSE(d.requires_grad());

  auto loss = add(sum(stop_gradient(mul(x, x))), sum(x));
  Tape<double>::active().backward(loss);
  for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);  // only sum(x)
}

TEST_CASE("gradcheck: elementwise binary ops") {
  auto a = randn({3, 4}, 1);
  auto b = randn({3, 4}, 2);
  // keep b away from zero for div
  for (int64_t i = 0; i < b.size(); ++i)
    b.data()[i] += b.data()[i] >= 0 ? 1.0 : -1.0;
  check_grads({&a, &b}, [&] { return sum(mul(add(a, b), a)); });
  check_grads({&a, &b}, [&] { return sum(mul(sub(a, b), sub(a, b))); });
  check_grads({&a, &b}, [&] { return sum(div(a, b)); });
}

TEST_CASE("gradcheck: broadcast reduces gradient over expanded dims") {
  auto a = randn({2, 3, 4}, 3);
  auto b = randn({4}, 4);
  auto c = randn({3, 1}, 5);
  check_grads({&a, &b}, [&] { return sum(mul(a, b)); });
  check_grads({&a, &c}, [&] { return sum(mul(a, c)); });
}

TEST_CASE("gradcheck: matmul vs finite differences at 1e-4 (float64)") {
  auto a = randn({3, 4}, 6);
  auto b = randn({4, 5}, 7);
  check_grads({&a, &b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); },
              1e-4);
  auto batched = randn({2, 3, 4}, 8);
  check_grads({&batched, &b}, [&] { return sum(matmul(batched, b)); }, 1e-4);
}

TEST_CASE("gradcheck: unary ops") {
  auto x = randn({3, 3}, 9, 0.8);
  for (int64_t i = 0; i < x.size(); ++i)
    x.data()[i] += x.data()[i] >= 0 ? 0.5 : -0.5;  // avoid kinks at 0
  check_grads({&x}, [&] { return sum(exp_op(x)); });
  check_grads({&x}, [&] { return sum(relu(x)); });
  check_grads({&x}, [&] { return sum(gelu(x)); });
  check_grads({&x}, [&] { return sum(abs_op(x)); });
  auto pos = randn({3, 3}, 10, 0.3);
  for (int64_t i = 0; i < pos.size(); ++i)
    pos.data()[i] = std::abs(pos.data()[i]) + 0.5;
  check_grads({&pos}, [&] { return sum(log_op(pos)); });
  check_grads({&pos}, [&] { return sum(sqrt_op(pos)); });
  check_grads({&pos}, [&] { return sum(clamp_min(pos, 0.7)); });
}

TEST_CASE("gradcheck: reductions and softmax") {
  auto x = randn({3, 5}, 11);
  check_grads({&x}, [&] { return sum(mul(sum(x, 1, true), sum(x, 1, true))); });
  check_grads({&x}, [&] { return sum(mul(mean(x, 0), mean(x, 0))); });
  check_grads({&x}, [&] { return max(x); });
  check_grads({&x}, [&] { return sum(mul(max(x, 1), max(x, 1))); });
  check_grads({&x}, [&] { return sum(mul(softmax(x, 1), randn({3, 5}, 12, 1.0, false))); });
}

TEST_CASE("gradcheck: shape ops") {
  auto x = randn({2, 3, 4}, 13);
  auto w = randn({4, 3, 2}, 14, 1.0, false);
  check_grads({&x}, [&] { return sum(mul(permute(x, {2, 1, 0}), w)); });
  check_grads({&x}, [&] {
    return sum(mul(reshape(x, {6, 4}), reshape(x, {6, 4})));
  });
}

TEST_CASE("gradcheck: layer_norm, cosine_map, bilinear, avg_pool") {
  auto x = randn({2, 6}, 15);
  auto g = randn({6}, 16, 0.5);
  auto b = randn({6}, 17, 0.5);
  check_grads({&x, &g, &b}, [&] {
    auto y = layer_norm(x, g, b);
    return sum(mul(y, y));
  }, 1e-4);

  auto fa = randn({1, 3, 2, 2}, 18);
  auto fb = randn({1, 3, 2, 2}, 19);
  check_grads({&fa, &fb}, [&] { return sum(cosine_map(fa, fb)); }, 1e-4);

  auto img = randn({1, 2, 3, 3}, 20);
  check_grads({&img}, [&] {
    auto up = bilinear_resize(img, 7, 5);
    return sum(mul(up, up));
  }, 1e-4);
  check_grads({&img}, [&] {
    auto up = bilinear_resize(img, 2, 2);  // downscale path
    return sum(mul(up, up));
  }, 1e-4);

  auto pool_in = randn({1, 1, 4, 6}, 21);
  check_grads({&pool_in}, [&] {
    auto p = avg_pool2d(pool_in, 2, 3);
    return sum(mul(p, p));
  });
}

TEST_CASE("gradcheck: composed expression") {
  auto a = randn({2, 3}, 22);
  auto w = randn({3, 3}, 23);
  check_grads({&a, &w}, [&] {
    auto h = gelu(matmul(a, w));
    auto p = softmax(h, -1);
    return mean(mul(p, h));
  }, 1e-4);
}

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "evflow/autograd.hpp"

using namespace evflow;
using namespace evflow::ad;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double offset = 0.0) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (auto& x : m.data) x = nd(rng) + offset;
  return m;
}

using OpFn = std::function<Var(Graph&, std::vector<Var>&)>;

// Projects the op output onto fixed random weights and compares the tape's
// gradient with central differences of that scalar.
void check_op(const char* name, std::vector<Matrix> inputs, const OpFn& op, double tol = 1e-6) {
  CAPTURE(name);
  std::vector<Parameter> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back({"in" + std::to_string(i), inputs[i], {}});

  Matrix proj;
  auto evaluate = [&](bool grad) {
    Graph g(grad);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(g.param(p));
    Var out = op(g, vars);
    if (proj.empty()) {
      std::mt19937_64 rng(99);
      proj = random_matrix(out.rows(), out.cols(), rng);
    }
    Var loss = sum(mul(out, g.constant(proj)));
    if (grad) g.backward(loss);
    return loss.scalar();
  };
  evaluate(true);

  const double h = 1e-5;
  std::size_t checked = 0;
  for (auto& p : params) {
    REQUIRE(p.grad.same_shape(p.value));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data[i];
      p.value.data[i] = orig + h;
      const double up = evaluate(false);
      p.value.data[i] = orig - h;
      const double down = evaluate(false);
      p.value.data[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = p.grad.data[i];
      CHECK(std::abs(fd - an) <= tol * std::max({1.0, std::abs(fd), std::abs(an)}));
      ++checked;
    }
  }
  CHECK(checked > 0);
}

}  // namespace

TEST_CASE("elementwise ops") {
  std::mt19937_64 rng(1);
  auto a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
  check_op("add", {a, b}, [](Graph&, auto& v) { return add(v[0], v[1]); });
  check_op("sub", {a, b}, [](Graph&, auto& v) { return sub(v[0], v[1]); });
  check_op("mul", {a, b}, [](Graph&, auto& v) { return mul(v[0], v[1]); });
  check_op("mul-self", {a}, [](Graph&, auto& v) { return mul(v[0], v[0]); });
  check_op("scale", {a}, [](Graph&, auto& v) { return scale(v[0], -1.7); });
  check_op("add_scalar", {a}, [](Graph&, auto& v) { return add_scalar(v[0], 0.3); });
  check_op("square", {a}, [](Graph&, auto& v) { return square(v[0]); });
  check_op("reciprocal", {random_matrix(3, 4, rng, 4.0)}, [](Graph&, auto& v) { return reciprocal(v[0]); });
  check_op("sigmoid", {a}, [](Graph&, auto& v) { return sigmoid(v[0]); });
  check_op("silu", {a}, [](Graph&, auto& v) { return silu(v[0]); });
  check_op("gelu", {a}, [](Graph&, auto& v) { return gelu(v[0]); });
  check_op("sin", {a}, [](Graph&, auto& v) { return sin(v[0]); });
  check_op("cos", {a}, [](Graph&, auto& v) { return cos(v[0]); });
}

TEST_CASE("linear algebra and broadcasting ops") {
  std::mt19937_64 rng(2);
  auto x = random_matrix(6, 4, rng), w = random_matrix(4, 5, rng), b = random_matrix(1, 5, rng);
  check_op("matmul", {x, w}, [](Graph&, auto& v) { return matmul(v[0], v[1]); });
  check_op("linear", {x, w, b}, [](Graph&, auto& v) { return linear(v[0], v[1], v[2]); });
  auto r = random_matrix(1, 4, rng);
  check_op("mul_row", {x, r}, [](Graph&, auto& v) { return mul_row(v[0], v[1]); });
  auto s = random_matrix(2, 4, rng), s1 = random_matrix(2, 1, rng);
  check_op("group_mul", {x, s}, [](Graph&, auto& v) { return group_mul(v[0], v[1]); });
  check_op("group_mul-col", {x, s1}, [](Graph&, auto& v) { return group_mul(v[0], v[1]); });
  check_op("group_add", {x, s}, [](Graph&, auto& v) { return group_add(v[0], v[1]); });
  check_op("group_add-col", {x, s1}, [](Graph&, auto& v) { return group_add(v[0], v[1]); });
  auto p = random_matrix(3, 4, rng);
  check_op("add_tiled", {x, p}, [](Graph&, auto& v) { return add_tiled(v[0], v[1]); });
  check_op("tile_rows", {p}, [](Graph&, auto& v) { return tile_rows(v[0], 3); });
}

TEST_CASE("shape ops") {
  std::mt19937_64 rng(3);
  auto x = random_matrix(6, 4, rng), y = random_matrix(6, 3, rng);
  check_op("reshape", {x}, [](Graph&, auto& v) { return reshape(v[0], 3, 8); });
  check_op("concat_cols", {x, y}, [](Graph&, auto& v) { return concat_cols(v[0], v[1]); });
  check_op("slice_cols", {x}, [](Graph&, auto& v) { return slice_cols(v[0], 1, 3); });
}

TEST_CASE("normalization, attention, dropout and reductions") {
  std::mt19937_64 rng(4);
  auto x = random_matrix(5, 6, rng);
  check_op("layer_norm", {x}, [](Graph&, auto& v) { return layer_norm(v[0]); });

  auto q = random_matrix(2 * 3, 4, rng), k = random_matrix(2 * 5, 4, rng), vv = random_matrix(2 * 5, 4, rng);
  check_op("attention", {q, k, vv}, [](Graph&, auto& v) { return attention(v[0], v[1], v[2], 2, 2); });
  check_op("attention-self", {q}, [](Graph&, auto& v) { return attention(v[0], v[0], v[0], 2, 1); });
  check_op("attention-dropout", {q, k, vv}, [](Graph&, auto& v) {
    Rng r(7);
    return attention(v[0], v[1], v[2], 2, 2, 0.3, &r);
  });
  check_op("dropout", {x}, [](Graph&, auto& v) {
    Rng r(8);
    return dropout(v[0], 0.4, &r);
  });

  auto y = random_matrix(5, 6, rng);
  check_op("sum", {x}, [](Graph&, auto& v) { return sum(v[0]); });
  check_op("mean", {x}, [](Graph&, auto& v) { return mean(v[0]); });
  check_op("mse", {x, y}, [](Graph&, auto& v) { return mse(v[0], v[1]); });
}

TEST_CASE("composite chain with shared subexpressions") {
  std::mt19937_64 rng(5);
  auto x = random_matrix(4, 4, rng), w = random_matrix(4, 4, rng);
  check_op("chain", {x, w}, [](Graph&, auto& v) {
    Var h = gelu(matmul(v[0], v[1]));
    Var n = layer_norm(add(h, v[0]));
    return mul(silu(n), sigmoid(h));
  });
}

TEST_CASE("gradients accumulate across backward passes") {
  Parameter p{"p", Matrix(1, 2, 1.5), {}};
  for (int i = 0; i < 2; ++i) {
    Graph g;
    Var x = g.param(p);
    g.backward(sum(scale(x, 3.0)));
  }
  CHECK(p.grad.data == std::vector<double>{6.0, 6.0});
}

TEST_CASE("constants get no gradient and no-grad graphs skip backward") {
  Parameter p{"p", Matrix(1, 2, 1.0), {}};
  Graph g(false);
  Var x = g.param(p);
  Var y = sum(mul(x, g.constant(Matrix(1, 2, 2.0))));
  CHECK(y.scalar() == 4.0);
  CHECK_FALSE(g.needs_grad(y));
}

TEST_CASE("shape errors are reported") {
  Graph g;
  Var a = g.constant(Matrix(2, 3));
  Var b = g.constant(Matrix(3, 2));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(reshape(a, 4, 2), std::invalid_argument);
}

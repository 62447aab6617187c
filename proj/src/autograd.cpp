#include "evflow/autograd.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "evflow/kernels.hpp"

namespace evflow::ad {

const Matrix& Var::value() const { return graph_->value(*this); }

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = grad_enabled_ ? &p : nullptr;
  n.needs_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows, n.value.cols);
  return n.grad;
}

Var Graph::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.graph_ != this) throw std::invalid_argument("autograd: input belongs to another graph");
      if (nodes_[static_cast<std::size_t>(in.id_)].needs_grad) n.needs_grad = true;
    }
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Graph::backward(Var root) {
  if (root.graph_ != this) throw std::invalid_argument("autograd: root belongs to another graph");
  Node& r = nodes_[static_cast<std::size_t>(root.id_)];
  if (r.value.size() != 1) throw std::invalid_argument("autograd: backward root must be 1x1, got " + r.value.shape_str());
  if (!r.needs_grad) return;
  grad(root).data[0] += 1.0;
  for (int i = root.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, Var(this, i));
    if (n.param) {
      Matrix& pg = n.param->grad;
      if (pg.empty()) pg = Matrix(n.param->value.rows, n.param->value.cols);
      for (std::size_t k = 0; k < pg.size(); ++k) pg.data[k] += n.grad.data[k];
    }
  }
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <class F, class D>
Var unary(Var a, F f, D deriv) {
  Graph& g = a.graph();
  const Matrix& x = a.value();
  Matrix y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  return g.record(std::move(y), {a}, [a, deriv](Graph& g, Var self) {
    const Matrix& x = g.value(a);
    const Matrix& y = g.value(self);
    const Matrix& gy = g.grad_or_empty(self);
    Matrix& gx = g.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += gy.data[i] * deriv(x.data[i], y.data[i]);
  });
}

void accumulate(Matrix& dst, const Matrix& src, double sign = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += sign * src.data[i];
}

// Row-block size for group ops: x has G*n rows, s has G rows.
std::size_t block_rows(const Matrix& x, const Matrix& s, const char* op) {
  if (s.rows == 0 || x.rows % s.rows != 0 || (s.cols != x.cols && s.cols != 1))
    throw std::invalid_argument(std::string(op) + ": cannot broadcast " + s.shape_str() + " over " + x.shape_str());
  return x.rows / s.rows;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix y = a.value();
  accumulate(y, b.value());
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    if (g.needs_grad(a)) accumulate(g.grad(a), gy);
    if (g.needs_grad(b)) accumulate(g.grad(b), gy);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix y = a.value();
  accumulate(y, b.value(), -1.0);
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    if (g.needs_grad(a)) accumulate(g.grad(a), gy);
    if (g.needs_grad(b)) accumulate(g.grad(b), gy, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix y(av.rows, av.cols);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = av.data[i] * bv.data[i];
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    if (g.needs_grad(a)) {
      const Matrix& bv = g.value(b);
      Matrix& ga = g.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += gy.data[i] * bv.data[i];
    }
    if (g.needs_grad(b)) {
      const Matrix& av = g.value(a);
      Matrix& gb = g.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += gy.data[i] * av.data[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var reciprocal(Var a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var sigmoid(Var a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var silu(Var a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double th = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
      });
}

Var sin(Var a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols != bv.rows)
    throw std::invalid_argument("matmul: inner dimensions differ " + av.shape_str() + " * " + bv.shape_str());
  Matrix y(av.rows, bv.cols);
  kernels::gemm_nn(av.data, bv.data, y.data, av.rows, av.cols, bv.cols, false);
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const Matrix& av = g.value(a);
    const Matrix& bv = g.value(b);
    if (g.needs_grad(a)) kernels::gemm_nt(gy.data, bv.data, g.grad(a).data, av.rows, bv.cols, av.cols, true);
    if (g.needs_grad(b)) kernels::gemm_tn(av.data, gy.data, g.grad(b).data, av.rows, av.cols, bv.cols, true);
  });
}

Var linear(Var x, Var w, Var b) {
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  const Matrix& bv = b.value();
  if (xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols)
    throw std::invalid_argument("linear: incompatible shapes x" + xv.shape_str() + " w" + wv.shape_str() + " b" +
                                bv.shape_str());
  Matrix y(xv.rows, wv.cols);
  for (std::size_t r = 0; r < y.rows; ++r) std::copy(bv.data.begin(), bv.data.end(), y.row(r).begin());
  kernels::gemm_nn(xv.data, wv.data, y.data, xv.rows, xv.cols, wv.cols, true);
  return x.graph().record(std::move(y), {x, w, b}, [x, w, b](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const Matrix& xv = g.value(x);
    const Matrix& wv = g.value(w);
    if (g.needs_grad(x)) kernels::gemm_nt(gy.data, wv.data, g.grad(x).data, xv.rows, wv.cols, xv.cols, true);
    if (g.needs_grad(w)) kernels::gemm_tn(xv.data, gy.data, g.grad(w).data, xv.rows, xv.cols, wv.cols, true);
    if (g.needs_grad(b)) {
      Matrix& gb = g.grad(b);
      for (std::size_t r = 0; r < gy.rows; ++r)
        for (std::size_t c = 0; c < gy.cols; ++c) gb.data[c] += gy(r, c);
    }
  });
}

Var mul_row(Var x, Var r) {
  const Matrix& xv = x.value();
  const Matrix& rv = r.value();
  if (rv.rows != 1 || rv.cols != xv.cols)
    throw std::invalid_argument("mul_row: row " + rv.shape_str() + " does not match " + xv.shape_str());
  Matrix y(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.rows; ++i)
    for (std::size_t c = 0; c < xv.cols; ++c) y(i, c) = xv(i, c) * rv.data[c];
  return x.graph().record(std::move(y), {x, r}, [x, r](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const Matrix& xv = g.value(x);
    const Matrix& rv = g.value(r);
    if (g.needs_grad(x)) {
      Matrix& gx = g.grad(x);
      for (std::size_t i = 0; i < xv.rows; ++i)
        for (std::size_t c = 0; c < xv.cols; ++c) gx(i, c) += gy(i, c) * rv.data[c];
    }
    if (g.needs_grad(r)) {
      Matrix& gr = g.grad(r);
      for (std::size_t i = 0; i < xv.rows; ++i)
        for (std::size_t c = 0; c < xv.cols; ++c) gr.data[c] += gy(i, c) * xv(i, c);
    }
  });
}

Var group_mul(Var x, Var s) {
  const Matrix& xv = x.value();
  const Matrix& sv = s.value();
  const std::size_t n = block_rows(xv, sv, "group_mul");
  const bool scalar = sv.cols == 1 && xv.cols != 1;
  Matrix y(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.rows; ++i) {
    const std::size_t gi = i / n;
    for (std::size_t c = 0; c < xv.cols; ++c) y(i, c) = xv(i, c) * sv(gi, scalar ? 0 : c);
  }
  return x.graph().record(std::move(y), {x, s}, [x, s, n, scalar](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const Matrix& xv = g.value(x);
    const Matrix& sv = g.value(s);
    if (g.needs_grad(x)) {
      Matrix& gx = g.grad(x);
      for (std::size_t i = 0; i < xv.rows; ++i)
        for (std::size_t c = 0; c < xv.cols; ++c) gx(i, c) += gy(i, c) * sv(i / n, scalar ? 0 : c);
    }
    if (g.needs_grad(s)) {
      Matrix& gs = g.grad(s);
      for (std::size_t i = 0; i < xv.rows; ++i)
        for (std::size_t c = 0; c < xv.cols; ++c) gs(i / n, scalar ? 0 : c) += gy(i, c) * xv(i, c);
    }
  });
}

Var group_add(Var x, Var s) {
  const Matrix& xv = x.value();
  const Matrix& sv = s.value();
  const std::size_t n = block_rows(xv, sv, "group_add");
  const bool scalar = sv.cols == 1 && xv.cols != 1;
  Matrix y(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.rows; ++i)
    for (std::size_t c = 0; c < xv.cols; ++c) y(i, c) = xv(i, c) + sv(i / n, scalar ? 0 : c);
  return x.graph().record(std::move(y), {x, s}, [x, s, n, scalar](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    if (g.needs_grad(x)) accumulate(g.grad(x), gy);
    if (g.needs_grad(s)) {
      Matrix& gs = g.grad(s);
      for (std::size_t i = 0; i < gy.rows; ++i)
        for (std::size_t c = 0; c < gy.cols; ++c) gs(i / n, scalar ? 0 : c) += gy(i, c);
    }
  });
}

Var add_tiled(Var x, Var p) {
  const Matrix& xv = x.value();
  const Matrix& pv = p.value();
  if (pv.cols != xv.cols || pv.rows == 0 || xv.rows % pv.rows != 0)
    throw std::invalid_argument("add_tiled: cannot tile " + pv.shape_str() + " over " + xv.shape_str());
  Matrix y = xv;
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t c = 0; c < y.cols; ++c) y(i, c) += pv(i % pv.rows, c);
  return x.graph().record(std::move(y), {x, p}, [x, p](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    if (g.needs_grad(x)) accumulate(g.grad(x), gy);
    if (g.needs_grad(p)) {
      Matrix& gp = g.grad(p);
      for (std::size_t i = 0; i < gy.rows; ++i)
        for (std::size_t c = 0; c < gy.cols; ++c) gp(i % gp.rows, c) += gy(i, c);
    }
  });
}

Var tile_rows(Var p, std::size_t times) {
  const Matrix& pv = p.value();
  Matrix y(pv.rows * times, pv.cols);
  for (std::size_t t = 0; t < times; ++t)
    std::copy(pv.data.begin(), pv.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(t * pv.size()));
  return p.graph().record(std::move(y), {p}, [p](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    Matrix& gp = g.grad(p);
    for (std::size_t i = 0; i < gy.size(); ++i) gp.data[i % gp.size()] += gy.data[i];
  });
}

Var reshape(Var x, std::size_t rows, std::size_t cols) {
  const Matrix& xv = x.value();
  if (rows * cols != xv.size())
    throw std::invalid_argument("reshape: " + xv.shape_str() + " cannot become [" + std::to_string(rows) + "x" +
                                std::to_string(cols) + "]");
  Matrix y(rows, cols, xv.data);
  return x.graph().record(std::move(y), {x}, [x](Graph& g, Var self) {
    accumulate(g.grad(x), g.grad_or_empty(self));
  });
}

Var concat_cols(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows != bv.rows)
    throw std::invalid_argument("concat_cols: row counts differ " + av.shape_str() + " vs " + bv.shape_str());
  Matrix y(av.rows, av.cols + bv.cols);
  for (std::size_t r = 0; r < y.rows; ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), y.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), y.row(r).begin() + static_cast<std::ptrdiff_t>(av.cols));
  }
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const std::size_t ac = g.value(a).cols;
    if (g.needs_grad(a)) {
      Matrix& ga = g.grad(a);
      for (std::size_t r = 0; r < gy.rows; ++r)
        for (std::size_t c = 0; c < ac; ++c) ga(r, c) += gy(r, c);
    }
    if (g.needs_grad(b)) {
      Matrix& gb = g.grad(b);
      for (std::size_t r = 0; r < gy.rows; ++r)
        for (std::size_t c = 0; c < gb.cols; ++c) gb(r, c) += gy(r, ac + c);
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Matrix& xv = x.value();
  if (begin >= end || end > xv.cols) throw std::invalid_argument("slice_cols: bad range on " + xv.shape_str());
  Matrix y(xv.rows, end - begin);
  for (std::size_t r = 0; r < y.rows; ++r)
    for (std::size_t c = 0; c < y.cols; ++c) y(r, c) = xv(r, begin + c);
  return x.graph().record(std::move(y), {x}, [x, begin](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    Matrix& gx = g.grad(x);
    for (std::size_t r = 0; r < gy.rows; ++r)
      for (std::size_t c = 0; c < gy.cols; ++c) gx(r, begin + c) += gy(r, c);
  });
}

Var layer_norm(Var x, double eps) {
  const Matrix& xv = x.value();
  Matrix y(xv.rows, xv.cols);
  auto inv_std = std::make_shared<std::vector<double>>(xv.rows);
  const double n = static_cast<double>(xv.cols);
  for (std::size_t r = 0; r < xv.rows; ++r) {
    double mu = 0.0;
    for (double v : xv.row(r)) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : xv.row(r)) var += (v - mu) * (v - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < xv.cols; ++c) y(r, c) = (xv(r, c) - mu) * is;
  }
  return x.graph().record(std::move(y), {x}, [x, inv_std](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const Matrix& y = g.value(self);
    Matrix& gx = g.grad(x);
    const double n = static_cast<double>(y.cols);
    for (std::size_t r = 0; r < y.rows; ++r) {
      double mg = 0.0;
      double mgy = 0.0;
      for (std::size_t c = 0; c < y.cols; ++c) {
        mg += gy(r, c);
        mgy += gy(r, c) * y(r, c);
      }
      mg /= n;
      mgy /= n;
      for (std::size_t c = 0; c < y.cols; ++c) gx(r, c) += (*inv_std)[r] * (gy(r, c) - mg - y(r, c) * mgy);
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t groups, std::size_t heads, double dropout, Rng* rng) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  if (groups == 0 || heads == 0 || qv.cols != kv.cols || kv.cols != vv.cols || !kv.same_shape(vv) ||
      qv.rows % groups != 0 || kv.rows % groups != 0 || qv.cols % heads != 0)
    throw std::invalid_argument("attention: incompatible shapes q" + qv.shape_str() + " k" + kv.shape_str() + " v" +
                                vv.shape_str());
  kernels::AttentionShape shape{groups, heads, qv.rows / groups, kv.rows / groups, qv.cols};
  auto probs = std::make_shared<std::vector<double>>(shape.prob_size());
  auto mask = std::make_shared<std::vector<double>>();
  if (dropout > 0.0) {
    if (!rng) throw std::invalid_argument("attention: dropout requires an rng");
    std::bernoulli_distribution keep(1.0 - dropout);
    const double s = 1.0 / (1.0 - dropout);
    mask->resize(shape.prob_size());
    for (double& m : *mask) m = keep(*rng) ? s : 0.0;
  }
  Matrix out(qv.rows, qv.cols);
  kernels::attention_forward(shape, qv.data, kv.data, vv.data, *mask, *probs, out.data);
  return q.graph().record(std::move(out), {q, k, v}, [q, k, v, shape, probs, mask](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    const Matrix& qv = g.value(q);
    const Matrix& kv = g.value(k);
    const Matrix& vv = g.value(v);
    Matrix dq(qv.rows, qv.cols);
    Matrix dk(kv.rows, kv.cols);
    Matrix dv(vv.rows, vv.cols);
    kernels::attention_backward(shape, qv.data, kv.data, vv.data, *mask, *probs, gy.data, dq.data, dk.data, dv.data);
    if (g.needs_grad(q)) accumulate(g.grad(q), dq);
    if (g.needs_grad(k)) accumulate(g.grad(k), dk);
    if (g.needs_grad(v)) accumulate(g.grad(v), dv);
  });
}

Var dropout(Var x, double rate, Rng* rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  if (!rng) throw std::invalid_argument("dropout: rate > 0 requires an rng");
  const Matrix& xv = x.value();
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (double& m : *mask) m = keep(*rng) ? s : 0.0;
  Matrix y(xv.rows, xv.cols);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = xv.data[i] * (*mask)[i];
  return x.graph().record(std::move(y), {x}, [x, mask](Graph& g, Var self) {
    const Matrix& gy = g.grad_or_empty(self);
    Matrix& gx = g.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += gy.data[i] * (*mask)[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return x.graph().record(Matrix(1, 1, s), {x}, [x](Graph& g, Var self) {
    const double gy = g.grad_or_empty(self).data[0];
    for (double& v : g.grad(x).data) v += gy;
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return x.graph().record(Matrix(1, 1, s / n), {x}, [x, n](Graph& g, Var self) {
    const double gy = g.grad_or_empty(self).data[0] / n;
    for (double& v : g.grad(x).data) v += gy;
  });
}

Var mse(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mse");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av.data[i] - bv.data[i];
    s += d * d;
  }
  return a.graph().record(Matrix(1, 1, s / n), {a, b}, [a, b, n](Graph& g, Var self) {
    const double gy = g.grad_or_empty(self).data[0] * 2.0 / n;
    const Matrix& av = g.value(a);
    const Matrix& bv = g.value(b);
    if (g.needs_grad(a)) {
      Matrix& ga = g.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += gy * (av.data[i] - bv.data[i]);
    }
    if (g.needs_grad(b)) {
      Matrix& gb = g.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] -= gy * (av.data[i] - bv.data[i]);
    }
  });
}

}  // namespace evflow::ad

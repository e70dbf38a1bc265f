#include "stylediff/autodiff.hpp"

#include <cmath>

#include "stylediff/error.hpp"

namespace stylediff {

namespace {

constexpr double kLayerNormEps = 1e-5;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_fwd(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_bwd(double x) {
  const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + th) +
         0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape plumbing

Var Tape::push_(Tensor value, bool requires_grad,
                std::function<void(Tape&)> backward) {
  Node n;
  if (requires_grad) n.grad = Tensor(value.shape());
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_(Var v) const {
  if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
    throw InputError("variable does not belong to this tape");
}

const Tensor& Tape::val(Var v) const {
  check_(v);
  return nodes_[static_cast<std::size_t>(v.idx)].value;
}

const Tensor& Tape::grad(Var v) const {
  check_(v);
  const Node& n = nodes_[static_cast<std::size_t>(v.idx)];
  if (!n.requires_grad)
    throw InputError("gradient requested for a non-differentiable node");
  return n.grad;
}

bool Tape::requires_grad(Var v) const {
  check_(v);
  return nodes_[static_cast<std::size_t>(v.idx)].requires_grad;
}

void Tape::accum_(Var v, const Tensor& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.idx)];
  if (!n.requires_grad) return;
  n.grad += g;
}

Var Tape::constant(Tensor value) { return push_(std::move(value), false); }

Var Tape::leaf(Tensor value) { return push_(std::move(value), true); }

Var Tape::param(const std::string& name, const Tensor& value) {
  auto it = param_index_.find(name);
  if (it != param_index_.end()) return Var{it->second};
  Var v = push_(value, true);
  nodes_[static_cast<std::size_t>(v.idx)].param_name = name;
  param_index_.emplace(name, v.idx);
  return v;
}

void Tape::backward(Var scalar_root) {
  if (val(scalar_root).numel() != 1)
    throw InputError("backward root must be a scalar");
  backward_seed(scalar_root, Tensor::full(1, 1, 1.0));
}

void Tape::backward_seed(Var root, const Tensor& seed) {
  check_(root);
  if (ran_backward_)
    throw InputError("tape backward already ran; tapes are single-use");
  if (!requires_grad(root))
    throw InputError("backward root does not require gradients");
  if (!val(root).same_shape(seed)) throw InputError("backward seed shape mismatch");
  ran_backward_ = true;
  grad_ref_(root) += seed;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this);
  }
}

std::map<std::string, Tensor> Tape::param_grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, idx] : param_index_)
    out.emplace(name, nodes_[static_cast<std::size_t>(idx)].grad);
  return out;
}

// ---------------------------------------------------------------------------
// Arithmetic

Var Tape::add(Var a, Var b) {
  Tensor out = val(a) + val(b);
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [a, b, o](Tape& t) {
      t.accum_(a, t.grad(o));
      t.accum_(b, t.grad(o));
    };
  return o;
}

Var Tape::sub(Var a, Var b) {
  Tensor out = val(a) - val(b);
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [a, b, o](Tape& t) {
      t.accum_(a, t.grad(o));
      Tensor gb = t.grad(o);
      gb *= -1.0;
      t.accum_(b, gb);
    };
  return o;
}

Var Tape::mul(Var a, Var b) {
  Tensor out = hadamard(val(a), val(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [a, b, o](Tape& t) {
      t.accum_(a, hadamard(t.grad(o), t.val(b)));
      t.accum_(b, hadamard(t.grad(o), t.val(a)));
    };
  return o;
}

Var Tape::scale(Var x, double c) {
  Tensor out = val(x);
  out *= c;
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, c](Tape& t) {
      Tensor g = t.grad(o);
      g *= c;
      t.accum_(x, g);
    };
  return o;
}

Var Tape::add_const(Var x, Tensor c) {
  Tensor out = val(x) + c;
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) { t.accum_(x, t.grad(o)); };
  return o;
}

Var Tape::mul_const(Var x, Tensor c) {
  Tensor out = hadamard(val(x), c);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, c = std::move(c)](Tape& t) {
      t.accum_(x, hadamard(t.grad(o), c));
    };
  return o;
}

Var Tape::add_rowvec(Var x, Var row) {
  const Tensor& xv = val(x);
  const Tensor& rv = val(row);
  if (rv.rows() != 1 || rv.cols() != xv.cols())
    throw InputError("add_rowvec: row must be 1 x cols(x)");
  Tensor out = xv;
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) += rv[static_cast<std::size_t>(c)];
  const bool rg = requires_grad(x) || requires_grad(row);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, row, o](Tape& t) {
      t.accum_(x, t.grad(o));
      t.accum_(row, colsum(t.grad(o)));
    };
  return o;
}

Var Tape::mul_scalar(Var x, Var s) {
  if (val(s).numel() != 1) throw InputError("mul_scalar: s must be 1 x 1");
  const double sv = val(s)[0];
  Tensor out = val(x);
  out *= sv;
  const bool rg = requires_grad(x) || requires_grad(s);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, s, o, sv](Tape& t) {
      Tensor gx = t.grad(o);
      gx *= sv;
      t.accum_(x, gx);
      double gs = 0.0;
      const Tensor& g = t.grad(o);
      const Tensor& xv = t.val(x);
      for (std::size_t i = 0; i < g.numel(); ++i) gs += g[i] * xv[i];
      t.accum_(s, Tensor::from_scalar(gs));
    };
  return o;
}

Var Tape::scale_shift(Var x, Var s, Var b) {
  const Tensor& xv = val(x);
  const Tensor& sv = val(s);
  const Tensor& bv = val(b);
  if (sv.rows() != 1 || bv.rows() != 1 || sv.cols() != xv.cols() ||
      bv.cols() != xv.cols())
    throw InputError("scale_shift: s and b must be 1 x cols(x)");
  Tensor out(xv.rows(), xv.cols());
  for (int r = 0; r < xv.rows(); ++r)
    for (int c = 0; c < xv.cols(); ++c)
      out.at(r, c) = xv.at(r, c) * (1.0 + sv[static_cast<std::size_t>(c)]) +
                     bv[static_cast<std::size_t>(c)];
  const bool rg = requires_grad(x) || requires_grad(s) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, s, b, o](Tape& t) {
      const Tensor& g = t.grad(o);
      const Tensor& xv2 = t.val(x);
      const Tensor& sv2 = t.val(s);
      Tensor gx(xv2.rows(), xv2.cols());
      Tensor gs(1, xv2.cols());
      for (int r = 0; r < xv2.rows(); ++r)
        for (int c = 0; c < xv2.cols(); ++c) {
          gx.at(r, c) = g.at(r, c) * (1.0 + sv2[static_cast<std::size_t>(c)]);
          gs[static_cast<std::size_t>(c)] += g.at(r, c) * xv2.at(r, c);
        }
      t.accum_(x, gx);
      t.accum_(s, gs);
      t.accum_(b, colsum(g));
    };
  return o;
}

// ---------------------------------------------------------------------------
// Linear algebra

Var Tape::matmul(Var a, Var b) {
  Tensor out = stylediff::matmul(val(a), val(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [a, b, o](Tape& t) {
      t.accum_(a, matmul_nt(t.grad(o), t.val(b)));
      t.accum_(b, matmul_tn(t.val(a), t.grad(o)));
    };
  return o;
}

Var Tape::linear(Var x, Var w, Var b) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  const Tensor& bv = val(b);
  if (bv.rows() != 1 || bv.cols() != wv.cols())
    throw InputError("linear: bias must be 1 x cols(w)");
  Tensor out = stylediff::matmul(xv, wv);
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) += bv[static_cast<std::size_t>(c)];
  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, w, b, o](Tape& t) {
      t.accum_(x, matmul_nt(t.grad(o), t.val(w)));
      t.accum_(w, matmul_tn(t.val(x), t.grad(o)));
      t.accum_(b, colsum(t.grad(o)));
    };
  return o;
}

Var Tape::transpose(Var x) {
  Tensor out = transpose2d(val(x));
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      t.accum_(x, transpose2d(t.grad(o)));
    };
  return o;
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  Tensor out = val(x).reshaped(shape);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      t.accum_(x, t.grad(o).reshaped(t.val(x).shape()));
    };
  return o;
}

// ---------------------------------------------------------------------------
// Nonlinearities

Var Tape::exp_op(Var x) {
  Tensor out = val(x);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      t.accum_(x, hadamard(t.grad(o), t.val(o)));
    };
  return o;
}

Var Tape::sigmoid(Var x) {
  Tensor out = val(x);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      const Tensor& y = t.val(o);
      Tensor gx = t.grad(o);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] *= y[i] * (1.0 - y[i]);
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::gelu(Var x) {
  Tensor out = val(x);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gelu_fwd(out[i]);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      const Tensor& xv = t.val(x);
      Tensor gx = t.grad(o);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] *= gelu_bwd(xv[i]);
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::row_softmax(Var x) {
  const Tensor& xv = val(x);
  Tensor out(xv.rows(), xv.cols());
  for (int r = 0; r < xv.rows(); ++r) {
    double m = xv.at(r, 0);
    for (int c = 1; c < xv.cols(); ++c) m = std::max(m, xv.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < xv.cols(); ++c) {
      out.at(r, c) = std::exp(xv.at(r, c) - m);
      sum += out.at(r, c);
    }
    for (int c = 0; c < xv.cols(); ++c) out.at(r, c) /= sum;
  }
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      const Tensor& y = t.val(o);
      const Tensor& g = t.grad(o);
      Tensor gx(y.rows(), y.cols());
      for (int r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (int c = 0; c < y.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
        for (int c = 0; c < y.cols(); ++c)
          gx.at(r, c) = y.at(r, c) * (g.at(r, c) - dot);
      }
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::layer_norm(Var x, Var gain, Var bias) {
  const Tensor& xv = val(x);
  const Tensor& gv = val(gain);
  const Tensor& bv = val(bias);
  if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() ||
      bv.cols() != xv.cols())
    throw InputError("layer_norm: gain/bias must be 1 x cols(x)");
  const int d = xv.cols();
  Tensor out(xv.rows(), d);
  for (int r = 0; r < xv.rows(); ++r) {
    double mu = 0.0;
    for (int c = 0; c < d; ++c) mu += xv.at(r, c);
    mu /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double dxc = xv.at(r, c) - mu;
      var += dxc * dxc;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int c = 0; c < d; ++c)
      out.at(r, c) = gv[static_cast<std::size_t>(c)] * (xv.at(r, c) - mu) * inv +
                     bv[static_cast<std::size_t>(c)];
  }
  const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, gain, bias, o](Tape& t) {
      const Tensor& xv2 = t.val(x);
      const Tensor& gv2 = t.val(gain);
      const Tensor& g = t.grad(o);
      const int d2 = xv2.cols();
      Tensor gx(xv2.rows(), d2);
      Tensor ggain(1, d2);
      Tensor gbias(1, d2);
      for (int r = 0; r < xv2.rows(); ++r) {
        double mu = 0.0;
        for (int c = 0; c < d2; ++c) mu += xv2.at(r, c);
        mu /= d2;
        double var = 0.0;
        for (int c = 0; c < d2; ++c) {
          const double dxc = xv2.at(r, c) - mu;
          var += dxc * dxc;
        }
        var /= d2;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        double mean_dxh = 0.0;
        double mean_dxh_xh = 0.0;
        std::vector<double> xh(static_cast<std::size_t>(d2));
        std::vector<double> dxh(static_cast<std::size_t>(d2));
        for (int c = 0; c < d2; ++c) {
          xh[static_cast<std::size_t>(c)] = (xv2.at(r, c) - mu) * inv;
          dxh[static_cast<std::size_t>(c)] =
              g.at(r, c) * gv2[static_cast<std::size_t>(c)];
          ggain[static_cast<std::size_t>(c)] +=
              g.at(r, c) * xh[static_cast<std::size_t>(c)];
          gbias[static_cast<std::size_t>(c)] += g.at(r, c);
          mean_dxh += dxh[static_cast<std::size_t>(c)];
          mean_dxh_xh +=
              dxh[static_cast<std::size_t>(c)] * xh[static_cast<std::size_t>(c)];
        }
        mean_dxh /= d2;
        mean_dxh_xh /= d2;
        for (int c = 0; c < d2; ++c)
          gx.at(r, c) = inv * (dxh[static_cast<std::size_t>(c)] - mean_dxh -
                               xh[static_cast<std::size_t>(c)] * mean_dxh_xh);
      }
      t.accum_(x, gx);
      t.accum_(gain, ggain);
      t.accum_(bias, gbias);
    };
  return o;
}

// ---------------------------------------------------------------------------
// Reductions / reshuffles

Var Tape::sum_all(Var x) {
  Tensor out = Tensor::from_scalar(val(x).sum());
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      Tensor g(t.val(x).shape());
      g.fill(t.grad(o)[0]);
      t.accum_(x, g);
    };
  return o;
}

Var Tape::mean_all(Var x) {
  const double n = static_cast<double>(val(x).numel());
  Tensor out = Tensor::from_scalar(val(x).sum() / n);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, n](Tape& t) {
      Tensor g(t.val(x).shape());
      g.fill(t.grad(o)[0] / n);
      t.accum_(x, g);
    };
  return o;
}

Var Tape::mse(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (!av.same_shape(bv)) throw InputError("mse shape mismatch");
  const double n = static_cast<double>(av.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push_(Tensor::from_scalar(s / n), rg);
  if (rg)
    nodes_.back().backward = [a, b, o, n](Tape& t) {
      const Tensor& av2 = t.val(a);
      const Tensor& bv2 = t.val(b);
      const double g0 = t.grad(o)[0];
      Tensor ga(av2.shape());
      for (std::size_t i = 0; i < av2.numel(); ++i)
        ga[i] = g0 * 2.0 * (av2[i] - bv2[i]) / n;
      t.accum_(a, ga);
      ga *= -1.0;
      t.accum_(b, ga);
    };
  return o;
}

Var Tape::mean_cols(Var x) {
  const Tensor& xv = val(x);
  const int d = xv.cols();
  Tensor out(xv.rows(), 1);
  for (int r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += xv.at(r, c);
    out[static_cast<std::size_t>(r)] = s / d;
  }
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, d](Tape& t) {
      const Tensor& g = t.grad(o);
      const Tensor& xv2 = t.val(x);
      Tensor gx(xv2.rows(), d);
      for (int r = 0; r < xv2.rows(); ++r)
        for (int c = 0; c < d; ++c)
          gx.at(r, c) = g[static_cast<std::size_t>(r)] / d;
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::slice_rows(Var x, int r0, int r1) {
  const Tensor& xv = val(x);
  if (r0 < 0 || r1 > xv.rows() || r0 >= r1)
    throw InputError("slice_rows: bad range");
  Tensor out(r1 - r0, xv.cols());
  for (int r = r0; r < r1; ++r)
    for (int c = 0; c < xv.cols(); ++c) out.at(r - r0, c) = xv.at(r, c);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, r0](Tape& t) {
      const Tensor& g = t.grad(o);
      Tensor gx(t.val(x).shape());
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < g.cols(); ++c) gx.at(r + r0, c) = g.at(r, c);
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::slice_cols(Var x, int c0, int c1) {
  const Tensor& xv = val(x);
  if (c0 < 0 || c1 > xv.cols() || c0 >= c1)
    throw InputError("slice_cols: bad range");
  Tensor out(xv.rows(), c1 - c0);
  for (int r = 0; r < xv.rows(); ++r)
    for (int c = c0; c < c1; ++c) out.at(r, c - c0) = xv.at(r, c);
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, c0](Tape& t) {
      const Tensor& g = t.grad(o);
      Tensor gx(t.val(x).shape());
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < g.cols(); ++c) gx.at(r, c + c0) = g.at(r, c);
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw InputError("concat_rows: empty list");
  int rows = 0;
  const int cols = val(xs[0]).cols();
  bool rg = false;
  for (Var v : xs) {
    if (val(v).cols() != cols) throw InputError("concat_rows: column mismatch");
    rows += val(v).rows();
    rg = rg || requires_grad(v);
  }
  Tensor out(rows, cols);
  int off = 0;
  for (Var v : xs) {
    const Tensor& xv = val(v);
    for (int r = 0; r < xv.rows(); ++r)
      for (int c = 0; c < cols; ++c) out.at(off + r, c) = xv.at(r, c);
    off += xv.rows();
  }
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [xs, o](Tape& t) {
      const Tensor& g = t.grad(o);
      int off2 = 0;
      for (Var v : xs) {
        const Tensor& xv = t.val(v);
        Tensor gx(xv.shape());
        for (int r = 0; r < xv.rows(); ++r)
          for (int c = 0; c < xv.cols(); ++c) gx.at(r, c) = g.at(off2 + r, c);
        t.accum_(v, gx);
        off2 += xv.rows();
      }
    };
  return o;
}

Var Tape::concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw InputError("concat_cols: empty list");
  const int rows = val(xs[0]).rows();
  int cols = 0;
  bool rg = false;
  for (Var v : xs) {
    if (val(v).rows() != rows) throw InputError("concat_cols: row mismatch");
    cols += val(v).cols();
    rg = rg || requires_grad(v);
  }
  Tensor out(rows, cols);
  int off = 0;
  for (Var v : xs) {
    const Tensor& xv = val(v);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < xv.cols(); ++c) out.at(r, off + c) = xv.at(r, c);
    off += xv.cols();
  }
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [xs, o](Tape& t) {
      const Tensor& g = t.grad(o);
      int off2 = 0;
      for (Var v : xs) {
        const Tensor& xv = t.val(v);
        Tensor gx(xv.shape());
        for (int r = 0; r < xv.rows(); ++r)
          for (int c = 0; c < xv.cols(); ++c) gx.at(r, c) = g.at(r, off2 + c);
        t.accum_(v, gx);
        off2 += xv.cols();
      }
    };
  return o;
}

Var Tape::replicate_rows(Var x, std::vector<int> index_map) {
  const Tensor& xv = val(x);
  Tensor out(static_cast<int>(index_map.size()), xv.cols());
  for (std::size_t j = 0; j < index_map.size(); ++j) {
    const int src = index_map[j];
    if (src < 0 || src >= xv.rows()) throw InputError("replicate_rows: bad index");
    for (int c = 0; c < xv.cols(); ++c)
      out.at(static_cast<int>(j), c) = xv.at(src, c);
  }
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, map = std::move(index_map)](Tape& t) {
      const Tensor& g = t.grad(o);
      Tensor gx(t.val(x).shape());
      for (std::size_t j = 0; j < map.size(); ++j)
        for (int c = 0; c < gx.cols(); ++c)
          gx.at(map[j], c) += g.at(static_cast<int>(j), c);
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::pool_rows(Var x, PoolGroups groups) {
  const Tensor& xv = val(x);
  Tensor out(static_cast<int>(groups.size()), xv.cols());
  for (std::size_t gidx = 0; gidx < groups.size(); ++gidx)
    for (const auto& [row, w] : groups[gidx]) {
      if (row < 0 || row >= xv.rows()) throw InputError("pool_rows: bad index");
      for (int c = 0; c < xv.cols(); ++c)
        out.at(static_cast<int>(gidx), c) += w * xv.at(row, c);
    }
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, gs = std::move(groups)](Tape& t) {
      const Tensor& g = t.grad(o);
      Tensor gx(t.val(x).shape());
      for (std::size_t gidx = 0; gidx < gs.size(); ++gidx)
        for (const auto& [row, w] : gs[gidx])
          for (int c = 0; c < gx.cols(); ++c)
            gx.at(row, c) += w * g.at(static_cast<int>(gidx), c);
      t.accum_(x, gx);
    };
  return o;
}

// ---------------------------------------------------------------------------
// Model-specific ops

Var Tape::pairwise_sqdist(Var x) {
  const Tensor& xv = val(x);
  const int n = xv.rows();
  const int d = xv.cols();
  Tensor out(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = xv.at(i, c) - xv.at(j, c);
        s += diff * diff;
      }
      out.at(i, j) = s;
    }
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o](Tape& t) {
      const Tensor& xv2 = t.val(x);
      const Tensor& g = t.grad(o);
      const int n2 = xv2.rows();
      Tensor gx(xv2.shape());
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < n2; ++j) {
          const double w = 2.0 * (g.at(i, j) + g.at(j, i));
          if (w == 0.0) continue;
          for (int c = 0; c < xv2.cols(); ++c)
            gx.at(i, c) += w * (xv2.at(i, c) - xv2.at(j, c));
        }
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::kron(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const int p = av.rows(), q = av.cols(), r = bv.rows(), s = bv.cols();
  Tensor out(p * r, q * s);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < q; ++j) {
      const double aij = av.at(i, j);
      for (int m = 0; m < r; ++m)
        for (int n = 0; n < s; ++n)
          out.at(i * r + m, j * s + n) = aij * bv.at(m, n);
    }
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [a, b, o](Tape& t) {
      const Tensor& av2 = t.val(a);
      const Tensor& bv2 = t.val(b);
      const Tensor& g = t.grad(o);
      const int p2 = av2.rows(), q2 = av2.cols(), r2 = bv2.rows(),
                s2 = bv2.cols();
      Tensor ga(av2.shape());
      Tensor gb(bv2.shape());
      for (int i = 0; i < p2; ++i)
        for (int j = 0; j < q2; ++j) {
          double acc = 0.0;
          for (int m = 0; m < r2; ++m)
            for (int n = 0; n < s2; ++n) {
              const double gv = g.at(i * r2 + m, j * s2 + n);
              acc += gv * bv2.at(m, n);
              gb.at(m, n) += gv * av2.at(i, j);
            }
          ga.at(i, j) = acc;
        }
      t.accum_(a, ga);
      t.accum_(b, gb);
    };
  return o;
}

Var Tape::renorm_rows(Var x, double eps) {
  const Tensor& xv = val(x);
  Tensor out(xv.rows(), xv.cols());
  for (int r = 0; r < xv.rows(); ++r) {
    double den = eps;
    for (int c = 0; c < xv.cols(); ++c) den += xv.at(r, c);
    for (int c = 0; c < xv.cols(); ++c) out.at(r, c) = xv.at(r, c) / den;
  }
  const bool rg = requires_grad(x);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [x, o, eps](Tape& t) {
      const Tensor& xv2 = t.val(x);
      const Tensor& y = t.val(o);
      const Tensor& g = t.grad(o);
      Tensor gx(xv2.shape());
      for (int r = 0; r < xv2.rows(); ++r) {
        double den = eps;
        double dot = 0.0;
        for (int c = 0; c < xv2.cols(); ++c) {
          den += xv2.at(r, c);
          dot += g.at(r, c) * y.at(r, c);
        }
        for (int c = 0; c < xv2.cols(); ++c)
          gx.at(r, c) = (g.at(r, c) - dot) / den;
      }
      t.accum_(x, gx);
    };
  return o;
}

Var Tape::distance_bias(Var kappa, Tensor dist, Tensor add) {
  if (val(kappa).numel() != 1) throw InputError("distance_bias: kappa must be 1 x 1");
  if (!dist.same_shape(add)) throw InputError("distance_bias: dist/add mismatch");
  const double k = val(kappa)[0];
  Tensor out = add;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= k * dist[i];
  const bool rg = requires_grad(kappa);
  Var o = push_(std::move(out), rg);
  if (rg)
    nodes_.back().backward = [kappa, o, d = std::move(dist)](Tape& t) {
      const Tensor& g = t.grad(o);
      double gk = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) gk -= g[i] * d[i];
      t.accum_(kappa, Tensor::from_scalar(gk));
    };
  return o;
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  order_.push_back(name);
  return items_.emplace(name, std::move(init)).first->second;
}

bool ParamStore::contains(const std::string& name) const {
  return items_.count(name) != 0;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = items_.find(name);
  if (it == items_.end()) throw InputError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw InputError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::total_scalars() const {
  std::size_t n = 0;
  for (const auto& name : order_) n += items_.at(name).numel();
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& name : order_)
    if (!items_.at(name).all_finite()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Adam

double AdamOptimizer::step(ParamStore& params,
                           const std::map<std::string, Tensor>& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (!params.contains(name))
      throw InputError("gradient for unknown parameter: " + name);
    const double n = g.l2_norm();
    sq += n * n;
  }
  const double norm = std::sqrt(sq);
  double clip_scale = 1.0;
  if (opt_.clip_norm > 0.0 && norm > opt_.clip_norm)
    clip_scale = opt_.clip_norm / norm;

  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
  const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
  for (const auto& [name, grad] : grads) {
    Tensor& p = params.get(name);
    if (!p.same_shape(grad))
      throw InputError("gradient shape mismatch for parameter: " + name);
    auto [it, inserted] = moments_.try_emplace(
        name, std::make_pair(Tensor(p.shape()), Tensor(p.shape())));
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double g = grad[i] * clip_scale;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
  return norm;
}

}  // namespace stylediff

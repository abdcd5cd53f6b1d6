#include "af/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "af/common.hpp"

namespace af {
namespace {

using MatMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t d = s.size(); d-- > 0;) {
    st[d] = acc;
    acc *= s[d];
  }
  return st;
}

struct BcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;  // element strides aligned to out; 0 = broadcast
  bool trivial = false;             // identical shapes, flat loops apply
};

BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* opname) {
  BcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.trivial = true;
    return plan;
  }
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  const auto stra = row_major_strides(a);
  const auto strb = row_major_strides(b);
  plan.out.resize(r);
  plan.sa.assign(r, 0);
  plan.sb.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    const bool in_a = i >= r - ra;
    const bool in_b = i >= r - rb;
    const std::size_t da = in_a ? a[i - (r - ra)] : 1;
    const std::size_t db = in_b ? b[i - (r - rb)] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument(msg(opname, ": shapes ", shape_str(a),
                                      " and ", shape_str(b),
                                      " are not broadcastable"));
    plan.out[i] = std::max(da, db);
    if (in_a && da != 1) plan.sa[i] = stra[i - (r - ra)];
    if (in_b && db != 1) plan.sb[i] = strb[i - (r - rb)];
  }
  return plan;
}

/// Visits every output element of a broadcast op as (out, a, b) flat offsets.
template <class Fn>
void for_each_bcast(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t r = out.size();
  const std::size_t n = numel(out);
  std::vector<std::size_t> c(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++c[d];
      ia += sa[d];
      ib += sb[d];
      if (c[d] < out[d]) break;
      c[d] = 0;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
    }
  }
}

template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f,
                 DA dfa, DB dfb) {
  const BcastPlan plan = broadcast_plan(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(plan.out);
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data_mut();
  if (plan.trivial) {
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i], bv[i]);
  } else {
    for_each_bcast(plan.out, plan.sa, plan.sb,
                   [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     ov[i] = f(av[ia], bv[ib]);
                   });
  }
  Tape* tape = Tape::active();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on, plan, dfa, dfb]() {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      const bool wa = an->requires_grad;
      const bool wb = bn->requires_grad;
      if (wa && an->grad.empty()) an->grad.assign(an->values.size(), 0.0);
      if (wb && bn->grad.empty()) bn->grad.assign(bn->values.size(), 0.0);
      auto body = [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (wa) an->grad[ia] += g[i] * dfa(an->values[ia], bn->values[ib]);
        if (wb) bn->grad[ib] += g[i] * dfb(an->values[ia], bn->values[ib]);
      };
      if (plan.trivial) {
        for (std::size_t i = 0; i < g.size(); ++i) body(i, i, i);
      } else {
        for_each_bcast(plan.out, plan.sa, plan.sb, body);
      }
    }, on);
  }
  return out;
}

template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
  Tape* tape = Tape::active();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record([an, on, df]() {
      if (on->grad.empty()) return;
      auto& ga = an->grad;
      if (ga.empty()) ga.assign(an->values.size(), 0.0);
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += on->grad[i] * df(an->values[i], on->values[i]);
    }, on);
  }
  return out;
}

struct AxisView {
  std::size_t outer, n, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) v.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) v.inner *= s[d];
  return v;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.data())
    if (y == 0.0) throw std::domain_error("div: divisor contains zero");
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw std::domain_error("log: input must be positive");
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double x : a.data())
    if (x < 0.0) throw std::domain_error("sqrt: input must be non-negative");
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi))
    throw std::invalid_argument(msg("clamp: lo ", lo, " > hi ", hi));
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) {
        return (x >= lo && x <= hi) ? 1.0 : 0.0;
      });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument(msg("matmul: expected rank-2 operands, got ",
                                    shape_str(a.shape()), " and ",
                                    shape_str(b.shape())));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument(msg("matmul: inner dimensions differ, ",
                                    shape_str(a.shape()), " vs ",
                                    shape_str(b.shape())));
  Tensor out = Tensor::zeros({a.dim(0), b.dim(1)});
  MatMap(out.data_mut().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Tape* tape = Tape::active();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on, m, k, n]() {
      if (on->grad.empty()) return;
      ConstMatMap gout(on->grad.data(), m, n);
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->values.size(), 0.0);
        MatMap(an->grad.data(), m, k).noalias() +=
            gout * ConstMatMap(bn->values.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->values.size(), 0.0);
        MatMap(bn->grad.data(), k, n).noalias() +=
            ConstMatMap(an->values.data(), m, k).transpose() * gout;
      }
    }, on);
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument(msg("bmm: expected [N,m,k]x[N,k,n], got ",
                                    shape_str(a.shape()), " and ",
                                    shape_str(b.shape())));
  if (a.dim(2) != b.dim(1))
    throw std::invalid_argument(msg("bmm: inner dimensions differ, ",
                                    shape_str(a.shape()), " vs ",
                                    shape_str(b.shape())));
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(b.dim(2));
  Tensor out = Tensor::zeros({batch, a.dim(1), b.dim(2)});
  for (std::size_t s = 0; s < batch; ++s) {
    MatMap(out.data_mut().data() + s * m * n, m, n).noalias() =
        ConstMatMap(a.data().data() + s * m * k, m, k) *
        ConstMatMap(b.data().data() + s * k * n, k, n);
  }
  Tape* tape = Tape::active();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on, batch, m, k, n]() {
      if (on->grad.empty()) return;
      if (an->requires_grad && an->grad.empty())
        an->grad.assign(an->values.size(), 0.0);
      if (bn->requires_grad && bn->grad.empty())
        bn->grad.assign(bn->values.size(), 0.0);
      for (std::size_t s = 0; s < batch; ++s) {
        ConstMatMap gout(on->grad.data() + s * m * n, m, n);
        if (an->requires_grad)
          MatMap(an->grad.data() + s * m * k, m, k).noalias() +=
              gout * ConstMatMap(bn->values.data() + s * k * n, k, n).transpose();
        if (bn->requires_grad)
          MatMap(bn->grad.data() + s * k * n, k, n).noalias() +=
              ConstMatMap(an->values.data() + s * m * k, m, k).transpose() * gout;
      }
    }, on);
  }
  return out;
}

Tensor reduce(Reduce op, const Tensor& a, std::optional<std::size_t> axis,
              bool keepdims) {
  AxisView v{1, a.size(), 1};
  Shape out_shape;
  if (axis) {
    if (*axis >= a.rank())
      throw std::invalid_argument(msg("reduce: axis ", *axis,
                                      " out of range for rank ", a.rank()));
    v = axis_view(a.shape(), *axis);
    out_shape = a.shape();
    if (keepdims)
      out_shape[*axis] = 1;
    else
      out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*axis));
  } else {
    out_shape = keepdims ? Shape(a.rank(), 1) : Shape{};
  }
  Tensor out = Tensor::zeros(out_shape);
  const auto av = a.data();
  auto ov = out.data_mut();
  std::vector<std::size_t> argmax;
  if (op == Reduce::Max) argmax.resize(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      if (op == Reduce::Max) {
        double best = av[base];
        std::size_t best_j = 0;
        for (std::size_t j = 1; j < v.n; ++j) {
          const double x = av[base + j * v.inner];
          if (x > best) {
            best = x;
            best_j = j;
          }
        }
        ov[o * v.inner + i] = best;
        argmax[o * v.inner + i] = base + best_j * v.inner;
      } else {
        double acc = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) acc += av[base + j * v.inner];
        ov[o * v.inner + i] =
            op == Reduce::Mean ? acc / static_cast<double>(v.n) : acc;
      }
    }
  }
  Tape* tape = Tape::active();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record([an, on, v, op, argmax = std::move(argmax)]() {
      if (on->grad.empty()) return;
      auto& ga = an->grad;
      if (ga.empty()) ga.assign(an->values.size(), 0.0);
      const double scale = op == Reduce::Mean ? 1.0 / static_cast<double>(v.n) : 1.0;
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const double g = on->grad[o * v.inner + i];
          if (op == Reduce::Max) {
            ga[argmax[o * v.inner + i]] += g;
          } else {
            const std::size_t base = o * v.n * v.inner + i;
            for (std::size_t j = 0; j < v.n; ++j)
              ga[base + j * v.inner] += g * scale;
          }
        }
      }
    }, on);
  }
  return out;
}

Tensor sum(const Tensor& a) { return reduce(Reduce::Sum, a, std::nullopt); }
Tensor sum(const Tensor& a, std::size_t axis, bool keepdims) {
  return reduce(Reduce::Sum, a, axis, keepdims);
}
Tensor mean(const Tensor& a) { return reduce(Reduce::Mean, a, std::nullopt); }
Tensor mean(const Tensor& a, std::size_t axis, bool keepdims) {
  return reduce(Reduce::Mean, a, axis, keepdims);
}
Tensor reduce_max(const Tensor& a) {
  return reduce(Reduce::Max, a, std::nullopt);
}
Tensor reduce_max(const Tensor& a, std::size_t axis, bool keepdims) {
  return reduce(Reduce::Max, a, axis, keepdims);
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank())
    throw std::invalid_argument(msg("softmax: axis ", axis,
                                    " out of range for rank ", a.rank()));
  const AxisView v = axis_view(a.shape(), axis);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.data();
  auto ov = out.data_mut();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double m = av[base];
      for (std::size_t j = 1; j < v.n; ++j)
        m = std::max(m, av[base + j * v.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(av[base + j * v.inner] - m);
        ov[base + j * v.inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) ov[base + j * v.inner] /= s;
    }
  }
  Tape* tape = Tape::active();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record([an, on, v]() {
      if (on->grad.empty()) return;
      auto& ga = an->grad;
      if (ga.empty()) ga.assign(an->values.size(), 0.0);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.n * v.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < v.n; ++j) {
            const std::size_t ix = base + j * v.inner;
            dot += on->grad[ix] * on->values[ix];
          }
          for (std::size_t j = 0; j < v.n; ++j) {
            const std::size_t ix = base + j * v.inner;
            ga[ix] += on->values[ix] * (on->grad[ix] - dot);
          }
        }
      }
    }, on);
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument(msg("reshape: ", shape_str(a.shape()),
                                    " has ", a.size(), " elements, target ",
                                    shape_str(shape), " has ", numel(shape)));
  Tensor out = Tensor::from(std::move(shape),
                            std::vector<double>(a.data().begin(), a.data().end()));
  Tape* tape = Tape::active();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record([an, on]() {
      if (on->grad.empty()) return;
      auto& ga = an->grad;
      if (ga.empty()) ga.assign(an->values.size(), 0.0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
    }, on);
  }
  return out;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r)
    throw std::invalid_argument("permute: perm length must equal rank");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p])
      throw std::invalid_argument("permute: perm must be a permutation of axes");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t j = 0; j < r; ++j) out_shape[j] = a.dim(perm[j]);
  const auto ostrides = row_major_strides(out_shape);
  // contrib[d] = stride of input axis d in the output layout
  std::vector<std::size_t> contrib(r, 0);
  for (std::size_t j = 0; j < r; ++j) contrib[perm[j]] = ostrides[j];

  Tensor out = Tensor::zeros(out_shape);
  const auto av = a.data();
  auto ov = out.data_mut();
  const Shape& in_shape = a.shape();
  {
    std::vector<std::size_t> c(r, 0);
    std::size_t oo = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      ov[oo] = av[i];
      for (std::size_t d = r; d-- > 0;) {
        ++c[d];
        oo += contrib[d];
        if (c[d] < in_shape[d]) break;
        c[d] = 0;
        oo -= contrib[d] * in_shape[d];
      }
    }
  }
  Tape* tape = Tape::active();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record([an, on, contrib, in_shape, r]() {
      if (on->grad.empty()) return;
      auto& ga = an->grad;
      if (ga.empty()) ga.assign(an->values.size(), 0.0);
      std::vector<std::size_t> c(r, 0);
      std::size_t oo = 0;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += on->grad[oo];
        for (std::size_t d = r; d-- > 0;) {
          ++c[d];
          oo += contrib[d];
          if (c[d] < in_shape[d]) break;
          c[d] = 0;
          oo -= contrib[d] * in_shape[d];
        }
      }
    }, on);
  }
  return out;
}

bool all_finite(const Tensor& a) {
  for (double x : a.data())
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace af

#include "af/audit.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "af/gradcheck.hpp"
#include "af/losses.hpp"
#include "af/model.hpp"
#include "af/nn.hpp"
#include "af/ops.hpp"
#include "af/rng.hpp"
#include "af/train.hpp"

namespace af {
namespace {

// Linear and piecewise-linear maps probed away from their kinks: the central
// difference is exact there, so only rounding noise remains.
constexpr double kLinearTol = 1e-6;
// Everything with curvature. h = 1e-4 puts truncation error around 1e-8;
// the bound leaves room for ill-conditioned spots.
constexpr double kSmoothTol = 1e-3;
constexpr double kStep = 1e-4;

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Uniform draw rejecting anything within `margin` of a kink, so a +/-h probe
// never crosses a non-differentiable point.
Tensor rand_clear_of(Rng& rng, Shape shape, const std::vector<double>& kinks,
                     double margin, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    for (;;) {
      double c = rng.uniform(lo, hi);
      bool ok = true;
      for (double k : kinks)
        if (std::abs(c - k) < margin) ok = false;
      if (ok) {
        x = c;
        break;
      }
    }
  }
  return Tensor::from(std::move(shape), std::move(v));
}

// Values drawn from a shuffled grid with spacing well above 2h, so argmax
// selections cannot flip under the probe.
Tensor rand_separated(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = 0.01 * static_cast<double>(i + 1);
  rng.shuffle(v);
  return Tensor::from(std::move(shape), std::move(v));
}

// Reduces an op output to a scalar through fixed random weights. A plain sum
// would let errors in different output coordinates cancel.
struct Scalarize {
  Tensor w;
  Scalarize(Rng& rng, Shape shape)
      : w(rand_uniform(rng, std::move(shape), 0.5, 1.5)) {}
  Tensor operator()(const Tensor& y) const { return sum(mul(y, w)); }
};

void check(std::vector<AuditItem>& out, const std::string& name, double tol,
           const std::function<Tensor()>& f, const std::vector<Tensor>& wrt) {
  out.push_back({name, tol, gradcheck(f, wrt, kStep)});
}

ParamList trainable(HybridModel& m) {
  ParamList all = collect(m);
  ParamList out;
  for (auto& p : all) {
    if (p.name.find(".running_") != std::string::npos) continue;
    p.tensor.set_requires_grad(true);
    out.push_back(p);
  }
  return out;
}

}  // namespace

std::vector<AuditItem> audit_ops(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "audit-ops", 0));
  std::vector<AuditItem> items;

  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Tensor b = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Scalarize s(rng, {3, 4});
    check(items, "add", kLinearTol, [&] { return s(add(a, b)); }, {a, b});
    check(items, "sub", kLinearTol, [&] { return s(sub(a, b)); }, {a, b});
    check(items, "neg", kLinearTol, [&] { return s(neg(a)); }, {a});
    check(items, "add_scalar", kLinearTol,
          [&] { return s(add_scalar(a, 0.7)); }, {a});
    check(items, "mul_scalar", kLinearTol,
          [&] { return s(mul_scalar(a, -1.3)); }, {a});
    check(items, "mul", kSmoothTol, [&] { return s(mul(a, b)); }, {a, b});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Tensor row = rand_uniform(rng, {4}, -1.0, 1.0);
    Scalarize s(rng, {3, 4});
    check(items, "add_broadcast", kLinearTol, [&] { return s(add(a, row)); },
          {a, row});
    check(items, "mul_broadcast", kSmoothTol, [&] { return s(mul(a, row)); },
          {a, row});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Tensor b = rand_clear_of(rng, {3, 4}, {0.0}, 0.5, -1.5, 1.5);
    Scalarize s(rng, {3, 4});
    check(items, "div", kSmoothTol, [&] { return s(div(a, b)); }, {a, b});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Scalarize s(rng, {3, 4});
    check(items, "tanh", kSmoothTol, [&] { return s(tanh(a)); }, {a});
    check(items, "exp", kSmoothTol, [&] { return s(exp(a)); }, {a});
    check(items, "sigmoid", kSmoothTol, [&] { return s(sigmoid(a)); }, {a});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, 0.5, 2.0);
    Scalarize s(rng, {3, 4});
    check(items, "log", kSmoothTol, [&] { return s(log(a)); }, {a});
    check(items, "sqrt", kSmoothTol, [&] { return s(sqrt(a)); }, {a});
  }
  {
    Tensor a = rand_clear_of(rng, {3, 4}, {0.0}, 0.05, -1.0, 1.0);
    Scalarize s(rng, {3, 4});
    check(items, "relu", kLinearTol, [&] { return s(relu(a)); }, {a});
  }
  {
    Tensor a = rand_clear_of(rng, {3, 4}, {-0.8, 0.8}, 0.05, -1.2, 1.2);
    Scalarize s(rng, {3, 4});
    check(items, "clamp", kLinearTol, [&] { return s(clamp(a, -0.8, 0.8)); },
          {a});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Scalarize srow(rng, {3});
    check(items, "sum", kLinearTol, [&] { return sum(a); }, {a});
    check(items, "sum_axis", kLinearTol, [&] { return srow(sum(a, 1)); }, {a});
    check(items, "mean", kLinearTol, [&] { return mean(a); }, {a});
    check(items, "mean_axis", kLinearTol, [&] { return srow(mean(a, 1)); },
          {a});
  }
  {
    Tensor a = rand_separated(rng, {3, 4});
    Scalarize srow(rng, {3});
    check(items, "reduce_max", kSmoothTol, [&] { return reduce_max(a); }, {a});
    check(items, "reduce_max_axis", kSmoothTol,
          [&] { return srow(reduce_max(a, 1)); }, {a});
  }
  {
    Tensor a = rand_uniform(rng, {3, 5}, -1.0, 1.0);
    Scalarize s(rng, {3, 5});
    check(items, "softmax", kSmoothTol, [&] { return s(softmax(a, 1)); }, {a});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Scalarize s(rng, {2, 6});
    check(items, "reshape", kLinearTol, [&] { return s(reshape(a, {2, 6})); },
          {a});
  }
  {
    Tensor a = rand_uniform(rng, {2, 3, 4}, -1.0, 1.0);
    Scalarize s(rng, {4, 2, 3});
    check(items, "permute", kLinearTol,
          [&] { return s(permute(a, {2, 0, 1})); }, {a});
  }
  {
    Tensor a = rand_uniform(rng, {5, 3}, -1.0, 1.0);
    Scalarize s(rng, {5});
    check(items, "select_column", kLinearTol,
          [&] { return s(select_column(a, 1)); }, {a});
  }
  {
    Tensor a = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    Tensor b = rand_uniform(rng, {4, 5}, -1.0, 1.0);
    Scalarize s(rng, {3, 5});
    check(items, "matmul", kLinearTol, [&] { return s(matmul(a, b)); },
          {a, b});
  }
  {
    Tensor a = rand_uniform(rng, {2, 3, 4}, -1.0, 1.0);
    Tensor b = rand_uniform(rng, {2, 4, 5}, -1.0, 1.0);
    Scalarize s(rng, {2, 3, 5});
    check(items, "bmm", kLinearTol, [&] { return s(bmm(a, b)); }, {a, b});
  }
  {
    Tensor x = rand_uniform(rng, {3, 4}, -1.0, 1.0);
    LinearParams p = make_linear(4, 5, rng);
    Scalarize s(rng, {3, 5});
    check(items, "linear", kLinearTol, [&] { return s(linear(x, p)); },
          {x, p.weight, p.bias});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 4}, -1.0, 1.0);
    LinearParams p = make_linear(4, 5, rng);
    Scalarize s(rng, {2, 3, 5});
    check(items, "linear_tokens", kLinearTol, [&] { return s(linear(x, p)); },
          {x, p.weight, p.bias});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 5, 5}, -1.0, 1.0);
    Conv2dParams p = make_conv2d(3, 4, 3, 1, 1, rng);
    Scalarize s(rng, {2, 4, 5, 5});
    check(items, "conv2d", kLinearTol, [&] { return s(conv2d(x, p)); },
          {x, p.weight, p.bias});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 5, 5}, -1.0, 1.0);
    Conv2dParams p = make_conv2d(3, 4, 3, 2, 1, rng);
    Scalarize s(rng, {2, 4, 3, 3});
    check(items, "conv2d_stride2", kLinearTol, [&] { return s(conv2d(x, p)); },
          {x, p.weight, p.bias});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 3, 3}, -1.0, 1.0);
    Scalarize s(rng, {2, 3, 6, 6});
    check(items, "upsample2x", kLinearTol,
          [&] { return s(upsample2x_nearest(x)); }, {x});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
    BatchNorm2dParams p = make_batchnorm2d(3);
    Tensor scale = rand_uniform(rng, {3}, 0.5, 1.5);
    Tensor shift = rand_uniform(rng, {3}, -0.5, 0.5);
    p.scale = scale;
    p.shift = shift;
    Scalarize s(rng, {2, 3, 4, 4});
    check(items, "batchnorm2d", kSmoothTol,
          [&] { return s(batchnorm2d(x, p, true)); }, {x, scale, shift});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 8}, -1.0, 1.0);
    Tensor scale = rand_uniform(rng, {8}, 0.5, 1.5);
    Tensor shift = rand_uniform(rng, {8}, -0.5, 0.5);
    Scalarize s(rng, {2, 3, 8});
    check(items, "layernorm", kSmoothTol,
          [&] { return s(layernorm(x, scale, shift)); }, {x, scale, shift});
  }
  {
    Tensor x = rand_uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
    ResidualBlockParams p = make_residual_block(3, 4, 1, rng);
    ParamList ps;
    collect(p, "rb", ps);
    std::vector<Tensor> wrt{x};
    for (auto& np : ps)
      if (np.name.find(".running_") == std::string::npos)
        wrt.push_back(np.tensor);
    Scalarize s(rng, {2, 4, 4, 4});
    check(items, "residual_block", kSmoothTol,
          [&] { return s(residual_block(x, p, true)); }, wrt);
  }
  {
    Tensor x = rand_uniform(rng, {2, 4, 8}, -1.0, 1.0);
    EncoderLayerParams p = make_encoder_layer(8, 16, 2, rng);
    Scalarize s(rng, {2, 4, 8});
    check(items, "attention", kSmoothTol,
          [&] { return s(multi_head_attention(x, p)); },
          {x, p.q.weight, p.q.bias, p.k.weight, p.k.bias, p.v.weight, p.v.bias,
           p.o.weight, p.o.bias});
    ParamList ps;
    collect(p, "enc", ps);
    std::vector<Tensor> wrt{x};
    for (auto& np : ps) wrt.push_back(np.tensor);
    check(items, "encoder_layer", kSmoothTol,
          [&] { return s(encoder_layer(x, p)); }, wrt);
  }

  return items;
}

std::vector<AuditItem> audit_losses(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "audit-losses", 0));
  std::vector<AuditItem> items;

  {
    Tensor logits = rand_uniform(rng, {5, 4}, -2.0, 2.0);
    const std::vector<int> targets{2, 0, -1, 3, 1};
    check(items, "cross_entropy", kSmoothTol,
          [&] { return cross_entropy(logits, targets).value; }, {logits});
  }
  {
    Tensor logits = rand_uniform(rng, {4, 3}, -2.0, 2.0);
    const std::vector<std::vector<int>> targets{
        {1, 0, -1}, {0, 1, 1}, {-1, -1, 1}, {1, 1, 0}};
    const AuClassWeights w = compute_au_weights(targets);
    check(items, "weighted_bce", kSmoothTol,
          [&] { return weighted_bce(logits, targets, w).value; }, {logits});
  }
  {
    Tensor pv = rand_uniform(rng, {6}, -0.9, 0.9);
    Tensor pa = rand_uniform(rng, {6}, -0.9, 0.9);
    const std::vector<double> tv{0.3, -0.2, -5.0, 0.5, 0.1, -0.4};
    const std::vector<double> ta{-0.1, -5.0, 0.2, 0.4, -0.3, 0.6};
    check(items, "ccc_loss", kSmoothTol,
          [&] { return ccc_loss(pv, pa, tv, ta).value; }, {pv, pa});
  }
  {
    Tensor logits = rand_uniform(rng, {4, 3}, -2.0, 2.0);
    Tensor au_logits = rand_uniform(rng, {4, 2}, -2.0, 2.0);
    Tensor pv = rand_uniform(rng, {4}, -0.9, 0.9);
    Tensor pa = rand_uniform(rng, {4}, -0.9, 0.9);
    const std::vector<int> expr{0, 2, 1, -1};
    const std::vector<std::vector<int>> aus{{1, 0}, {0, 1}, {1, 1}, {0, -1}};
    const AuClassWeights w = compute_au_weights(aus);
    const std::vector<double> tv{0.3, -0.2, 0.1, 0.5};
    const std::vector<double> ta{-0.1, 0.4, 0.2, -0.3};
    check(items, "combined", kSmoothTol,
          [&] {
            return combined_loss(cross_entropy(logits, expr),
                                 weighted_bce(au_logits, aus, w),
                                 ccc_loss(pv, pa, tv, ta))
                .total;
          },
          {logits, au_logits, pv, pa});
  }

  return items;
}

std::vector<AuditItem> audit_model(std::uint64_t seed) {
  std::vector<AuditItem> items;
  constexpr std::size_t kProbes = 24;

  for (Backbone bb : {Backbone::kResNetLite, Backbone::kHrNetLite}) {
    ModelConfig cfg;
    cfg.backbone = bb;
    cfg.input_size = 32;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ff = 48;
    HybridModel m = build_model(cfg, derive_seed(seed, "audit-model", 7));
    ParamList params = trainable(m);

    Rng rng(derive_seed(seed, "audit-model-data", bb == Backbone::kResNetLite ? 0 : 1));
    Tensor images = rand_uniform(rng, {2, 3, 32, 32}, 0.0, 1.0);
    const std::vector<int> expr{1, 3};
    const std::vector<std::vector<int>> aus{{1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0},
                                            {0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1}};
    const AuClassWeights au_w = compute_au_weights(aus);
    const std::vector<double> tv{0.3, -0.4};
    const std::vector<double> ta{-0.2, 0.5};

    auto loss_value = [&]() -> Tensor {
      const ForwardOut out = forward(m, images, true);
      return combined_loss(cross_entropy(out.expr_logits, expr),
                           weighted_bce(out.au_logits, aus, au_w),
                           ccc_loss(select_column(out.va, 0),
                                    select_column(out.va, 1), tv, ta))
          .total;
    };

    for (auto& p : params) p.tensor.zero_grad();
    {
      Tape tape;
      tape.backward(loss_value());
    }

    double worst = 0.0;
    for (std::size_t k = 0; k < kProbes; ++k) {
      NamedTensor& p = params[rng.uniform_index(params.size())];
      const std::size_t i = rng.uniform_index(p.tensor.size());
      const double analytic = p.tensor.has_grad() ? p.tensor.grad()[i] : 0.0;
      const double saved = p.tensor.data()[i];
      // A +/-h window through ~1e4 rectifier inputs often straddles a kink,
      // which corrupts the difference quotient without any gradient being
      // wrong. Shrinking h moves the window off the kink, so the best error
      // over a few steps isolates genuine analytic/numeric disagreement
      // (which no step size repairs) from crossing artifacts.
      double rel = 1.0;
      for (double h : {kStep, kStep / 10.0, kStep / 100.0}) {
        p.tensor.data_mut()[i] = saved + h;
        const double up = loss_value().data()[0];
        p.tensor.data_mut()[i] = saved - h;
        const double dn = loss_value().data()[0];
        p.tensor.data_mut()[i] = saved;
        const double numeric = (up - dn) / (2.0 * h);
        rel = std::min(rel,
                       std::abs(analytic - numeric) /
                           std::max({1.0, std::abs(analytic),
                                     std::abs(numeric)}));
        if (rel <= kSmoothTol / 10.0) break;
      }
      worst = std::max(worst, rel);
    }
    items.push_back({std::string("model_") + backbone_name(bb), kSmoothTol,
                     worst});
  }

  return items;
}

}  // namespace af

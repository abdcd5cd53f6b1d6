#include "af/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "af/common.hpp"
#include "af/ops.hpp"

namespace af {
namespace {

constexpr double kVaSentinel = -5.0;
constexpr double kCccEps = 1e-12;

// Masked population moments: mean, centered values and variance over the
// entries where mask is 1. Centered values are zeroed outside the mask so
// covariances of two masked series need no further masking.
struct MaskedMoments {
  Tensor mean;      // scalar
  Tensor centered;  // [B], zero at invalid entries
  Tensor var;       // scalar
};

MaskedMoments masked_moments(const Tensor& x, const Tensor& mask, double n) {
  MaskedMoments m;
  m.mean = mul_scalar(sum(mul(x, mask)), 1.0 / n);
  m.centered = mul(sub(x, m.mean), mask);
  m.var = mul_scalar(sum(mul(m.centered, m.centered)), 1.0 / n);
  return m;
}

}  // namespace

LossValue masked_loss() { return {Tensor::scalar(0.0), true}; }

LossValue cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2)
    throw std::invalid_argument(
        msg("cross_entropy: expected [B,C] logits, got ",
            shape_str(logits.shape())));
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (targets.size() != B)
    throw std::invalid_argument(msg("cross_entropy: ", B, " rows vs ",
                                    targets.size(), " targets"));
  std::vector<double> mask(B * C, 0.0);
  std::size_t n_valid = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const int t = targets[b];
    if (t < 0) continue;  // -1 sentinel: row excluded
    if (static_cast<std::size_t>(t) >= C)
      throw std::invalid_argument(
          msg("cross_entropy: target ", t, " out of range for ", C, " classes"));
    mask[b * C + static_cast<std::size_t>(t)] = 1.0;
    ++n_valid;
  }
  if (n_valid == 0) return masked_loss();
  Tensor m = reduce_max(logits, 1, true);
  Tensor shifted = sub(logits, m);
  Tensor logsumexp = log(sum(exp(shifted), 1, true));
  Tensor logsm = sub(shifted, logsumexp);
  Tensor picked = mul(logsm, Tensor::from({B, C}, std::move(mask)));
  return {mul_scalar(sum(picked), -1.0 / static_cast<double>(n_valid)), false};
}

AuClassWeights compute_au_weights(const std::vector<std::vector<int>>& labels,
                                  double ratio_eps) {
  if (!(ratio_eps > 0.0) || !(ratio_eps < 0.5))
    throw std::invalid_argument(
        msg("compute_au_weights: ratio_eps must lie in (0, 0.5), got ",
            ratio_eps));
  if (labels.empty() || labels.front().empty())
    throw std::invalid_argument("compute_au_weights: empty label matrix");
  const std::size_t K = labels.front().size();
  std::vector<std::size_t> valid(K, 0), positive(K, 0);
  for (std::size_t row = 0; row < labels.size(); ++row) {
    if (labels[row].size() != K)
      throw std::invalid_argument(
          msg("compute_au_weights: row ", row, " has ", labels[row].size(),
              " entries, expected ", K));
    for (std::size_t k = 0; k < K; ++k) {
      const int v = labels[row][k];
      if (v == -1) continue;
      if (v != 0 && v != 1)
        throw std::invalid_argument(
            msg("compute_au_weights: label ", v, " is not in {0,1,-1}"));
      ++valid[k];
      if (v == 1) ++positive[k];
    }
  }
  AuClassWeights out;
  out.w.resize(K);
  out.r.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (valid[k] == 0)
      throw std::invalid_argument(
          msg("compute_au_weights: AU class ", k, " has no valid entries"));
    double r = static_cast<double>(positive[k]) / static_cast<double>(valid[k]);
    r = std::min(std::max(r, ratio_eps), 1.0 - ratio_eps);
    out.r[k] = r;
    out.w[k] = (1.0 - r) / r;
  }
  return out;
}

LossValue weighted_bce(const Tensor& logits,
                       const std::vector<std::vector<int>>& targets,
                       const AuClassWeights& weights, double prob_eps) {
  if (!(prob_eps > 0.0) || !(prob_eps < 0.5))
    throw std::invalid_argument(
        msg("weighted_bce: prob_eps must lie in (0, 0.5), got ", prob_eps));
  if (logits.rank() != 2)
    throw std::invalid_argument(
        msg("weighted_bce: expected [B,K] logits, got ",
            shape_str(logits.shape())));
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (targets.size() != B)
    throw std::invalid_argument(msg("weighted_bce: ", B, " rows vs ",
                                    targets.size(), " target rows"));
  if (weights.w.size() != K)
    throw std::invalid_argument(msg("weighted_bce: ", K, " AUs vs ",
                                    weights.w.size(), " weights"));
  std::vector<double> pos(B * K, 0.0), neg(B * K, 0.0);
  std::size_t n_samples = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b].size() != K)
      throw std::invalid_argument(
          msg("weighted_bce: target row ", b, " has ", targets[b].size(),
              " entries, expected ", K));
    bool any = false;
    for (std::size_t k = 0; k < K; ++k) {
      const int t = targets[b][k];
      if (t == -1) continue;
      if (t == 1)
        pos[b * K + k] = 1.0;
      else if (t == 0)
        neg[b * K + k] = 1.0;
      else
        throw std::invalid_argument(
            msg("weighted_bce: label ", t, " is not in {0,1,-1}"));
      any = true;
    }
    if (any) ++n_samples;
  }
  if (n_samples == 0) return masked_loss();

  Tensor p = clamp(sigmoid(logits), prob_eps, 1.0 - prob_eps);
  Tensor w = Tensor::from({K}, std::vector<double>(weights.w));
  Tensor pos_term = mul(mul(Tensor::from({B, K}, std::move(pos)), w), log(p));
  Tensor neg_term =
      mul(Tensor::from({B, K}, std::move(neg)), log(add_scalar(af::neg(p), 1.0)));
  Tensor summed = sum(add(pos_term, neg_term));
  return {mul_scalar(summed, -1.0 / static_cast<double>(n_samples)), false};
}

LossValue ccc_loss(const Tensor& pred_v, const Tensor& pred_a,
                   const std::vector<double>& true_v,
                   const std::vector<double>& true_a) {
  if (pred_v.rank() != 1 || pred_a.rank() != 1)
    throw std::invalid_argument("ccc_loss: predictions must be rank-1");
  const std::size_t B = pred_v.dim(0);
  if (pred_a.dim(0) != B || true_v.size() != B || true_a.size() != B)
    throw std::invalid_argument(
        msg("ccc_loss: length mismatch, preds ", B, "/", pred_a.dim(0),
            ", truths ", true_v.size(), "/", true_a.size()));

  auto dim_ccc = [B](const Tensor& pred,
                     const std::vector<double>& truth) -> Tensor {
    std::vector<double> mask(B, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < B; ++i)
      if (truth[i] != kVaSentinel) {
        mask[i] = 1.0;
        ++n;
      }
    if (n < 2) return Tensor();  // dimension not computable
    Tensor mk = Tensor::from({B}, std::move(mask));
    Tensor t = Tensor::from({B}, std::vector<double>(truth));
    const double dn = static_cast<double>(n);
    MaskedMoments mp = masked_moments(pred, mk, dn);
    MaskedMoments mt = masked_moments(t, mk, dn);
    Tensor cov = mul_scalar(sum(mul(mp.centered, mt.centered)), 1.0 / dn);
    Tensor dm = sub(mp.mean, mt.mean);
    Tensor denom =
        add_scalar(add(add(mp.var, mt.var), mul(dm, dm)), kCccEps);
    return div(mul_scalar(cov, 2.0), denom);
  };

  Tensor ccc_v = dim_ccc(pred_v, true_v);
  Tensor ccc_a = dim_ccc(pred_a, true_a);
  if (!ccc_v.defined() || !ccc_a.defined()) return masked_loss();
  return {add_scalar(mul_scalar(add(ccc_v, ccc_a), -0.5), 1.0), false};
}

LossBundle combined_loss(const LossValue& expr, const LossValue& au,
                         const LossValue& va, const TaskWeights& w) {
  if (!(w.expr > 0.0) || !(w.au > 0.0) || !(w.va > 0.0))
    throw std::invalid_argument("combined_loss: task weights must be positive");
  if (expr.masked && au.masked && va.masked)
    throw std::invalid_argument("combined_loss: every task is masked");
  LossBundle out;
  out.weights = w;
  Tensor total = Tensor::scalar(0.0);
  if (!expr.masked) {
    total = add(total, mul_scalar(expr.value, w.expr));
    out.l_expr = expr.value.value();
    out.expr_masked = false;
  }
  if (!au.masked) {
    total = add(total, mul_scalar(au.value, w.au));
    out.l_au = au.value.value();
    out.au_masked = false;
  }
  if (!va.masked) {
    total = add(total, mul_scalar(va.value, w.va));
    out.l_va = va.value.value();
    out.va_masked = false;
  }
  out.total = total;
  return out;
}

Tensor select_column(const Tensor& m, std::size_t col) {
  if (m.rank() != 2)
    throw std::invalid_argument(
        msg("select_column: expected rank-2, got ", shape_str(m.shape())));
  if (col >= m.dim(1))
    throw std::invalid_argument(msg("select_column: column ", col,
                                    " out of range for ", m.dim(1)));
  std::vector<double> onehot(m.dim(1), 0.0);
  onehot[col] = 1.0;
  return sum(mul(m, Tensor::from({m.dim(1)}, std::move(onehot))), 1);
}

}  // namespace af

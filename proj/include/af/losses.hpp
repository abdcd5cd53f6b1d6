#pragma once

#include <vector>

#include "af/tensor.hpp"

namespace af {

/// A differentiable scalar loss. `masked` means no valid targets existed;
/// the value is then a constant 0 that contributes nothing to training.
struct LossValue {
  Tensor value;
  bool masked = false;
};

/// A masked (constant-zero) loss, used for tasks absent from a batch.
LossValue masked_loss();

/// Per-AU positive-class weights w_i = (1 - r_i) / r_i, with the positive
/// ratio r_i clamped to [1e-3, 1-1e-3] so weights stay finite.
struct AuClassWeights {
  std::vector<double> w;
  std::vector<double> r;
};

struct TaskWeights {
  double expr = 1.0;
  double au = 1.0;
  double va = 1.0;
};

struct LossBundle {
  Tensor total;  // differentiable weighted sum over unmasked tasks
  double l_expr = 0.0, l_au = 0.0, l_va = 0.0;
  bool expr_masked = true, au_masked = true, va_masked = true;
  TaskWeights weights;
};

/// Mean over valid rows of -log softmax(logits)[target]. Targets use -1 as
/// the invalid sentinel; a batch with no valid rows yields a masked loss.
LossValue cross_entropy(const Tensor& logits, const std::vector<int>& targets);

/// Counts positives per AU column over {0,1,-1} labels; -1 entries are
/// invalid. A column with no valid entries is an error naming the column.
/// ratio_eps clamps the positive ratio into [ratio_eps, 1 - ratio_eps].
AuClassWeights compute_au_weights(const std::vector<std::vector<int>>& labels,
                                  double ratio_eps = 1e-3);

/// Weighted binary cross-entropy over sigmoid probabilities clamped to
/// [prob_eps, 1-prob_eps]: per sample the sum over its valid AUs of
/// -(w_i t_i log p_i + (1 - t_i) log(1 - p_i)), averaged over samples with
/// at least one valid AU. The weight scales only the positive term.
LossValue weighted_bce(const Tensor& logits,
                       const std::vector<std::vector<int>>& targets,
                       const AuClassWeights& weights, double prob_eps = 1e-7);

/// 1 - (CCC_V + CCC_A)/2 over valid frames, differentiable. Frames marked
/// with the -5 sentinel in the truth sequences are excluded; fewer than 2
/// valid frames on either dimension masks the whole task.
LossValue ccc_loss(const Tensor& pred_v, const Tensor& pred_a,
                   const std::vector<double>& true_v,
                   const std::vector<double>& true_a);

/// total = w.expr*expr + w.au*au + w.va*va over unmasked tasks; throws
/// invalid-argument when every task is masked.
LossBundle combined_loss(const LossValue& expr, const LossValue& au,
                         const LossValue& va, const TaskWeights& w = {});

/// Extracts column `col` of a [B, C] tensor as a differentiable [B] vector.
Tensor select_column(const Tensor& m, std::size_t col);

}  // namespace af

#pragma once

#include <optional>
#include <string>
#include <vector>

namespace af {

/// Concordance correlation: 2·cov / (var_x + var_y + (mean_x - mean_y)²)
/// with population (1/N) moments. A degenerate denominator (< 1e-12) yields
/// 1 for elementwise-equal sequences (within 1e-12) and 0 otherwise.
double ccc(const std::vector<double>& x, const std::vector<double>& y);

/// F1 = 2TP / (2TP + FP + FN) over {0,1} sequences; 0 when the denominator
/// is 0.
double f1_binary(const std::vector<int>& preds, const std::vector<int>& targets);

/// Unweighted mean of per-class F1 scores.
double f1_macro(const std::vector<double>& per_class);

/// One-vs-rest F1 per expression class; rows with target -1 are excluded.
std::vector<double> per_class_f1(const std::vector<int>& pred_ids,
                                 const std::vector<int>& true_ids,
                                 std::size_t n_classes);

/// Per-AU F1 over {0,1} predictions vs {0,1,-1} targets; -1 entries are
/// excluded per AU.
std::vector<double> per_au_f1(const std::vector<std::vector<int>>& preds,
                              const std::vector<std::vector<int>>& targets);

/// (ccc_v + ccc_a)/2 + f1_expr + f1_au; every component must be present.
double mtl_score(std::optional<double> ccc_v, std::optional<double> ccc_a,
                 std::optional<double> f1_expr, std::optional<double> f1_au);

struct MetricsReport {
  double ccc_v = 0.0;
  double ccc_a = 0.0;
  double f1_expr_macro = 0.0;
  double f1_au_macro = 0.0;
  double mtl_score = 0.0;
  double lsd_f1 = 0.0;
};

/// Flat machine-readable key=value lines.
std::string metrics_kv(const MetricsReport& r);
/// Human-readable table.
std::string metrics_table(const MetricsReport& r);

}  // namespace af

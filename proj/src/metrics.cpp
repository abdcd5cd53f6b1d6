#include "af/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "af/common.hpp"

namespace af {

double ccc(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw std::invalid_argument(
        msg("ccc: length mismatch ", x.size(), " vs ", y.size()));
  const std::size_t n = x.size();
  if (n < 2)
    throw std::invalid_argument(msg("ccc: need at least 2 points, got ", n));
  const double dn = static_cast<double>(n);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= dn;
  my /= dn;
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cov += dx * dy;
  }
  vx /= dn;
  vy /= dn;
  cov /= dn;
  const double dm = mx - my;
  const double denom = vx + vy + dm * dm;
  if (denom < 1e-12) {
    for (std::size_t i = 0; i < n; ++i)
      if (std::abs(x[i] - y[i]) > 1e-12) return 0.0;
    return 1.0;
  }
  return 2.0 * cov / denom;
}

double f1_binary(const std::vector<int>& preds, const std::vector<int>& targets) {
  if (preds.size() != targets.size())
    throw std::invalid_argument(msg("f1_binary: length mismatch ",
                                    preds.size(), " vs ", targets.size()));
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] != 0 && preds[i] != 1) || (targets[i] != 0 && targets[i] != 1))
      throw std::invalid_argument("f1_binary: values must be 0 or 1");
    if (preds[i] == 1 && targets[i] == 1)
      ++tp;
    else if (preds[i] == 1)
      ++fp;
    else if (targets[i] == 1)
      ++fn;
  }
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0
                    : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double f1_macro(const std::vector<double>& per_class) {
  if (per_class.empty())
    throw std::invalid_argument("f1_macro: need at least one class");
  double s = 0.0;
  for (double f : per_class) s += f;
  return s / static_cast<double>(per_class.size());
}

std::vector<double> per_class_f1(const std::vector<int>& pred_ids,
                                 const std::vector<int>& true_ids,
                                 std::size_t n_classes) {
  if (pred_ids.size() != true_ids.size())
    throw std::invalid_argument(msg("per_class_f1: length mismatch ",
                                    pred_ids.size(), " vs ", true_ids.size()));
  std::vector<double> out(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred_ids.size(); ++i) {
      if (true_ids[i] < 0) continue;  // -1 sentinel
      if (static_cast<std::size_t>(true_ids[i]) >= n_classes)
        throw std::invalid_argument(msg("per_class_f1: target ", true_ids[i],
                                        " out of range for ", n_classes,
                                        " classes"));
      const bool p = pred_ids[i] == static_cast<int>(c);
      const bool t = true_ids[i] == static_cast<int>(c);
      if (p && t)
        ++tp;
      else if (p)
        ++fp;
      else if (t)
        ++fn;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    out[c] = denom == 0
                 ? 0.0
                 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

std::vector<double> per_au_f1(const std::vector<std::vector<int>>& preds,
                              const std::vector<std::vector<int>>& targets) {
  if (preds.size() != targets.size())
    throw std::invalid_argument(msg("per_au_f1: row mismatch ", preds.size(),
                                    " vs ", targets.size()));
  if (preds.empty()) throw std::invalid_argument("per_au_f1: no rows");
  const std::size_t K = preds.front().size();
  std::vector<std::size_t> tp(K, 0), fp(K, 0), fn(K, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != K || targets[i].size() != K)
      throw std::invalid_argument(msg("per_au_f1: row ", i, " width mismatch"));
    for (std::size_t k = 0; k < K; ++k) {
      const int t = targets[i][k];
      if (t == -1) continue;
      const int p = preds[i][k];
      if (p != 0 && p != 1)
        throw std::invalid_argument("per_au_f1: predictions must be 0 or 1");
      if (t != 0 && t != 1)
        throw std::invalid_argument("per_au_f1: targets must be 0, 1 or -1");
      if (p == 1 && t == 1)
        ++tp[k];
      else if (p == 1)
        ++fp[k];
      else if (t == 1)
        ++fn[k];
    }
  }
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t denom = 2 * tp[k] + fp[k] + fn[k];
    out[k] = denom == 0
                 ? 0.0
                 : 2.0 * static_cast<double>(tp[k]) / static_cast<double>(denom);
  }
  return out;
}

double mtl_score(std::optional<double> ccc_v, std::optional<double> ccc_a,
                 std::optional<double> f1_expr, std::optional<double> f1_au) {
  if (!ccc_v || !ccc_a || !f1_expr || !f1_au)
    throw std::invalid_argument("mtl_score: every task metric is required");
  return (*ccc_v + *ccc_a) / 2.0 + *f1_expr + *f1_au;
}

namespace {
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

std::string metrics_kv(const MetricsReport& r) {
  std::string s;
  s += "ccc_v=" + fmt(r.ccc_v) + "\n";
  s += "ccc_a=" + fmt(r.ccc_a) + "\n";
  s += "f1_expr_macro=" + fmt(r.f1_expr_macro) + "\n";
  s += "f1_au_macro=" + fmt(r.f1_au_macro) + "\n";
  s += "mtl_score=" + fmt(r.mtl_score) + "\n";
  s += "lsd_f1=" + fmt(r.lsd_f1) + "\n";
  return s;
}

std::string metrics_table(const MetricsReport& r) {
  std::string s;
  s += "metric           value\n";
  s += "ccc_v            " + fmt(r.ccc_v) + "\n";
  s += "ccc_a            " + fmt(r.ccc_a) + "\n";
  s += "f1_expr_macro    " + fmt(r.f1_expr_macro) + "\n";
  s += "f1_au_macro      " + fmt(r.f1_au_macro) + "\n";
  s += "mtl_score        " + fmt(r.mtl_score) + "\n";
  s += "lsd_f1           " + fmt(r.lsd_f1) + "\n";
  return s;
}

}  // namespace af

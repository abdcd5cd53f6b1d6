#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "af/tensor.hpp"

namespace af {

/// One gradient-audit entry: the worst finite-difference discrepancy seen for
/// a named operation, plus the bound it must stay under.
struct AuditItem {
  std::string name;
  double tolerance = 0.0;
  double worst = 0.0;

  bool pass() const { return worst <= tolerance; }
};

/// Runs every differentiable tensor op through a finite-difference check on
/// seeded random inputs. Linear and piecewise-linear ops (inputs kept away
/// from kinks) are held to 1e-6; ops with curvature to 1e-3.
std::vector<AuditItem> audit_ops(std::uint64_t seed);

/// Checks the three task losses, including masked rows and sentinel labels,
/// against finite differences at 1e-3.
std::vector<AuditItem> audit_losses(std::uint64_t seed);

/// Spot-checks end-to-end gradients of the combined loss through a small
/// model, one per backbone, perturbing random parameter coordinates. Each
/// probe refines its difference step until the window clears the rectifier
/// kinks it may straddle; disagreement that survives refinement is real.
std::vector<AuditItem> audit_model(std::uint64_t seed);

}  // namespace af

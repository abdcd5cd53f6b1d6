#include "af/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace af {

double gradcheck(const std::function<Tensor()>& f,
                 const std::vector<Tensor>& wrt, double h) {
  if (!(h > 0.0))
    throw std::invalid_argument("gradcheck: step size must be positive");
  for (const Tensor& t : wrt) {
    Tensor mutable_t = t;
    mutable_t.set_requires_grad(true);
    mutable_t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f();
    if (loss.size() != 1)
      throw std::invalid_argument("gradcheck: f must return a scalar");
    tape.backward(loss);
  }
  analytic.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.size(), 0.0);
  }
  double worst = 0.0;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor t = wrt[ti];
    auto vals = t.data_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f().value();
      vals[i] = orig - h;
      const double fm = f().value();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][i];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double gradcheck(const std::function<Tensor(const Tensor&)>& f,
                 const Tensor& x, double h) {
  Tensor xc = x.clone();
  return gradcheck([&f, &xc]() { return f(xc); }, {xc}, h);
}

}  // namespace af

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace af {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

/// Dense N-dimensional array of 64-bit reals in row-major order.
///
/// Tensor is a cheap handle: copies share the underlying buffer, so a model
/// parameter updated in place is seen by every holder. Use clone() for an
/// independent copy. Gradients live next to the values and are accumulated
/// by Tape::backward into every tensor whose requires_grad flag is set.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value) { return from({}, {value}); }

  bool defined() const noexcept { return static_cast<bool>(d_); }

  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->values.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

  std::span<const double> data() const { return d_->values; }
  /// Mutable access to the raw values. Writing through this invalidates any
  /// tape that already recorded an operation reading this tensor.
  std::span<double> data_mut() { return d_->values; }

  /// Value of a one-element tensor.
  double value() const;

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const double> grad() const { return d_->grad; }
  /// Gradient buffer, allocated to zeros on first use.
  std::span<double> grad_mut();
  /// Resets an allocated gradient buffer to zeros (allocates if absent).
  void zero_grad();

  /// Deep copy of the values; no gradient, no graph history.
  Tensor clone() const;

  /// True when the two handles share one buffer.
  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  const std::shared_ptr<detail::TensorData>& node() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> d_;
  friend Tensor wrap(std::shared_ptr<detail::TensorData>);
};

inline Tensor wrap(std::shared_ptr<detail::TensorData> d) {
  return Tensor(std::move(d));
}

/// Records the operations of one forward pass in execution order.
///
/// A Tape activates itself for the current thread on construction and
/// restores the previous one on destruction; operations append their
/// backward rules while a tape is active and at least one input is tracked.
/// Nodes are topologically ordered by construction, and backward() replays
/// them once, in reverse. A tape is meant to live for exactly one forward
/// pass and be discarded after backward.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The tape operations currently record onto, or nullptr (no recording).
  static Tape* active() noexcept;

  /// Appends a backward rule together with the node it writes the forward
  /// result to. Output adjoints are reset at the start of every backward
  /// pass, so only graph leaves accumulate across repeated calls.
  void record(std::function<void()> backward_rule,
              std::shared_ptr<detail::TensorData> output);
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every tracked tensor.
  /// Repeated calls without zero_grad accumulate leaf gradients. loss must
  /// have one element.
  void backward(const Tensor& loss);

 private:
  struct Node {
    std::function<void()> rule;
    std::shared_ptr<detail::TensorData> out;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

/// Free-function form of Tape::backward.
void backward(const Tensor& loss, Tape& tape);

}  // namespace af

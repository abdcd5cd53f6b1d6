#include "af/tensor.hpp"

#include <stdexcept>

#include "af/common.hpp"

namespace af {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check_dims(const Shape& shape) {
  for (std::size_t d : shape)
    if (d == 0)
      throw std::invalid_argument(
          msg("tensor shape ", shape_str(shape), " has a zero dimension"));
}

}  // namespace

Tensor Tensor::zeros(Shape shape) {
  check_dims(shape);
  auto d = std::make_shared<detail::TensorData>();
  d->values.assign(numel(shape), 0.0);
  d->shape = std::move(shape);
  return wrap(std::move(d));
}

Tensor Tensor::full(Shape shape, double value) {
  check_dims(shape);
  auto d = std::make_shared<detail::TensorData>();
  d->values.assign(numel(shape), value);
  d->shape = std::move(shape);
  return wrap(std::move(d));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  check_dims(shape);
  if (numel(shape) != values.size())
    throw std::invalid_argument(msg("tensor shape ", shape_str(shape),
                                    " needs ", numel(shape), " values, got ",
                                    values.size()));
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  return wrap(std::move(d));
}

double Tensor::value() const {
  if (size() != 1)
    throw std::invalid_argument(
        msg("value() requires a one-element tensor, shape is ",
            shape_str(shape())));
  return d_->values[0];
}

std::span<double> Tensor::grad_mut() {
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
  return d_->grad;
}

void Tensor::zero_grad() { d_->grad.assign(d_->values.size(), 0.0); }

Tensor Tensor::clone() const {
  auto d = std::make_shared<detail::TensorData>();
  d->shape = d_->shape;
  d->values = d_->values;
  return wrap(std::move(d));
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::function<void()> backward_rule,
                  std::shared_ptr<detail::TensorData> output) {
  nodes_.push_back({std::move(backward_rule), std::move(output)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument(
        msg("backward requires a scalar loss, shape is ",
            loss.defined() ? shape_str(loss.shape()) : "undefined"));
  // Fresh adjoints for everything produced on this tape; leaves keep theirs.
  for (Node& n : nodes_)
    if (!n.out->grad.empty()) n.out->grad.assign(n.out->grad.size(), 0.0);
  Tensor seed = loss;
  seed.grad_mut()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->rule();
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

}  // namespace af

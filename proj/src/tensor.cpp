#include "pcpetl/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace pcpetl {

namespace {

std::atomic<std::uint64_t> next_id{1};
thread_local Tape* current_tape = nullptr;

std::shared_ptr<TensorImpl> make_impl(Shape shape, Buffer values, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  impl->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return impl;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = pcpetl::numel(shape);
  return Tensor(make_impl(std::move(shape), Buffer(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = pcpetl::numel(shape);
  return Tensor(make_impl(std::move(shape), Buffer(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, bool requires_grad) {
  return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  return from(std::move(shape), Buffer(values), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
  if (pcpetl::numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(pcpetl::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw RangeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::clone() const { return Tensor(make_impl(impl_->shape, impl_->data, false)); }

void Tape::record(std::span<const Tensor> inputs, const Tensor& output, BackwardFn fn) {
  Entry e;
  e.output_id = output.id();
  e.output = output.impl();
  e.inputs.reserve(inputs.size());
  for (const auto& t : inputs) {
    e.input_ids.push_back(t.id());
    e.inputs.push_back(t.impl());
  }
  e.backward = std::move(fn);
  entries_.push_back(std::move(e));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor that requires grad");
  }
  std::size_t end = entries_.size();
  // Ops only produce requires-grad outputs while recording, so a loss that is
  // not an entry output is a leaf and has nothing to propagate.
  while (end > 0 && entries_[end - 1].output_id != loss.id()) --end;
  auto& seed = loss.impl()->grad;
  if (seed.empty()) seed.assign(1, 0.0);
  seed[0] += 1.0;
  for (std::size_t i = end; i-- > 0;) {
    auto& e = entries_[i];
    if (e.output->grad.empty()) continue;
    e.backward();
  }
}

TapeGuard::TapeGuard(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeGuard::~TapeGuard() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

}  // namespace pcpetl

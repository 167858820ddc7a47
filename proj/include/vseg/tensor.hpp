#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense N-d array with an optional gradient buffer of the same shape.
// Copies share storage (shallow); clone() makes a deep copy. Gradients
// accumulate additively and are zeroed explicitly by the caller.
template <class T>
class Tensor {
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (std::size_t e : shape)
      if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data.assign(numel(impl_->shape), T(0));
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (T& v : t.impl_->data) v = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    if (values.size() != numel(t.impl_->shape))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(t.impl_->shape));
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (size() != 1) throw std::runtime_error("item(): tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return !impl_->grad.empty(); }

  // Gradient buffer, allocated zero-filled on first use.
  std::vector<T>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    if (impl_->grad.empty()) throw std::runtime_error("grad(): no gradient present");
    return impl_->grad;
  }

  void accumulate_grad(const std::vector<T>& g) {
    auto& dst = grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>(*impl_);
    return t;
  }

  Tensor reshaped_view(Shape new_shape) const {  // same storage, new shape
    if (numel(new_shape) != size())
      throw std::invalid_argument("reshape: " + shape_str(impl_->shape) + " -> " + shape_str(new_shape));
    Tensor t = *this;
    t.impl_->shape = std::move(new_shape);
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape: ops push one closure per node in creation order,
// backward() replays them in reverse exactly once. A tape belongs to one
// logical thread.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every participating tensor.
  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

}  // namespace vseg

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dualrd {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size());
  int64_t acc = 1;
  for (int i = int(s.size()) - 1; i >= 0; --i) {
    st[size_t(i)] = acc;
    acc *= s[size_t(i)];
  }
  return st;
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty unless the tensor accumulates gradient
  bool requires_grad = false;
  int64_t id = -1;
};

template <typename T>
class Tape;

/// Shared-ownership handle to an n-dimensional array. Copies alias the same
/// storage; all operations allocate fresh outputs (buffers are immutable once
/// produced, except for leaf parameters updated by the optimizer between
/// steps).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : n_(std::make_shared<TensorNode<T>>()) {
    n_->shape = std::move(shape);
    n_->data.assign(size_t(numel(n_->shape)), T(0));
    n_->id = Tape<T>::active().issue_id();
    if (requires_grad) set_requires_grad(true);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : n_(std::make_shared<TensorNode<T>>()) {
    if (int64_t(values.size()) != numel(shape))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " +
                                  shape_str(shape));
    n_->shape = std::move(shape);
    n_->data = std::move(values);
    n_->id = Tape<T>::active().issue_id();
    if (requires_grad) set_requires_grad(true);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.node().data) x = v;
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T v) { return Tensor({}, {v}); }

  bool defined() const { return bool(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t ndim() const { return int64_t(n_->shape.size()); }
  int64_t size() const { return int64_t(n_->data.size()); }

  int64_t dim(int i) const {
    int nd = int(n_->shape.size());
    if (i < 0) i += nd;
    if (i < 0 || i >= nd)
      throw std::out_of_range("dim " + std::to_string(i) + " out of range for " +
                              shape_str(n_->shape));
    return n_->shape[size_t(i)];
  }

  T* data() { return n_->data.data(); }
  const T* data() const { return n_->data.data(); }
  std::vector<T>& vec() { return n_->data; }
  const std::vector<T>& vec() const { return n_->data; }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  /// Marks a leaf tensor as a parameter; allocates its gradient buffer.
  void set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    if (rg && n_->grad.size() != n_->data.size())
      n_->grad.assign(n_->data.size(), T(0));
    if (!rg) n_->grad.clear();
  }

  bool has_grad() const { return n_ && !n_->grad.empty(); }
  T* grad() { return n_->grad.data(); }
  const T* grad() const { return n_->grad.data(); }
  std::vector<T>& grad_vec() { return n_->grad; }
  const std::vector<T>& grad_vec() const { return n_->grad; }

  void zero_grad() {
    for (T& g : n_->grad) g = T(0);
  }

  int64_t node_id() const { return n_ ? n_->id : -1; }

  T item() const {
    if (size() != 1)
      throw std::runtime_error("item() on non-scalar tensor " +
                               shape_str(shape()));
    return n_->data[0];
  }

  /// Element access by multi-index; test/debug convenience, not a hot path.
  T at(std::initializer_list<int64_t> idx) const {
    if (int64_t(idx.size()) != ndim())
      throw std::invalid_argument("at(): rank mismatch");
    Shape st = row_major_strides(shape());
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) off += i * st[k++];
    return n_->data[size_t(off)];
  }

  TensorNode<T>& node() { return *n_; }
  const TensorNode<T>& node() const { return *n_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(double(x))) return false;
  return true;
}

/// Reverse-mode tape. Operations append entries in execution order, which is
/// by construction a topological order; backward() walks them once in
/// reverse and then clears the tape.
template <typename T>
class Tape {
 public:
  struct Entry {
    int64_t out_id = -1;
    std::vector<int64_t> in_ids;
    std::shared_ptr<TensorNode<T>> out;  // keeps activation alive; grad checked
    std::function<void()> backward;
  };

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  int64_t issue_id() { return next_id_++; }

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  void record(const std::shared_ptr<TensorNode<T>>& out,
              std::vector<int64_t> in_ids, std::function<void()> fn) {
    Entry e;
    e.out_id = out->id;
    e.in_ids = std::move(in_ids);
    e.out = out;
    e.backward = std::move(fn);
    entries_.push_back(std::move(e));
  }

  size_t num_entries() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Populates d(loss)/d(leaf) for every recorded leaf, then clears the tape.
  /// Returns the number of backward rules executed.
  size_t backward(Tensor<T>& loss) {
    if (loss.size() != 1)
      throw std::runtime_error("backward: loss must be scalar, got " +
                               shape_str(loss.shape()));
    if (entries_.empty())
      throw std::runtime_error("backward: tape is empty");
    if (!loss.requires_grad())
      throw std::runtime_error("backward: loss does not require grad");
    loss.node().grad.assign(1, T(1));
    size_t executed = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!all_finite(it->out->grad))
        throw std::runtime_error("backward: non-finite gradient at node " +
                                 std::to_string(it->out_id));
      it->backward();
      ++executed;
    }
    entries_.clear();
    return executed;
  }

 private:
  std::vector<Entry> entries_;
  int64_t next_id_ = 0;
  bool recording_ = true;
};

/// RAII guard disabling tape recording (inference, data-side math).
template <typename T>
class NoGrad {
 public:
  NoGrad() : prev_(Tape<T>::active().recording()) {
    Tape<T>::active().set_recording(false);
  }
  ~NoGrad() { Tape<T>::active().set_recording(prev_); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

template <typename T>
Tensor<T> backward(Tensor<T>& loss) {
  Tape<T>::active().backward(loss);
  return loss;
}

/// Returns a tensor with the same values that is a constant for autodiff:
/// backward contributes nothing to the ancestors of x.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  out.vec() = x.vec();
  return out;
}

template <typename From, typename To>
Tensor<To> cast(const Tensor<From>& x) {
  Tensor<To> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out.data()[i] = To(x.data()[i]);
  return out;
}

}  // namespace dualrd

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fb/errors.hpp"

namespace fb {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

inline index_t numel_of(const Shape& shape) {
  index_t n = 1;
  for (index_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Row-major strides in elements.
inline std::vector<index_t> row_major_strides(const Shape& shape) {
  std::vector<index_t> strides(shape.size());
  index_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i] = acc;
    acc *= shape[i];
  }
  return strides;
}

template <typename S>
class Tape;

// Gradient storage shared by every copy of a tensor. The cell exists as
// soon as requires_grad is set, so gradients written by a later backward
// pass are visible through any copy, including the one held by a
// ParamStore.
template <typename S>
struct GradCell {
  std::vector<S> values;
  bool present = false;

  void accumulate(const std::vector<S>& g) {
    if (!present) {
      values.assign(g.begin(), g.end());
      present = true;
    } else {
      for (std::size_t i = 0; i < values.size(); ++i) values[i] += g[i];
    }
  }
};

// Dense row-major n-dimensional array over float or double. Copies are
// shallow: they share the data buffer and the gradient cell. Data is
// immutable once a tensor has been consumed by an operation; the gradient
// cell is the only mutable part, and only backward() writes to it.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : shape_{}, data_(std::make_shared<std::vector<S>>(1, S(0))) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(static_cast<std::size_t>(numel_of(shape_)), S(0))) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<S> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<S>>(std::move(values))) {
    check_shape();
    if (static_cast<index_t>(data_->size()) != numel_of(shape_)) {
      throw ShapeError("tensor: " + std::to_string(data_->size()) + " values do not fill shape " +
                       shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

  static Tensor scalar(S value) { return Tensor({}, {value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  index_t numel() const { return static_cast<index_t>(data_->size()); }
  index_t extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }
  std::vector<S>& vec() { return *data_; }
  const std::vector<S>& vec() const { return *data_; }

  S item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  // --- autograd bookkeeping ---

  bool requires_grad() const { return grad_ != nullptr; }

  Tensor& set_requires_grad(bool on) {
    if (on && !grad_) grad_ = std::make_shared<GradCell<S>>();
    if (!on) grad_.reset();
    return *this;
  }

  bool has_grad() const { return grad_ && grad_->present; }

  const std::vector<S>& grad() const {
    if (!has_grad()) throw Error("grad(): no gradient present");
    return grad_->values;
  }

  void clear_grad() {
    if (grad_) {
      grad_->present = false;
      grad_->values.clear();
    }
  }

  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Recording identity; node() >= 0 iff this value participates in a tape.
  int node() const { return node_; }
  Tape<S>* tape() const { return tape_; }
  void attach(Tape<S>* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

  const std::shared_ptr<std::vector<S>>& buffer() const { return data_; }
  const std::shared_ptr<GradCell<S>>& grad_cell() const { return grad_; }

 private:
  void check_shape() const {
    for (index_t d : shape_) {
      if (d < 0) throw ShapeError("tensor: negative extent in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  std::shared_ptr<GradCell<S>> grad_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape (Wengert list). Operations append nodes in execution
// order, which is automatically a topological order; backward() walks the
// list once in reverse. Gradients of multiply-used values accumulate by
// addition. A tape belongs to one logical thread.
template <typename S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Tensor<S>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current_slot() {
    thread_local Tape* current = nullptr;
    return current;
  }

  static Tape* current() { return current_slot(); }

  // Node id for an operation input: an existing recorded value keeps its
  // id, a requires-grad leaf is registered on first sight, anything else
  // is a constant (-1).
  int node_of(const Tensor<S>& t) {
    if (t.tape() == this && t.node() >= 0) return t.node();
    if (!t.requires_grad()) return -1;
    const void* key = t.grad_cell().get();
    auto it = leaf_ids_.find(key);
    if (it != leaf_ids_.end()) return it->second;
    Node node;
    node.needs_grad = true;
    node.leaf = t.grad_cell();
    node.shape = t.shape();
    nodes_.push_back(std::move(node));
    const int id = static_cast<int>(nodes_.size()) - 1;
    leaf_ids_.emplace(key, id);
    return id;
  }

  bool needs_grad(int node) const { return node >= 0 && nodes_[static_cast<std::size_t>(node)].needs_grad; }

  int record(const Shape& out_shape, std::initializer_list<int> inputs, BackFn back) {
    Node node;
    node.shape = out_shape;
    bool needs = false;
    for (int i : inputs) needs = needs || needs_grad(i);
    node.needs_grad = needs;
    if (needs) node.back = std::move(back);
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // During backward: whether the closure should bother producing a
  // gradient for this input.
  bool wants(int node) const { return needs_grad(node); }

  void accumulate(int node, Tensor<S> g) {
    if (node < 0) return;
    auto& slot = grads_[static_cast<std::size_t>(node)];
    if (!slot_filled_[static_cast<std::size_t>(node)]) {
      // First contribution. Clone if the buffer is shared (e.g. a reshape
      // view of another gradient) so later in-place adds cannot corrupt it.
      if (g.buffer().use_count() > 1) {
        Tensor<S> copy(g.shape(), std::vector<S>(g.vec()));
        slot = std::move(copy);
      } else {
        slot = std::move(g);
      }
      slot_filled_[static_cast<std::size_t>(node)] = true;
    } else {
      S* dst = slot.data();
      const S* src = g.data();
      const index_t n = slot.numel();
      for (index_t i = 0; i < n; ++i) dst[i] += src[i];
    }
  }

  // Backpropagates from a scalar loss recorded on this tape. Fills the
  // grad cells of every reachable requires-grad leaf.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (loss.tape() != this || loss.node() < 0) {
      throw Error("backward: loss is not recorded on this tape");
    }
    grads_.assign(nodes_.size(), Tensor<S>());
    slot_filled_.assign(nodes_.size(), 0);
    accumulate(loss.node(), Tensor<S>::ones(loss.shape()));

    // Ops inside closures must not record onto any tape.
    Tape* saved = current_slot();
    current_slot() = nullptr;
    try {
      for (int i = loss.node(); i >= 0; --i) {
        auto& node = nodes_[static_cast<std::size_t>(i)];
        if (!node.needs_grad || !slot_filled_[static_cast<std::size_t>(i)]) continue;
        if (node.back) node.back(*this, grads_[static_cast<std::size_t>(i)]);
      }
    } catch (...) {
      current_slot() = saved;
      throw;
    }
    current_slot() = saved;

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& node = nodes_[i];
      if (node.leaf && node.needs_grad && slot_filled_[i]) {
        node.leaf->accumulate(grads_[i].vec());
      }
    }
    ran_backward_ = true;
  }

  bool has_node_grad(int node) const {
    return ran_backward_ && node >= 0 && node < static_cast<int>(slot_filled_.size()) &&
           slot_filled_[static_cast<std::size_t>(node)];
  }

  // Gradient of the last backward()'s loss with respect to the value
  // recorded at `node`. Used by the saliency tooling to read gradients of
  // interior activations.
  Tensor<S> node_grad(int node) const {
    if (!has_node_grad(node)) throw Error("node_grad: no gradient recorded for node");
    return grads_[static_cast<std::size_t>(node)];
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    bool needs_grad = false;
    BackFn back;
    std::shared_ptr<GradCell<S>> leaf;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_ids_;
  std::vector<Tensor<S>> grads_;
  std::vector<char> slot_filled_;
  bool ran_backward_ = false;
};

// RAII recording scope: while alive, free-function ops record onto `tape`.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::current_slot()) { Tape<S>::current_slot() = &tape; }
  ~TapeScope() { Tape<S>::current_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

}  // namespace fb

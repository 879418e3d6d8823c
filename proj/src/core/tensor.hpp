#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "core/error.hpp"

namespace gmfn {

// All tensors are dense NCHW. Non-image quantities reuse the layout:
// conv weights are (outC, inC, kh, kw), transposed-conv weights are
// (inC, outC, kh, kw), per-channel vectors (bias, PReLU slope) are (1, C, 1, 1)
// and scalars are (1, 1, 1, 1).
struct Shape4 {
  int64_t n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

// Geometry of a (possibly transposed) convolution: square-ish kernel,
// uniform stride, symmetric zero padding.
struct ConvGeometry {
  int kh = 3, kw = 3;
  int stride = 1;
  int pad = 0;

  // forward output extent: floor((in + 2*pad - k) / stride) + 1
  int64_t out_h(int64_t in_h) const { return (in_h + 2 * pad - kh) / stride + 1; }
  int64_t out_w(int64_t in_w) const { return (in_w + 2 * pad - kw) / stride + 1; }
  // transposed output extent: (in - 1) * stride - 2*pad + k
  int64_t tr_out_h(int64_t in_h) const { return (in_h - 1) * stride - 2 * pad + kh; }
  int64_t tr_out_w(int64_t in_w) const { return (in_w - 1) * stride - 2 * pad + kw; }
};

template <class T>
struct TensorData {
  Shape4 shape;
  std::vector<T> v;  // values, size == shape.numel()
  std::vector<T> g;  // gradient; empty means "no gradient has reached this tensor"
  bool requires_grad = false;
  int64_t node = -1;  // producing tape node, -1 for leaves / off-tape results
};

template <class T>
class Tape;

// Value-semantic handle onto shared tensor storage. Tensors are immutable
// after creation except (a) gradient accumulation during backward and
// (b) in-place value updates on leaves (optimizer steps, finite-difference
// probes), which values_mut() enforces.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape4 shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(check_shape(shape), T(0)), requires_grad);
  }
  static Tensor full(Shape4 shape, T value, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(check_shape(shape), value), requires_grad);
  }
  static Tensor from(Shape4 shape, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape.numel())
      fail(Errc::shape, "tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + shape.str());
    return Tensor(shape, std::move(values), requires_grad);
  }

  explicit operator bool() const { return static_cast<bool>(p_); }

  const Shape4& shape() const { return p_->shape; }
  int64_t numel() const { return p_->shape.numel(); }
  bool requires_grad() const { return p_->requires_grad; }
  int64_t node() const { return p_->node; }

  std::span<const T> values() const { return p_->v; }
  const T* data() const { return p_->v.data(); }

  // Leaf-only mutable access; recorded intermediates must stay frozen so the
  // tape's captured inputs remain valid.
  std::span<T> values_mut() {
    if (p_->node >= 0) fail(Errc::internal, "mutating a tensor recorded on a tape");
    return p_->v;
  }

  bool has_grad() const { return !p_->g.empty(); }
  std::span<const T> grad() const {
    if (p_->g.empty()) fail(Errc::internal, "tensor has no gradient");
    return p_->g;
  }
  void zero_grad() { p_->g.clear(); }

  T scalar() const {
    if (numel() != 1) fail(Errc::shape, "scalar() on tensor of shape " + shape().str());
    return p_->v[0];
  }

  // Detached leaf copy sharing no autodiff state (used by the optional
  // feedback-detach toggle).
  Tensor detached() const { return Tensor(p_->shape, p_->v, false); }

  std::shared_ptr<TensorData<T>> ptr() const { return p_; }

 private:
  friend class Tape<T>;
  Tensor(Shape4 shape, std::vector<T> values, bool requires_grad) {
    p_ = std::make_shared<TensorData<T>>();
    p_->shape = shape;
    p_->v = std::move(values);
    p_->requires_grad = requires_grad;
  }
  static int64_t check_shape(const Shape4& s) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
      fail(Errc::shape, "non-positive tensor shape " + s.str());
    return s.numel();
  }

  std::shared_ptr<TensorData<T>> p_;
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward marks the ancestors of the
// loss and replays them once, in reverse.
template <class T>
class Tape {
 public:
  using Data = std::shared_ptr<TensorData<T>>;

  void record(Tensor<T>& out, std::vector<Data> parents, std::function<void()> backward) {
    out.p_->requires_grad = true;
    out.p_->node = static_cast<int64_t>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), out.p_, std::move(backward)});
  }

  // Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
  // the loss. Tensors not on a path to the loss keep an absent gradient.
  void backward(const Tensor<T>& loss);

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Data> parents;
    Data out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

template <class T>
std::vector<T>& grad_buf(TensorData<T>& d) {
  if (d.g.empty()) d.g.assign(d.v.size(), T(0));
  return d.g;
}

// ---- differentiable primitives -------------------------------------------
// Every op takes the recording tape first; a null tape computes the forward
// value only (inference mode).

template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvGeometry& geom);

template <class T>
Tensor<T> conv_transpose2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, const ConvGeometry& geom);

template <class T>
Tensor<T> prelu(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& alpha);

template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const std::vector<Tensor<T>>& xs);

template <class T>
Tensor<T> bilinear_resize(Tape<T>* tape, const Tensor<T>& x, int scale);

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

template <class T>
Tensor<T> add_scalar(Tape<T>* tape, const Tensor<T>& x, T s);

template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

template <class T>
Tensor<T> mul_scalar(Tape<T>* tape, const Tensor<T>& x, T s);

template <class T>
Tensor<T> abs_elem(Tape<T>* tape, const Tensor<T>& x);

template <class T>
Tensor<T> mean_all(Tape<T>* tape, const Tensor<T>& x);

}  // namespace gmfn

#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "core/conv_kernels.hpp"

namespace gmfn {

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) fail(Errc::shape, "backward requires a scalar loss, got " + loss.shape().str());
  if (loss.node() < 0) fail(Errc::shape, "backward requires a loss recorded on this tape");
  const int64_t root = loss.node();
  if (root >= static_cast<int64_t>(nodes_.size()) || nodes_[root].out != loss.ptr())
    fail(Errc::internal, "loss was recorded on a different tape");

  // Mark ancestors of the loss so each relevant node runs exactly once and
  // unrelated subgraphs leave their gradients absent.
  std::vector<char> marked(nodes_.size(), 0);
  std::vector<int64_t> stack{root};
  marked[root] = 1;
  while (!stack.empty()) {
    const int64_t i = stack.back();
    stack.pop_back();
    for (const auto& p : nodes_[i].parents) {
      if (p->node >= 0 && !marked[p->node]) {
        marked[p->node] = 1;
        stack.push_back(p->node);
      }
    }
  }

  grad_buf(*loss.ptr())[0] += T(1);
  for (int64_t i = root; i >= 0; --i) {
    if (!marked[i]) continue;
    if (nodes_[i].out->g.empty()) continue;  // no gradient flowed to this node
    nodes_[i].backward();
  }
}

namespace {

template <class T>
bool want_record(Tape<T>* tape, std::initializer_list<const Tensor<T>*> parents) {
  if (!tape) return false;
  for (const auto* p : parents)
    if (*p && p->requires_grad()) return true;
  return false;
}

template <class T>
void require_same_shape(const Tensor<T>& x, const Tensor<T>& y, const char* op) {
  if (!(x.shape() == y.shape()))
    fail(Errc::shape, std::string(op) + ": shape mismatch " + x.shape().str() + " vs " + y.shape().str());
}

}  // namespace

// ---- convolution -----------------------------------------------------------

template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvGeometry& geom) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  if (xs.c != ws.c)
    fail(Errc::shape, "conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                          std::to_string(ws.c));
  if (ws.h != geom.kh || ws.w != geom.kw)
    fail(Errc::shape, "conv2d: kernel tensor " + ws.str() + " does not match geometry " +
                          std::to_string(geom.kh) + "x" + std::to_string(geom.kw));
  if (b && b.numel() != ws.n)
    fail(Errc::shape, "conv2d: bias length " + std::to_string(b.numel()) + " != out channels " +
                          std::to_string(ws.n));
  const Shape4 ys{xs.n, ws.n, geom.out_h(xs.h), geom.out_w(xs.w)};
  if (ys.h <= 0 || ys.w <= 0)
    fail(Errc::shape, "conv2d: non-positive output dims for input " + xs.str());

  Tensor<T> y = Tensor<T>::zeros(ys);
  kern::conv_fwd(x.data(), w.data(), b ? b.data() : nullptr,
                 y.values_mut().data(), false, xs.n, xs.c, xs.h, xs.w, ws.n, geom.kh,
                 geom.kw, geom.stride, geom.pad, ys.h, ys.w);

  if (want_record(tape, {&x, &w, &b})) {
    auto xd = x.ptr(), wd = w.ptr(), yd = y.ptr();
    auto bd = b ? b.ptr() : nullptr;
    std::vector<typename Tape<T>::Data> parents{xd, wd};
    if (bd) parents.push_back(bd);
    tape->record(y, std::move(parents), [xd, wd, bd, yd, geom] {
      const auto& xs2 = xd->shape;
      const auto& ws2 = wd->shape;
      const auto& ys2 = yd->shape;
      const T* dy = yd->g.data();
      if (xd->requires_grad)
        kern::conv_dx(dy, wd->v.data(), grad_buf(*xd).data(), xs2.n, xs2.c, xs2.h, xs2.w, ws2.n,
                      geom.kh, geom.kw, geom.stride, geom.pad, ys2.h, ys2.w);
      if (wd->requires_grad)
        kern::conv_dw(xd->v.data(), dy, grad_buf(*wd).data(), xs2.n, xs2.c, xs2.h, xs2.w, ws2.n,
                      geom.kh, geom.kw, geom.stride, geom.pad, ys2.h, ys2.w);
      if (bd && bd->requires_grad)
        kern::conv_db(dy, grad_buf(*bd).data(), ys2.n, ys2.c, ys2.h, ys2.w);
    });
  }
  return y;
}

template <class T>
Tensor<T> conv_transpose2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, const ConvGeometry& geom) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();  // (inC, outC, kh, kw)
  if (xs.c != ws.n)
    fail(Errc::shape, "conv_transpose2d: input has " + std::to_string(xs.c) +
                          " channels, kernel expects " + std::to_string(ws.n));
  if (ws.h != geom.kh || ws.w != geom.kw)
    fail(Errc::shape, "conv_transpose2d: kernel tensor " + ws.str() + " does not match geometry");
  if (b && b.numel() != ws.c)
    fail(Errc::shape, "conv_transpose2d: bias length " + std::to_string(b.numel()) +
                          " != out channels " + std::to_string(ws.c));
  const Shape4 ys{xs.n, ws.c, geom.tr_out_h(xs.h), geom.tr_out_w(xs.w)};
  if (ys.h <= 0 || ys.w <= 0)
    fail(Errc::shape, "conv_transpose2d: non-positive output dims for input " + xs.str());

  // Forward scatter is the adjoint of conv2d with identical geometry, so it
  // reuses conv_dx with the roles of x and y exchanged.
  Tensor<T> y = Tensor<T>::zeros(ys);
  kern::conv_dx(x.data(), w.data(), y.values_mut().data(), ys.n, ys.c, ys.h, ys.w, xs.c,
                geom.kh, geom.kw, geom.stride, geom.pad, xs.h, xs.w);
  if (b)
    kern::add_channel_bias(y.values_mut().data(), b.data(), ys.n, ys.c, ys.h * ys.w);

  if (want_record(tape, {&x, &w, &b})) {
    auto xd = x.ptr(), wd = w.ptr(), yd = y.ptr();
    auto bd = b ? b.ptr() : nullptr;
    std::vector<typename Tape<T>::Data> parents{xd, wd};
    if (bd) parents.push_back(bd);
    tape->record(y, std::move(parents), [xd, wd, bd, yd, geom] {
      const auto& xs2 = xd->shape;
      const auto& ys2 = yd->shape;
      const T* dy = yd->g.data();
      if (xd->requires_grad)
        kern::conv_fwd(dy, wd->v.data(), static_cast<const T*>(nullptr),
                       grad_buf(*xd).data(), true, ys2.n, ys2.c, ys2.h, ys2.w, xs2.c, geom.kh,
                       geom.kw, geom.stride, geom.pad, xs2.h, xs2.w);
      if (wd->requires_grad)
        kern::conv_dw(dy, xd->v.data(), grad_buf(*wd).data(), ys2.n, ys2.c, ys2.h, ys2.w, xs2.c,
                      geom.kh, geom.kw, geom.stride, geom.pad, xs2.h, xs2.w);
      if (bd && bd->requires_grad)
        kern::conv_db(dy, grad_buf(*bd).data(), ys2.n, ys2.c, ys2.h, ys2.w);
    });
  }
  return y;
}

// ---- pointwise and structural ops ------------------------------------------

template <class T>
Tensor<T> prelu(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& alpha) {
  const Shape4& xs = x.shape();
  if (alpha.numel() != xs.c)
    fail(Errc::shape, "prelu: alpha length " + std::to_string(alpha.numel()) +
                          " != channels " + std::to_string(xs.c));
  Tensor<T> y = Tensor<T>::zeros(xs);
  {
    const T* xp = x.data();
    const T* ap = alpha.data();
    T* yp = y.values_mut().data();
    const int64_t hw = xs.h * xs.w;
    for (int64_t in = 0; in < xs.n; ++in)
      for (int64_t c = 0; c < xs.c; ++c) {
        const T a = ap[c];
        const T* xr = xp + (in * xs.c + c) * hw;
        T* yr = yp + (in * xs.c + c) * hw;
        for (int64_t i = 0; i < hw; ++i) yr[i] = xr[i] >= T(0) ? xr[i] : a * xr[i];
      }
  }
  if (want_record(tape, {&x, &alpha})) {
    auto xd = x.ptr(), ad = alpha.ptr(), yd = y.ptr();
    tape->record(y, {xd, ad}, [xd, ad, yd] {
      const Shape4& s = xd->shape;
      const int64_t hw = s.h * s.w;
      const T* dy = yd->g.data();
      const T* xp = xd->v.data();
      T* dx = xd->requires_grad ? grad_buf(*xd).data() : nullptr;
      T* da = ad->requires_grad ? grad_buf(*ad).data() : nullptr;
      for (int64_t in = 0; in < s.n; ++in)
        for (int64_t c = 0; c < s.c; ++c) {
          const T a = ad->v[c];
          const int64_t off = (in * s.c + c) * hw;
          T acc = 0;
          for (int64_t i = 0; i < hw; ++i) {
            const T xv = xp[off + i];
            const T g = dy[off + i];
            if (dx) dx[off + i] += xv >= T(0) ? g : a * g;
            if (da && xv < T(0)) acc += g * xv;
          }
          if (da) da[c] += acc;
        }
    });
  }
  return y;
}

template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) fail(Errc::shape, "concat_channels: empty input list");
  const Shape4& s0 = xs[0].shape();
  int64_t ctotal = 0;
  for (const auto& x : xs) {
    const Shape4& s = x.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      fail(Errc::shape, "concat_channels: spatial/batch mismatch " + s.str() + " vs " + s0.str());
    ctotal += s.c;
  }
  const Shape4 ys{s0.n, ctotal, s0.h, s0.w};
  Tensor<T> y = Tensor<T>::zeros(ys);
  {
    T* yp = y.values_mut().data();
    const int64_t hw = s0.h * s0.w;
    for (int64_t in = 0; in < s0.n; ++in) {
      int64_t coff = 0;
      for (const auto& x : xs) {
        const int64_t xc = x.shape().c;
        std::copy_n(x.data() + in * xc * hw, xc * hw, yp + (in * ctotal + coff) * hw);
        coff += xc;
      }
    }
  }
  bool rec = tape != nullptr;
  if (rec) {
    rec = false;
    for (const auto& x : xs) rec = rec || x.requires_grad();
  }
  if (rec) {
    std::vector<typename Tape<T>::Data> parents;
    parents.reserve(xs.size());
    for (const auto& x : xs) parents.push_back(x.ptr());
    auto yd = y.ptr();
    tape->record(y, std::vector<typename Tape<T>::Data>(parents), [parents, yd, ctotal] {
      const Shape4& ys2 = yd->shape;
      const int64_t hw = ys2.h * ys2.w;
      const T* dy = yd->g.data();
      for (int64_t in = 0; in < ys2.n; ++in) {
        int64_t coff = 0;
        for (const auto& p : parents) {
          const int64_t xc = p->shape.c;
          if (p->requires_grad) {
            T* dx = grad_buf(*p).data() + in * xc * hw;
            const T* src = dy + (in * ctotal + coff) * hw;
            for (int64_t i = 0; i < xc * hw; ++i) dx[i] += src[i];
          }
          coff += xc;
        }
      }
    });
  }
  return y;
}

namespace {

// Half-pixel-center sampling: output pixel i reads input at
// (i + 0.5) / scale - 0.5, clamped to the valid range.
struct BilinearAxis {
  std::vector<int64_t> i0, i1;
  std::vector<double> w0;
};

inline BilinearAxis bilinear_axis(int64_t in, int64_t out, int scale) {
  BilinearAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w0.resize(out);
  for (int64_t i = 0; i < out; ++i) {
    double u = (static_cast<double>(i) + 0.5) / scale - 0.5;
    double f = std::floor(u);
    int64_t lo = static_cast<int64_t>(f);
    double t = u - f;
    int64_t hi = lo + 1;
    lo = std::clamp<int64_t>(lo, 0, in - 1);
    hi = std::clamp<int64_t>(hi, 0, in - 1);
    ax.i0[i] = lo;
    ax.i1[i] = hi;
    ax.w0[i] = 1.0 - t;
  }
  return ax;
}

}  // namespace

template <class T>
Tensor<T> bilinear_resize(Tape<T>* tape, const Tensor<T>& x, int scale) {
  if (scale < 2 || scale > 4)
    fail(Errc::config, "bilinear_resize: unsupported scale " + std::to_string(scale));
  const Shape4& xs = x.shape();
  const Shape4 ys{xs.n, xs.c, xs.h * scale, xs.w * scale};
  const BilinearAxis ay = bilinear_axis(xs.h, ys.h, scale);
  const BilinearAxis axw = bilinear_axis(xs.w, ys.w, scale);

  Tensor<T> y = Tensor<T>::zeros(ys);
  {
    T* yp = y.values_mut().data();
    const T* xp = x.data();
    for (int64_t nc = 0; nc < xs.n * xs.c; ++nc) {
      const T* xpl = xp + nc * xs.h * xs.w;
      T* ypl = yp + nc * ys.h * ys.w;
      for (int64_t oy = 0; oy < ys.h; ++oy) {
        const T wy0 = static_cast<T>(ay.w0[oy]);
        const T wy1 = T(1) - wy0;
        const T* r0 = xpl + ay.i0[oy] * xs.w;
        const T* r1 = xpl + ay.i1[oy] * xs.w;
        T* yrow = ypl + oy * ys.w;
        for (int64_t ox = 0; ox < ys.w; ++ox) {
          const T wx0 = static_cast<T>(axw.w0[ox]);
          const T wx1 = T(1) - wx0;
          yrow[ox] = wy0 * (wx0 * r0[axw.i0[ox]] + wx1 * r0[axw.i1[ox]]) +
                     wy1 * (wx0 * r1[axw.i0[ox]] + wx1 * r1[axw.i1[ox]]);
        }
      }
    }
  }
  if (want_record(tape, {&x})) {
    auto xd = x.ptr(), yd = y.ptr();
    tape->record(y, {xd}, [xd, yd, ay, axw] {
      const Shape4& s = xd->shape;
      const Shape4& ys2 = yd->shape;
      const T* dy = yd->g.data();
      T* dx = grad_buf(*xd).data();
      for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const T* dyp = dy + nc * ys2.h * ys2.w;
        T* dxp = dx + nc * s.h * s.w;
        for (int64_t oy = 0; oy < ys2.h; ++oy) {
          const T wy0 = static_cast<T>(ay.w0[oy]);
          const T wy1 = T(1) - wy0;
          T* d0 = dxp + ay.i0[oy] * s.w;
          T* d1 = dxp + ay.i1[oy] * s.w;
          const T* dyrow = dyp + oy * ys2.w;
          for (int64_t ox = 0; ox < ys2.w; ++ox) {
            const T wx0 = static_cast<T>(axw.w0[ox]);
            const T wx1 = T(1) - wx0;
            const T g = dyrow[ox];
            d0[axw.i0[ox]] += wy0 * wx0 * g;
            d0[axw.i1[ox]] += wy0 * wx1 * g;
            d1[axw.i0[ox]] += wy1 * wx0 * g;
            d1[axw.i1[ox]] += wy1 * wx1 * g;
          }
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "add");
  Tensor<T> z = Tensor<T>::zeros(x.shape());
  T* zp = z.values_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) zp[i] = x.data()[i] + y.data()[i];
  if (want_record(tape, {&x, &y})) {
    auto xd = x.ptr(), yd = y.ptr(), zd = z.ptr();
    tape->record(z, {xd, yd}, [xd, yd, zd] {
      const T* dz = zd->g.data();
      const int64_t n = static_cast<int64_t>(zd->v.size());
      if (xd->requires_grad) {
        T* dx = grad_buf(*xd).data();
        for (int64_t i = 0; i < n; ++i) dx[i] += dz[i];
      }
      if (yd->requires_grad) {
        T* dy = grad_buf(*yd).data();
        for (int64_t i = 0; i < n; ++i) dy[i] += dz[i];
      }
    });
  }
  return z;
}

template <class T>
Tensor<T> add_scalar(Tape<T>* tape, const Tensor<T>& x, T s) {
  Tensor<T> z = Tensor<T>::zeros(x.shape());
  T* zp = z.values_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) zp[i] = x.data()[i] + s;
  if (want_record(tape, {&x})) {
    auto xd = x.ptr(), zd = z.ptr();
    tape->record(z, {xd}, [xd, zd] {
      const T* dz = zd->g.data();
      T* dx = grad_buf(*xd).data();
      for (size_t i = 0; i < zd->v.size(); ++i) dx[i] += dz[i];
    });
  }
  return z;
}

template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "sub");
  Tensor<T> z = Tensor<T>::zeros(x.shape());
  T* zp = z.values_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) zp[i] = x.data()[i] - y.data()[i];
  if (want_record(tape, {&x, &y})) {
    auto xd = x.ptr(), yd = y.ptr(), zd = z.ptr();
    tape->record(z, {xd, yd}, [xd, yd, zd] {
      const T* dz = zd->g.data();
      const int64_t n = static_cast<int64_t>(zd->v.size());
      if (xd->requires_grad) {
        T* dx = grad_buf(*xd).data();
        for (int64_t i = 0; i < n; ++i) dx[i] += dz[i];
      }
      if (yd->requires_grad) {
        T* dy = grad_buf(*yd).data();
        for (int64_t i = 0; i < n; ++i) dy[i] -= dz[i];
      }
    });
  }
  return z;
}

template <class T>
Tensor<T> mul_scalar(Tape<T>* tape, const Tensor<T>& x, T s) {
  Tensor<T> z = Tensor<T>::zeros(x.shape());
  T* zp = z.values_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) zp[i] = x.data()[i] * s;
  if (want_record(tape, {&x})) {
    auto xd = x.ptr(), zd = z.ptr();
    tape->record(z, {xd}, [xd, zd, s] {
      const T* dz = zd->g.data();
      T* dx = grad_buf(*xd).data();
      for (size_t i = 0; i < zd->v.size(); ++i) dx[i] += s * dz[i];
    });
  }
  return z;
}

template <class T>
Tensor<T> abs_elem(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> z = Tensor<T>::zeros(x.shape());
  T* zp = z.values_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) zp[i] = std::abs(x.data()[i]);
  if (want_record(tape, {&x})) {
    auto xd = x.ptr(), zd = z.ptr();
    tape->record(z, {xd}, [xd, zd] {
      // subgradient 0 at the kink
      const T* dz = zd->g.data();
      const T* xv = xd->v.data();
      T* dx = grad_buf(*xd).data();
      for (size_t i = 0; i < zd->v.size(); ++i) {
        if (xv[i] > T(0))
          dx[i] += dz[i];
        else if (xv[i] < T(0))
          dx[i] -= dz[i];
      }
    });
  }
  return z;
}

template <class T>
Tensor<T> mean_all(Tape<T>* tape, const Tensor<T>& x) {
  const int64_t n = x.numel();
  T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  const T* xp = x.data();
  int64_t i = 0;
  for (; i + 3 < n; i += 4) {
    a0 += xp[i];
    a1 += xp[i + 1];
    a2 += xp[i + 2];
    a3 += xp[i + 3];
  }
  for (; i < n; ++i) a0 += xp[i];
  Tensor<T> z = Tensor<T>::from({1, 1, 1, 1}, {((a0 + a1) + (a2 + a3)) / static_cast<T>(n)});
  if (want_record(tape, {&x})) {
    auto xd = x.ptr(), zd = z.ptr();
    tape->record(z, {xd}, [xd, zd, n] {
      const T g = zd->g[0] / static_cast<T>(n);
      T* dx = grad_buf(*xd).data();
      for (int64_t j = 0; j < n; ++j) dx[j] += g;
    });
  }
  return z;
}

#define GMFN_INSTANTIATE_OPS(T)                                                                \
  template class Tape<T>;                                                                      \
  template Tensor<T> conv2d<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                               const ConvGeometry&);                                           \
  template Tensor<T> conv_transpose2d<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&,         \
                                         const Tensor<T>&, const ConvGeometry&);               \
  template Tensor<T> prelu<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> concat_channels<T>(Tape<T>*, const std::vector<Tensor<T>>&);              \
  template Tensor<T> bilinear_resize<T>(Tape<T>*, const Tensor<T>&, int);                      \
  template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> add_scalar<T>(Tape<T>*, const Tensor<T>&, T);                             \
  template Tensor<T> sub<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> mul_scalar<T>(Tape<T>*, const Tensor<T>&, T);                             \
  template Tensor<T> abs_elem<T>(Tape<T>*, const Tensor<T>&);                                  \
  template Tensor<T> mean_all<T>(Tape<T>*, const Tensor<T>&);

GMFN_INSTANTIATE_OPS(float)
GMFN_INSTANTIATE_OPS(double)
#undef GMFN_INSTANTIATE_OPS

}  // namespace gmfn

#pragma once

#include <cstdint>

namespace gmfn::kern {

// Raw direct-convolution kernels shared by conv2d and conv_transpose2d in
// both directions. Dimension names follow the plain convolution:
//   x  : (n, ci, h, w)        y/dy : (n, co, oh, ow)
//   wt : (co, ci, kh, kw)     index map ih = oh*stride - pad + kh
//
// Loop orders are fixed and documented here because the spec of this module
// requires deterministic, reproducible accumulation:
//   conv_fwd : (n,co) plane -> ci -> kh -> kw -> oh -> ow   (axpy into rows)
//   conv_dx  : (n,ci) plane -> co -> kh -> kw -> oh -> ow   (axpy into rows)
//   conv_dw  : (co,ci) pair -> kh -> kw -> n -> oh -> ow    (4-lane dot)
//   conv_db  : co -> n -> oh -> ow                          (4-lane sum)
// Threads split only the outermost plane/pair loop, so every output element
// is accumulated by exactly one thread in the same order regardless of the
// thread count.

template <class T>
void conv_fwd(const T* x, const T* wt, const T* bias, T* y, bool accumulate, int64_t n,
              int64_t ci, int64_t h, int64_t w, int64_t co, int64_t kh, int64_t kw,
              int64_t stride, int64_t pad, int64_t oh, int64_t ow);

// dx += conv-transpose(dy, wt); also the forward pass of conv_transpose2d.
template <class T>
void conv_dx(const T* dy, const T* wt, T* dx, int64_t n, int64_t ci, int64_t h, int64_t w,
             int64_t co, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
             int64_t ow);

// dw += correlation(x, dy)
template <class T>
void conv_dw(const T* x, const T* dy, T* dw, int64_t n, int64_t ci, int64_t h, int64_t w,
             int64_t co, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
             int64_t ow);

// db[c] += sum over batch and spatial of dy
template <class T>
void conv_db(const T* dy, T* db, int64_t n, int64_t co, int64_t oh, int64_t ow);

// y[n,c,:,:] += bias[c]
template <class T>
void add_channel_bias(T* y, const T* bias, int64_t n, int64_t c, int64_t hw);

}  // namespace gmfn::kern

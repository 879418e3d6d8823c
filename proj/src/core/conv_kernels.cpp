#include "core/conv_kernels.hpp"

#include <algorithm>

namespace gmfn::kern {

namespace {

// Valid output range for a fixed kernel tap: 0 <= o*stride - pad + k <= in-1.
inline void tap_range(int64_t in, int64_t out, int64_t stride, int64_t pad, int64_t k,
                      int64_t& lo, int64_t& hi) {
  // smallest o with o*stride >= pad - k
  int64_t num = pad - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  // largest o with o*stride <= in - 1 + pad - k
  int64_t num2 = in - 1 + pad - k;
  hi = num2 < 0 ? -1 : num2 / stride;
  hi = std::min(hi, out - 1);
  lo = std::max<int64_t>(lo, 0);
}

}  // namespace

template <class T>
void conv_fwd(const T* x, const T* wt, const T* bias, T* y, bool accumulate, int64_t n,
              int64_t ci, int64_t h, int64_t w, int64_t co, int64_t kh, int64_t kw,
              int64_t stride, int64_t pad, int64_t oh, int64_t ow) {
  const int64_t planes = n * co;
#pragma omp parallel for schedule(static)
  for (int64_t plane = 0; plane < planes; ++plane) {
    const int64_t in = plane / co;
    const int64_t oc = plane % co;
    T* yp = y + (in * co + oc) * oh * ow;
    if (!accumulate) {
      const T b = bias ? bias[oc] : T(0);
      std::fill(yp, yp + oh * ow, b);
    } else if (bias) {
      const T b = bias[oc];
      for (int64_t i = 0; i < oh * ow; ++i) yp[i] += b;
    }
    for (int64_t ic = 0; ic < ci; ++ic) {
      const T* xp = x + (in * ci + ic) * h * w;
      const T* wp = wt + (oc * ci + ic) * kh * kw;
      for (int64_t ky = 0; ky < kh; ++ky) {
        int64_t oy_lo, oy_hi;
        tap_range(h, oh, stride, pad, ky, oy_lo, oy_hi);
        for (int64_t kx = 0; kx < kw; ++kx) {
          const T wv = wp[ky * kw + kx];
          if (wv == T(0)) continue;
          int64_t ox_lo, ox_hi;
          tap_range(w, ow, stride, pad, kx, ox_lo, ox_hi);
          for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            const T* xrow = xp + (oy * stride - pad + ky) * w + (kx - pad);
            T* yrow = yp + oy * ow;
            if (stride == 1) {
              for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) yrow[ox] += wv * xrow[ox];
            } else {
              for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) yrow[ox] += wv * xrow[ox * stride];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_dx(const T* dy, const T* wt, T* dx, int64_t n, int64_t ci, int64_t h, int64_t w,
             int64_t co, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
             int64_t ow) {
  const int64_t planes = n * ci;
#pragma omp parallel for schedule(static)
  for (int64_t plane = 0; plane < planes; ++plane) {
    const int64_t in = plane / ci;
    const int64_t ic = plane % ci;
    T* dxp = dx + (in * ci + ic) * h * w;
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* dyp = dy + (in * co + oc) * oh * ow;
      const T* wp = wt + (oc * ci + ic) * kh * kw;
      for (int64_t ky = 0; ky < kh; ++ky) {
        int64_t oy_lo, oy_hi;
        tap_range(h, oh, stride, pad, ky, oy_lo, oy_hi);
        for (int64_t kx = 0; kx < kw; ++kx) {
          const T wv = wp[ky * kw + kx];
          if (wv == T(0)) continue;
          int64_t ox_lo, ox_hi;
          tap_range(w, ow, stride, pad, kx, ox_lo, ox_hi);
          for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            const T* dyrow = dyp + oy * ow;
            T* dxrow = dxp + (oy * stride - pad + ky) * w + (kx - pad);
            if (stride == 1) {
              for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) dxrow[ox] += wv * dyrow[ox];
            } else {
              for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) dxrow[ox * stride] += wv * dyrow[ox];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_dw(const T* x, const T* dy, T* dw, int64_t n, int64_t ci, int64_t h, int64_t w,
             int64_t co, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
             int64_t ow) {
  const int64_t pairs = co * ci;
#pragma omp parallel for schedule(static)
  for (int64_t pair = 0; pair < pairs; ++pair) {
    const int64_t oc = pair / ci;
    const int64_t ic = pair % ci;
    T* dwp = dw + (oc * ci + ic) * kh * kw;
    for (int64_t ky = 0; ky < kh; ++ky) {
      int64_t oy_lo, oy_hi;
      tap_range(h, oh, stride, pad, ky, oy_lo, oy_hi);
      for (int64_t kx = 0; kx < kw; ++kx) {
        int64_t ox_lo, ox_hi;
        tap_range(w, ow, stride, pad, kx, ox_lo, ox_hi);
        // Four split accumulators keep the sum order fixed in source while
        // letting the compiler vectorize the stride-1 dot products.
        T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
        for (int64_t in = 0; in < n; ++in) {
          const T* xp = x + (in * ci + ic) * h * w;
          const T* dyp = dy + (in * co + oc) * oh * ow;
          for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            const T* dyrow = dyp + oy * ow;
            const T* xrow = xp + (oy * stride - pad + ky) * w + (kx - pad);
            int64_t ox = ox_lo;
            if (stride == 1) {
              for (; ox + 3 <= ox_hi; ox += 4) {
                a0 += dyrow[ox] * xrow[ox];
                a1 += dyrow[ox + 1] * xrow[ox + 1];
                a2 += dyrow[ox + 2] * xrow[ox + 2];
                a3 += dyrow[ox + 3] * xrow[ox + 3];
              }
              for (; ox <= ox_hi; ++ox) a0 += dyrow[ox] * xrow[ox];
            } else {
              for (; ox <= ox_hi; ++ox) a0 += dyrow[ox] * xrow[ox * stride];
            }
          }
        }
        dwp[ky * kw + kx] += (a0 + a1) + (a2 + a3);
      }
    }
  }
}

template <class T>
void conv_db(const T* dy, T* db, int64_t n, int64_t co, int64_t oh, int64_t ow) {
  const int64_t hw = oh * ow;
#pragma omp parallel for schedule(static)
  for (int64_t oc = 0; oc < co; ++oc) {
    T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    for (int64_t in = 0; in < n; ++in) {
      const T* dyp = dy + (in * co + oc) * hw;
      int64_t i = 0;
      for (; i + 3 < hw; i += 4) {
        a0 += dyp[i];
        a1 += dyp[i + 1];
        a2 += dyp[i + 2];
        a3 += dyp[i + 3];
      }
      for (; i < hw; ++i) a0 += dyp[i];
    }
    db[oc] += (a0 + a1) + (a2 + a3);
  }
}

template <class T>
void add_channel_bias(T* y, const T* bias, int64_t n, int64_t c, int64_t hw) {
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic) {
      T* yp = y + (in * c + ic) * hw;
      const T b = bias[ic];
      for (int64_t i = 0; i < hw; ++i) yp[i] += b;
    }
}

#define GMFN_INSTANTIATE(T)                                                                      \
  template void conv_fwd<T>(const T*, const T*, const T*, T*, bool, int64_t, int64_t, int64_t,  \
                            int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,      \
                            int64_t);                                                            \
  template void conv_dx<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t, \
                           int64_t, int64_t, int64_t, int64_t, int64_t, int64_t);                \
  template void conv_dw<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t, \
                           int64_t, int64_t, int64_t, int64_t, int64_t, int64_t);                \
  template void conv_db<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t);                    \
  template void add_channel_bias<T>(T*, const T*, int64_t, int64_t, int64_t);

GMFN_INSTANTIATE(float)
GMFN_INSTANTIATE(double)
#undef GMFN_INSTANTIATE

}  // namespace gmfn::kern

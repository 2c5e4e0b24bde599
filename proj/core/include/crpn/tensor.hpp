#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crpn/errors.hpp"

namespace crpn {

// Dense 4-D array (batch, channel, height, width), row-major, contiguous.
template <typename T>
struct Tensor4T {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor4T() = default;
  Tensor4T(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

  static Tensor4T filled(int n_, int c_, int h_, int w_, T value) {
    Tensor4T t(n_, c_, h_, w_);
    for (auto& v : t.data) v = value;
    return t;
  }

  std::size_t size() const { return data.size(); }

  T& at(int i, int j, int y, int x) {
    return data[((static_cast<std::size_t>(i) * c + j) * h + y) * w + x];
  }
  T at(int i, int j, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c + j) * h + y) * w + x];
  }

  bool same_shape(const Tensor4T& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }

  template <typename U>
  Tensor4T<U> cast() const {
    Tensor4T<U> out(n, c, h, w);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// Per-tap fractional sampling offsets (dy, dx) relative to the regular grid,
// one entry per output location and kernel tap. Layout (h, w, K, 2).
template <typename T>
struct OffsetFieldT {
  int h = 0, w = 0, taps = 0;
  std::vector<T> data;

  OffsetFieldT() = default;
  OffsetFieldT(int h_, int w_, int taps_)
      : h(h_), w(w_), taps(taps_),
        data(static_cast<std::size_t>(h_) * w_ * taps_ * 2, T(0)) {}

  T& dy(int y, int x, int k) {
    return data[((static_cast<std::size_t>(y) * w + x) * taps + k) * 2];
  }
  T& dx(int y, int x, int k) {
    return data[((static_cast<std::size_t>(y) * w + x) * taps + k) * 2 + 1];
  }
  T dy(int y, int x, int k) const {
    return data[((static_cast<std::size_t>(y) * w + x) * taps + k) * 2];
  }
  T dx(int y, int x, int k) const {
    return data[((static_cast<std::size_t>(y) * w + x) * taps + k) * 2 + 1];
  }

  template <typename U>
  OffsetFieldT<U> cast() const {
    OffsetFieldT<U> out(h, w, taps);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// Convolution weights plus bias. Kernel sides must be odd so taps are centered;
// zero padding keeps spatial dims at stride 1.
template <typename T>
struct ConvParamsT {
  Tensor4T<T> weights;  // (out_c, in_c, kh, kw)
  Tensor4T<T> bias;     // (1, out_c, 1, 1)
  int dilation = 1;
  int stride = 1;

  int out_channels() const { return weights.n; }
  int in_channels() const { return weights.c; }
  int kh() const { return weights.h; }
  int kw() const { return weights.w; }
};

template <typename T>
struct ConvGradsT {
  Tensor4T<T> grad_x;
  Tensor4T<T> grad_w;
  Tensor4T<T> grad_bias;
};

// y[p] = sum_r w[r] * x[p + r] + bias, zero padding, "same" output at stride 1.
template <typename T>
Tensor4T<T> conv2d(const Tensor4T<T>& x, const ConvParamsT<T>& p);

template <typename T>
ConvGradsT<T> conv2d_backward(const Tensor4T<T>& grad_y, const Tensor4T<T>& x,
                              const ConvParamsT<T>& p);

// y[p] = sum_k w[k] * sample(x, p + r_k + o[p,k]); fractional positions are
// read with bilinear interpolation, out-of-bounds samples read as zero.
template <typename T>
Tensor4T<T> adaptive_conv(const Tensor4T<T>& x, const ConvParamsT<T>& p,
                          const OffsetFieldT<T>& o);

template <typename T>
ConvGradsT<T> adaptive_conv_backward(const Tensor4T<T>& grad_y, const Tensor4T<T>& x,
                                     const ConvParamsT<T>& p, const OffsetFieldT<T>& o);

template <typename T>
T bilinear_sample(const Tensor4T<T>& x, int img, int ch, T py, T px);

template <typename T>
Tensor4T<T> relu(const Tensor4T<T>& x);

// grad wrt the input of relu, given the forward input.
template <typename T>
Tensor4T<T> relu_backward(const Tensor4T<T>& grad_y, const Tensor4T<T>& x);

// v <- momentum * v + g; p <- p - lr * v
template <typename T>
void sgd_step(const std::vector<Tensor4T<T>*>& params,
              const std::vector<const Tensor4T<T>*>& grads, T lr, T momentum,
              const std::vector<Tensor4T<T>*>& buffers);

using Tensor4 = Tensor4T<float>;
using OffsetField = OffsetFieldT<float>;
using ConvParams = ConvParamsT<float>;
using ConvGrads = ConvGradsT<float>;

extern template struct Tensor4T<float>;
extern template struct Tensor4T<double>;

}  // namespace crpn

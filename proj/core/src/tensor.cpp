#include "crpn/tensor.hpp"

#include <cmath>

namespace crpn {

namespace {

// C[m, n] += A[m, k] * B[k, n]. Fixed k-ascending accumulation order per
// output element, so results do not depend on how callers batch the work.
template <typename T>
void gemm_acc(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int m = 0; m < M; ++m) {
    T* crow = C + static_cast<std::size_t>(m) * N;
    const T* arow = A + static_cast<std::size_t>(m) * K;
    for (int k = 0; k < K; ++k) {
      const T a = arow[k];
      if (a == T(0)) continue;
      const T* brow = B + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[m, n] += A[k, m] * B[k, n]  (A transposed)
template <typename T>
void gemm_aT_acc(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int k = 0; k < K; ++k) {
    const T* arow = A + static_cast<std::size_t>(k) * M;
    const T* brow = B + static_cast<std::size_t>(k) * N;
    for (int m = 0; m < M; ++m) {
      const T a = arow[m];
      if (a == T(0)) continue;
      T* crow = C + static_cast<std::size_t>(m) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[m, n] += A[m, k] * B[n, k]  (B transposed)
template <typename T>
void gemm_bT_acc(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int m = 0; m < M; ++m) {
    const T* arow = A + static_cast<std::size_t>(m) * K;
    T* crow = C + static_cast<std::size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const T* brow = B + static_cast<std::size_t>(n) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

template <typename T>
void check_conv_shapes(const Tensor4T<T>& x, const ConvParamsT<T>& p) {
  if (p.in_channels() != x.c) {
    throw ShapeError("conv: input channels mismatch, x " + x.shape_str() + " vs weights " +
                     p.weights.shape_str());
  }
  if (p.kh() % 2 == 0 || p.kw() % 2 == 0) {
    throw ShapeError("conv: kernel sides must be odd, weights " + p.weights.shape_str());
  }
  if (p.dilation < 1 || p.stride < 1) {
    throw ShapeError("conv: dilation and stride must be >= 1");
  }
  if (static_cast<int>(p.bias.size()) != p.out_channels()) {
    throw ShapeError("conv: bias length " + std::to_string(p.bias.size()) +
                     " vs out channels " + std::to_string(p.out_channels()));
  }
}

// Gather x (one image) into a (in_c*kh*kw, out_h*out_w) column matrix for the
// regular grid. Out-of-bounds reads are zero.
template <typename T>
void im2col(const T* xi, int c, int h, int w, int kh, int kw, int dilation, int stride,
            int out_h, int out_w, T* col) {
  const int pad_y = dilation * (kh - 1) / 2;
  const int pad_x = dilation * (kw - 1) / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::size_t row = 0;
  for (int ic = 0; ic < c; ++ic) {
    const T* xc = xi + ic * plane;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++row) {
        T* dst = col + row * (static_cast<std::size_t>(out_h) * out_w);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad_y + ky * dilation;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < out_w; ++ox) *dst++ = T(0);
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad_x + kx * dilation;
            *dst++ = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter a column-matrix gradient back onto the input image.
template <typename T>
void col2im_acc(const T* col, int c, int h, int w, int kh, int kw, int dilation, int stride,
                int out_h, int out_w, T* gxi) {
  const int pad_y = dilation * (kh - 1) / 2;
  const int pad_x = dilation * (kw - 1) / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::size_t row = 0;
  for (int ic = 0; ic < c; ++ic) {
    T* gc = gxi + ic * plane;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++row) {
        const T* src = col + row * (static_cast<std::size_t>(out_h) * out_w);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad_y + ky * dilation;
          if (iy < 0 || iy >= h) {
            src += out_w;
            continue;
          }
          T* grow = gc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox, ++src) {
            const int ix = ox * stride - pad_x + kx * dilation;
            if (ix >= 0 && ix < w) grow[ix] += *src;
          }
        }
      }
    }
  }
}

// Bilinear corner decomposition of one fractional sample position.
template <typename T>
struct Corners {
  int idx[4];   // flat h*w indices, -1 when outside the map
  T wgt[4];
};

template <typename T>
Corners<T> corners_at(T py, T px, int h, int w) {
  Corners<T> c;
  const T fy = std::floor(py);
  const T fx = std::floor(px);
  const int y0 = static_cast<int>(fy);
  const int x0 = static_cast<int>(fx);
  const T ly = py - fy;
  const T lx = px - fx;
  const T hy = T(1) - ly;
  const T hx = T(1) - lx;
  const int ys[2] = {y0, y0 + 1};
  const int xs[2] = {x0, x0 + 1};
  const T wy[2] = {hy, ly};
  const T wx[2] = {hx, lx};
  int i = 0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b, ++i) {
      const bool in = ys[a] >= 0 && ys[a] < h && xs[b] >= 0 && xs[b] < w;
      c.idx[i] = in ? ys[a] * w + xs[b] : -1;
      c.wgt[i] = wy[a] * wx[b];
    }
  }
  return c;
}

// Precompute corner indices and weights for every (location, tap) of an
// offset field; shared across channels and batch images. The plan is laid
// out over the output grid; positions land on the input map.
template <typename T>
std::vector<Corners<T>> plan_samples(const OffsetFieldT<T>& o, int kh, int kw, int dilation,
                                     int stride, int in_h, int in_w) {
  const int taps = kh * kw;
  std::vector<Corners<T>> plan(static_cast<std::size_t>(o.h) * o.w * taps);
  const int cy = (kh - 1) / 2;
  const int cx = (kw - 1) / 2;
  std::size_t at = 0;
  for (int y = 0; y < o.h; ++y) {
    for (int x = 0; x < o.w; ++x) {
      for (int k = 0; k < taps; ++k, ++at) {
        const int ky = k / kw, kx = k % kw;
        const T ry = T(dilation * (ky - cy));
        const T rx = T(dilation * (kx - cx));
        plan[at] = corners_at<T>(T(y * stride) + ry + o.dy(y, x, k),
                                 T(x * stride) + rx + o.dx(y, x, k), in_h, in_w);
      }
    }
  }
  return plan;
}

// Gather one image into a (in_c*taps, out_pix) column matrix using a plan.
template <typename T>
void sample2col(const T* xi, int c, int in_h, int in_w, int taps, std::size_t out_pix,
                const std::vector<Corners<T>>& plan, T* col) {
  const std::size_t plane = static_cast<std::size_t>(in_h) * in_w;
  for (int ic = 0; ic < c; ++ic) {
    const T* xc = xi + ic * plane;
    for (int k = 0; k < taps; ++k) {
      T* dst = col + (static_cast<std::size_t>(ic) * taps + k) * out_pix;
      for (std::size_t p = 0; p < out_pix; ++p) {
        const Corners<T>& cr = plan[p * taps + k];
        T v = T(0);
        for (int i = 0; i < 4; ++i)
          if (cr.idx[i] >= 0) v += cr.wgt[i] * xc[cr.idx[i]];
        dst[p] = v;
      }
    }
  }
}

template <typename T>
void check_offsets(const Tensor4T<T>& x, const ConvParamsT<T>& p, const OffsetFieldT<T>& o) {
  if (o.taps != p.kh() * p.kw()) {
    throw ShapeError("adaptive_conv: offset taps " + std::to_string(o.taps) +
                     " vs kernel taps " + std::to_string(p.kh() * p.kw()));
  }
  const int oh = (x.h - 1) / p.stride + 1;
  const int ow = (x.w - 1) / p.stride + 1;
  if (o.h != oh || o.w != ow) {
    throw ShapeError("adaptive_conv: offset grid (" + std::to_string(o.h) + "," +
                     std::to_string(o.w) + ") vs output grid (" + std::to_string(oh) + "," +
                     std::to_string(ow) + ")");
  }
}

}  // namespace

template <typename T>
Tensor4T<T> conv2d(const Tensor4T<T>& x, const ConvParamsT<T>& p) {
  check_conv_shapes(x, p);
  const int kh = p.kh(), kw = p.kw(), d = p.dilation, s = p.stride;
  // pad = d*(k-1)/2 keeps "same" spatial extent; stride then ceil-divides it
  const int oh = (x.h - 1) / s + 1;
  const int ow = (x.w - 1) / s + 1;
  const int oc = p.out_channels();
  Tensor4T<T> y(x.n, oc, oh, ow);
  const std::size_t npix = static_cast<std::size_t>(oh) * ow;
  std::vector<T> col(static_cast<std::size_t>(x.c) * kh * kw * npix);
  for (int i = 0; i < x.n; ++i) {
    const T* xi = x.data.data() + static_cast<std::size_t>(i) * x.c * x.h * x.w;
    im2col(xi, x.c, x.h, x.w, kh, kw, d, s, oh, ow, col.data());
    T* yi = y.data.data() + static_cast<std::size_t>(i) * oc * npix;
    for (int j = 0; j < oc; ++j) {
      T* dst = yi + static_cast<std::size_t>(j) * npix;
      for (std::size_t q = 0; q < npix; ++q) dst[q] = p.bias.data[j];
    }
    gemm_acc(oc, x.c * kh * kw, static_cast<int>(npix), p.weights.data.data(), col.data(), yi);
  }
  return y;
}

template <typename T>
ConvGradsT<T> conv2d_backward(const Tensor4T<T>& grad_y, const Tensor4T<T>& x,
                              const ConvParamsT<T>& p) {
  check_conv_shapes(x, p);
  const int kh = p.kh(), kw = p.kw(), d = p.dilation, s = p.stride;
  const int oh = (x.h - 1) / s + 1;
  const int ow = (x.w - 1) / s + 1;
  const int oc = p.out_channels();
  if (grad_y.n != x.n || grad_y.c != oc || grad_y.h != oh || grad_y.w != ow) {
    throw ShapeError("conv2d_backward: grad_y " + grad_y.shape_str() + " vs expected (" +
                     std::to_string(x.n) + "," + std::to_string(oc) + "," + std::to_string(oh) +
                     "," + std::to_string(ow) + ")");
  }
  ConvGradsT<T> g;
  g.grad_x = Tensor4T<T>(x.n, x.c, x.h, x.w);
  g.grad_w = Tensor4T<T>(p.weights.n, p.weights.c, p.weights.h, p.weights.w);
  g.grad_bias = Tensor4T<T>(1, oc, 1, 1);

  const std::size_t npix = static_cast<std::size_t>(oh) * ow;
  const int kdim = x.c * kh * kw;
  std::vector<T> col(static_cast<std::size_t>(kdim) * npix);
  std::vector<T> gcol(static_cast<std::size_t>(kdim) * npix);
  for (int i = 0; i < x.n; ++i) {
    const T* xi = x.data.data() + static_cast<std::size_t>(i) * x.c * x.h * x.w;
    const T* gyi = grad_y.data.data() + static_cast<std::size_t>(i) * oc * npix;
    for (int j = 0; j < oc; ++j) {
      const T* row = gyi + static_cast<std::size_t>(j) * npix;
      T acc = T(0);
      for (std::size_t q = 0; q < npix; ++q) acc += row[q];
      g.grad_bias.data[j] += acc;
    }
    im2col(xi, x.c, x.h, x.w, kh, kw, d, s, oh, ow, col.data());
    gemm_bT_acc(oc, static_cast<int>(npix), kdim, gyi, col.data(), g.grad_w.data.data());
    std::fill(gcol.begin(), gcol.end(), T(0));
    gemm_aT_acc(kdim, oc, static_cast<int>(npix), p.weights.data.data(), gyi, gcol.data());
    col2im_acc(gcol.data(), x.c, x.h, x.w, kh, kw, d, s, oh, ow,
               g.grad_x.data.data() + static_cast<std::size_t>(i) * x.c * x.h * x.w);
  }
  return g;
}

template <typename T>
Tensor4T<T> adaptive_conv(const Tensor4T<T>& x, const ConvParamsT<T>& p,
                          const OffsetFieldT<T>& o) {
  check_conv_shapes(x, p);
  check_offsets(x, p, o);
  const int taps = o.taps;
  const int oc = p.out_channels();
  Tensor4T<T> y(x.n, oc, o.h, o.w);
  const std::size_t in_pix = static_cast<std::size_t>(x.h) * x.w;
  const std::size_t out_pix = static_cast<std::size_t>(o.h) * o.w;
  const auto plan = plan_samples(o, p.kh(), p.kw(), p.dilation, p.stride, x.h, x.w);
  std::vector<T> col(static_cast<std::size_t>(x.c) * taps * out_pix);
  for (int i = 0; i < x.n; ++i) {
    const T* xi = x.data.data() + static_cast<std::size_t>(i) * x.c * in_pix;
    sample2col(xi, x.c, x.h, x.w, taps, out_pix, plan, col.data());
    T* yi = y.data.data() + static_cast<std::size_t>(i) * oc * out_pix;
    for (int j = 0; j < oc; ++j) {
      T* dst = yi + static_cast<std::size_t>(j) * out_pix;
      for (std::size_t q = 0; q < out_pix; ++q) dst[q] = p.bias.data[j];
    }
    gemm_acc(oc, x.c * taps, static_cast<int>(out_pix), p.weights.data.data(), col.data(), yi);
  }
  return y;
}

template <typename T>
ConvGradsT<T> adaptive_conv_backward(const Tensor4T<T>& grad_y, const Tensor4T<T>& x,
                                     const ConvParamsT<T>& p, const OffsetFieldT<T>& o) {
  check_conv_shapes(x, p);
  check_offsets(x, p, o);
  const int oc = p.out_channels();
  if (grad_y.n != x.n || grad_y.c != oc || grad_y.h != o.h || grad_y.w != o.w) {
    throw ShapeError("adaptive_conv_backward: grad_y " + grad_y.shape_str() +
                     " vs expected (" + std::to_string(x.n) + "," + std::to_string(oc) + "," +
                     std::to_string(o.h) + "," + std::to_string(o.w) + ")");
  }
  const int taps = o.taps;
  ConvGradsT<T> g;
  g.grad_x = Tensor4T<T>(x.n, x.c, x.h, x.w);
  g.grad_w = Tensor4T<T>(p.weights.n, p.weights.c, p.weights.h, p.weights.w);
  g.grad_bias = Tensor4T<T>(1, oc, 1, 1);

  const std::size_t in_pix = static_cast<std::size_t>(x.h) * x.w;
  const std::size_t out_pix = static_cast<std::size_t>(o.h) * o.w;
  const int kdim = x.c * taps;
  const auto plan = plan_samples(o, p.kh(), p.kw(), p.dilation, p.stride, x.h, x.w);
  std::vector<T> col(static_cast<std::size_t>(kdim) * out_pix);
  std::vector<T> gcol(static_cast<std::size_t>(kdim) * out_pix);
  for (int i = 0; i < x.n; ++i) {
    const T* xi = x.data.data() + static_cast<std::size_t>(i) * x.c * in_pix;
    const T* gyi = grad_y.data.data() + static_cast<std::size_t>(i) * oc * out_pix;
    for (int j = 0; j < oc; ++j) {
      const T* row = gyi + static_cast<std::size_t>(j) * out_pix;
      T acc = T(0);
      for (std::size_t q = 0; q < out_pix; ++q) acc += row[q];
      g.grad_bias.data[j] += acc;
    }
    sample2col(xi, x.c, x.h, x.w, taps, out_pix, plan, col.data());
    gemm_bT_acc(oc, static_cast<int>(out_pix), kdim, gyi, col.data(), g.grad_w.data.data());
    std::fill(gcol.begin(), gcol.end(), T(0));
    gemm_aT_acc(kdim, oc, static_cast<int>(out_pix), p.weights.data.data(), gyi, gcol.data());
    // scatter sampled-gradient back through the bilinear weights
    T* gxi = g.grad_x.data.data() + static_cast<std::size_t>(i) * x.c * in_pix;
    for (int ic = 0; ic < x.c; ++ic) {
      T* gxc = gxi + static_cast<std::size_t>(ic) * in_pix;
      for (int k = 0; k < taps; ++k) {
        const T* src = gcol.data() + (static_cast<std::size_t>(ic) * taps + k) * out_pix;
        for (std::size_t q = 0; q < out_pix; ++q) {
          const T gv = src[q];
          if (gv == T(0)) continue;
          const Corners<T>& cr = plan[q * taps + k];
          for (int t = 0; t < 4; ++t)
            if (cr.idx[t] >= 0) gxc[cr.idx[t]] += cr.wgt[t] * gv;
        }
      }
    }
  }
  return g;
}

template <typename T>
T bilinear_sample(const Tensor4T<T>& x, int img, int ch, T py, T px) {
  const Corners<T> cr = corners_at(py, px, x.h, x.w);
  const T* plane =
      x.data.data() + (static_cast<std::size_t>(img) * x.c + ch) * x.h * x.w;
  T v = T(0);
  for (int i = 0; i < 4; ++i)
    if (cr.idx[i] >= 0) v += cr.wgt[i] * plane[cr.idx[i]];
  return v;
}

template <typename T>
Tensor4T<T> relu(const Tensor4T<T>& x) {
  Tensor4T<T> y(x.n, x.c, x.h, x.w);
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  return y;
}

template <typename T>
Tensor4T<T> relu_backward(const Tensor4T<T>& grad_y, const Tensor4T<T>& x) {
  if (!grad_y.same_shape(x)) {
    throw ShapeError("relu_backward: grad_y " + grad_y.shape_str() + " vs x " + x.shape_str());
  }
  Tensor4T<T> g(x.n, x.c, x.h, x.w);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    g.data[i] = x.data[i] > T(0) ? grad_y.data[i] : T(0);
  return g;
}

template <typename T>
void sgd_step(const std::vector<Tensor4T<T>*>& params,
              const std::vector<const Tensor4T<T>*>& grads, T lr, T momentum,
              const std::vector<Tensor4T<T>*>& buffers) {
  if (params.size() != grads.size() || params.size() != buffers.size()) {
    throw ShapeError("sgd_step: params/grads/buffers counts differ: " +
                     std::to_string(params.size()) + "/" + std::to_string(grads.size()) + "/" +
                     std::to_string(buffers.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor4T<T>& pt = *params[i];
    const Tensor4T<T>& gt = *grads[i];
    Tensor4T<T>& vt = *buffers[i];
    if (!pt.same_shape(gt) || !pt.same_shape(vt)) {
      throw ShapeError("sgd_step: shape mismatch at tensor " + std::to_string(i) + ": param " +
                       pt.shape_str() + " grad " + gt.shape_str() + " buffer " + vt.shape_str());
    }
    for (std::size_t j = 0; j < pt.data.size(); ++j) {
      vt.data[j] = momentum * vt.data[j] + gt.data[j];
      pt.data[j] -= lr * vt.data[j];
    }
  }
}

template struct Tensor4T<float>;
template struct Tensor4T<double>;

#define CRPN_INSTANTIATE(T)                                                                   \
  template Tensor4T<T> conv2d<T>(const Tensor4T<T>&, const ConvParamsT<T>&);                  \
  template ConvGradsT<T> conv2d_backward<T>(const Tensor4T<T>&, const Tensor4T<T>&,           \
                                            const ConvParamsT<T>&);                           \
  template Tensor4T<T> adaptive_conv<T>(const Tensor4T<T>&, const ConvParamsT<T>&,            \
                                        const OffsetFieldT<T>&);                              \
  template ConvGradsT<T> adaptive_conv_backward<T>(const Tensor4T<T>&, const Tensor4T<T>&,    \
                                                   const ConvParamsT<T>&,                     \
                                                   const OffsetFieldT<T>&);                   \
  template T bilinear_sample<T>(const Tensor4T<T>&, int, int, T, T);                          \
  template Tensor4T<T> relu<T>(const Tensor4T<T>&);                                           \
  template Tensor4T<T> relu_backward<T>(const Tensor4T<T>&, const Tensor4T<T>&);              \
  template void sgd_step<T>(const std::vector<Tensor4T<T>*>&,                                 \
                            const std::vector<const Tensor4T<T>*>&, T, T,                     \
                            const std::vector<Tensor4T<T>*>&);

CRPN_INSTANTIATE(float)
CRPN_INSTANTIATE(double)
#undef CRPN_INSTANTIATE

}  // namespace crpn

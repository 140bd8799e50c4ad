#include "convnova/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace convnova::kernels {

namespace {

// Input row feeding output position `t` through tap `j`, or -1 in the padding.
inline std::ptrdiff_t tap_source(std::size_t t, std::size_t j, std::size_t stride, std::size_t dilation,
                                 std::size_t pad, std::size_t length) {
  const auto src = static_cast<std::ptrdiff_t>(t * stride + j * dilation) - static_cast<std::ptrdiff_t>(pad);
  return (src < 0 || src >= static_cast<std::ptrdiff_t>(length)) ? -1 : src;
}

}  // namespace

template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t dilation,
                         std::size_t stride) {
  const std::size_t length = x.dim(0), c_in = x.dim(1);
  const std::size_t k = w.dim(0), c_out = w.dim(2);
  const std::size_t pad = conv1d_padding(k, dilation);
  const std::size_t out_len = conv1d_out_length(length, k, dilation, stride);

  Tensor<T> out({out_len, c_out});
  const T* bias = b.ptr();
  for (std::size_t t = 0; t < out_len; ++t) {
    T* orow = out.ptr() + t * c_out;
    std::copy(bias, bias + c_out, orow);
    for (std::size_t j = 0; j < k; ++j) {
      const auto src = tap_source(t, j, stride, dilation, pad, length);
      if (src < 0) continue;
      const T* xrow = x.ptr() + static_cast<std::size_t>(src) * c_in;
      const T* wtap = w.ptr() + j * c_in * c_out;
      for (std::size_t i = 0; i < c_in; ++i) {
        const T xv = xrow[i];
        if (xv == T(0)) continue;
        const T* wrow = wtap + i * c_out;
        for (std::size_t o = 0; o < c_out; ++o) orow[o] += xv * wrow[o];
      }
    }
  }
  return out;
}

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, std::size_t dilation,
                     std::size_t stride, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const std::size_t length = x.dim(0), c_in = x.dim(1);
  const std::size_t k = w.dim(0), c_out = w.dim(2);
  const std::size_t pad = conv1d_padding(k, dilation);
  const std::size_t out_len = grad_out.dim(0);

  if (grad_b) {
    T* gb = grad_b->ptr();
    for (std::size_t t = 0; t < out_len; ++t) {
      const T* grow = grad_out.ptr() + t * c_out;
      for (std::size_t o = 0; o < c_out; ++o) gb[o] += grow[o];
    }
  }

  if (grad_w) {
    for (std::size_t t = 0; t < out_len; ++t) {
      const T* grow = grad_out.ptr() + t * c_out;
      for (std::size_t j = 0; j < k; ++j) {
        const auto src = tap_source(t, j, stride, dilation, pad, length);
        if (src < 0) continue;
        const T* xrow = x.ptr() + static_cast<std::size_t>(src) * c_in;
        T* gtap = grad_w->ptr() + j * c_in * c_out;
        for (std::size_t i = 0; i < c_in; ++i) {
          const T xv = xrow[i];
          if (xv == T(0)) continue;
          T* gw = gtap + i * c_out;
          for (std::size_t o = 0; o < c_out; ++o) gw[o] += xv * grow[o];
        }
      }
    }
  }

  if (grad_x) {
    // Transposed taps w_t[j, o, i] keep the inner loop contiguous over inputs.
    std::vector<T> w_t(k * c_out * c_in);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < c_in; ++i)
        for (std::size_t o = 0; o < c_out; ++o)
          w_t[(j * c_out + o) * c_in + i] = w.ptr()[(j * c_in + i) * c_out + o];

    for (std::size_t t = 0; t < out_len; ++t) {
      const T* grow = grad_out.ptr() + t * c_out;
      for (std::size_t j = 0; j < k; ++j) {
        const auto src = tap_source(t, j, stride, dilation, pad, length);
        if (src < 0) continue;
        T* gx = grad_x->ptr() + static_cast<std::size_t>(src) * c_in;
        const T* wtap = w_t.data() + j * c_out * c_in;
        for (std::size_t o = 0; o < c_out; ++o) {
          const T g = grow[o];
          const T* wrow = wtap + o * c_in;
          for (std::size_t i = 0; i < c_in; ++i) gx[i] += g * wrow[i];
        }
      }
    }
  }
}

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                             LayerNormSaved<T>* saved) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor<T> out({rows, d});
  Tensor<T> normalized({rows, d});
  std::vector<T> inv_std(rows);
  for (std::size_t t = 0; t < rows; ++t) {
    auto xr = x.row(t);
    T mean = 0;
    for (T v : xr) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    inv_std[t] = rstd;
    auto nr = normalized.row(t);
    auto orow = out.row(t);
    for (std::size_t c = 0; c < d; ++c) {
      nr[c] = (xr[c] - mean) * rstd;
      orow[c] = nr[c] * gamma[c] + beta[c];
    }
  }
  if (saved) {
    saved->normalized = std::move(normalized);
    saved->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
void layer_norm_backward(const LayerNormSaved<T>& saved, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                         Tensor<T>* grad_x, Tensor<T>* grad_gamma, Tensor<T>* grad_beta) {
  const std::size_t rows = grad_out.dim(0), d = grad_out.dim(1);
  std::vector<T> dxhat(d);
  for (std::size_t t = 0; t < rows; ++t) {
    auto g = grad_out.row(t);
    auto xhat = saved.normalized.row(t);
    if (grad_gamma)
      for (std::size_t c = 0; c < d; ++c) (*grad_gamma)[c] += g[c] * xhat[c];
    if (grad_beta)
      for (std::size_t c = 0; c < d; ++c) (*grad_beta)[c] += g[c];
    if (!grad_x) continue;
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t c = 0; c < d; ++c) {
      dxhat[c] = g[c] * gamma[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xhat[c];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    auto gx = grad_x->row(t);
    const T rstd = saved.inv_std[t];
    for (std::size_t c = 0; c < d; ++c) gx[c] += rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * (std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> affine_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const bool vec = x.rank() == 1;
  const std::size_t rows = vec ? 1 : x.dim(0);
  const std::size_t d_in = w.dim(0), d_out = w.dim(1);
  Tensor<T> out(vec ? Shape{d_out} : Shape{rows, d_out});
  for (std::size_t t = 0; t < rows; ++t) {
    T* orow = out.ptr() + t * d_out;
    const T* xrow = x.ptr() + t * d_in;
    std::copy(b.ptr(), b.ptr() + d_out, orow);
    for (std::size_t i = 0; i < d_in; ++i) {
      const T xv = xrow[i];
      const T* wrow = w.ptr() + i * d_out;
      for (std::size_t o = 0; o < d_out; ++o) orow[o] += xv * wrow[o];
    }
  }
  return out;
}

template <typename T>
void affine_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t d_in = w.dim(0), d_out = w.dim(1);
  for (std::size_t t = 0; t < rows; ++t) {
    const T* grow = grad_out.ptr() + t * d_out;
    const T* xrow = x.ptr() + t * d_in;
    if (grad_b)
      for (std::size_t o = 0; o < d_out; ++o) (*grad_b)[o] += grow[o];
    for (std::size_t i = 0; i < d_in; ++i) {
      const T* wrow = w.ptr() + i * d_out;
      if (grad_w) {
        T* gw = grad_w->ptr() + i * d_out;
        for (std::size_t o = 0; o < d_out; ++o) gw[o] += xrow[i] * grow[o];
      }
      if (grad_x) {
        T acc = 0;
        for (std::size_t o = 0; o < d_out; ++o) acc += wrow[o] * grow[o];
        grad_x->ptr()[t * d_in + i] += acc;
      }
    }
  }
}

template <typename T>
Tensor<T> mean_pool_forward(const Tensor<T>& x) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor<T> out({d});
  for (std::size_t t = 0; t < rows; ++t) {
    auto r = x.row(t);
    for (std::size_t c = 0; c < d; ++c) out[c] += r[c];
  }
  for (std::size_t c = 0; c < d; ++c) out[c] /= static_cast<T>(rows);
  return out;
}

template <typename T>
void mean_pool_backward(const Tensor<T>& grad_out, Tensor<T>* grad_x) {
  const std::size_t rows = grad_x->dim(0), d = grad_x->dim(1);
  const T scale = T(1) / static_cast<T>(rows);
  for (std::size_t t = 0; t < rows; ++t) {
    auto gr = grad_x->row(t);
    for (std::size_t c = 0; c < d; ++c) gr[c] += grad_out[c] * scale;
  }
}

template <typename T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& x, std::size_t factor) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor<T> out({rows * factor, d});
  for (std::size_t t = 0; t < rows * factor; ++t) {
    auto src = x.row(t / factor);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

template <typename T>
void upsample_nearest_backward(const Tensor<T>& grad_out, std::size_t factor, Tensor<T>* grad_x) {
  const std::size_t d = grad_out.dim(1);
  for (std::size_t t = 0; t < grad_out.dim(0); ++t) {
    auto g = grad_out.row(t);
    auto gx = grad_x->row(t / factor);
    for (std::size_t c = 0; c < d; ++c) gx[c] += g[c];
  }
}

template <typename T>
T masked_cross_entropy_forward(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                               std::span<const std::uint8_t> mask, Tensor<T>* probs) {
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.size() / classes;
  T total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const T* z = logits.ptr() + t * classes;
    const T m = *std::max_element(z, z + classes);
    T denom = 0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - m);
    const T lse = m + std::log(denom);
    total += lse - z[targets[t]];
    ++count;
    if (probs) {
      T* p = probs->ptr() + t * classes;
      for (std::size_t c = 0; c < classes; ++c) p[c] = std::exp(z[c] - lse);
    }
  }
  return total / static_cast<T>(count);
}

template <typename T>
void masked_cross_entropy_backward(const Tensor<T>& probs, std::span<const std::int32_t> targets,
                                   std::span<const std::uint8_t> mask, T grad_out, Tensor<T>* grad_logits) {
  const std::size_t classes = probs.shape().back();
  const std::size_t rows = probs.size() / classes;
  const auto count = static_cast<T>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  const T scale = grad_out / count;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const T* p = probs.ptr() + t * classes;
    T* g = grad_logits->ptr() + t * classes;
    for (std::size_t c = 0; c < classes; ++c) g[c] += scale * p[c];
    g[targets[t]] -= scale;
  }
}

#define CONVNOVA_INSTANTIATE(T)                                                                              \
  template Tensor<T> conv1d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                    std::size_t);                                                           \
  template void conv1d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                std::size_t, Tensor<T>*, Tensor<T>*, Tensor<T>*);                           \
  template Tensor<T> layer_norm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,            \
                                        LayerNormSaved<T>*);                                                \
  template void layer_norm_backward(const LayerNormSaved<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                    Tensor<T>*, Tensor<T>*, Tensor<T>*);                                    \
  template T gelu(T);                                                                                        \
  template T gelu_derivative(T);                                                                             \
  template T sigmoid(T);                                                                                     \
  template Tensor<T> affine_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template void affine_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,          \
                                Tensor<T>*, Tensor<T>*);                                                    \
  template Tensor<T> mean_pool_forward(const Tensor<T>&);                                                   \
  template void mean_pool_backward(const Tensor<T>&, Tensor<T>*);                                           \
  template Tensor<T> upsample_nearest_forward(const Tensor<T>&, std::size_t);                               \
  template void upsample_nearest_backward(const Tensor<T>&, std::size_t, Tensor<T>*);                       \
  template T masked_cross_entropy_forward(const Tensor<T>&, std::span<const std::int32_t>,                  \
                                          std::span<const std::uint8_t>, Tensor<T>*);                       \
  template void masked_cross_entropy_backward(const Tensor<T>&, std::span<const std::int32_t>,             \
                                              std::span<const std::uint8_t>, T, Tensor<T>*);

CONVNOVA_INSTANTIATE(float)
CONVNOVA_INSTANTIATE(double)

#undef CONVNOVA_INSTANTIATE

}  // namespace convnova::kernels

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "convnova/tensor.hpp"

// Raw forward/backward math shared by the eager and taped operation layers.
// Shapes are validated by the callers in ops.hpp. Backward kernels accumulate
// into their (nullable) gradient outputs.
namespace convnova::kernels {

/// Zero padding of `dilation * (kernel - 1) / 2` on both sides.
inline std::size_t conv1d_padding(std::size_t kernel, std::size_t dilation) {
  return dilation * (kernel - 1) / 2;
}

inline std::size_t conv1d_out_length(std::size_t length, std::size_t kernel, std::size_t dilation,
                                     std::size_t stride) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  return (length + 2 * conv1d_padding(kernel, dilation) - span) / stride + 1;
}

template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t dilation,
                         std::size_t stride);

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, std::size_t dilation,
                     std::size_t stride, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
struct LayerNormSaved {
  Tensor<T> normalized;     // (x - mean) * rstd, shape [l, d]
  std::vector<T> inv_std;  // one per row
};

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                             LayerNormSaved<T>* saved);

template <typename T>
void layer_norm_backward(const LayerNormSaved<T>& saved, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                         Tensor<T>* grad_x, Tensor<T>* grad_gamma, Tensor<T>* grad_beta);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_derivative(T x);
template <typename T>
T sigmoid(T x);

/// x[l, d_in] * w[d_in, d_out] + b. A rank-1 x is treated as a single row.
template <typename T>
Tensor<T> affine_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
void affine_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
Tensor<T> mean_pool_forward(const Tensor<T>& x);

template <typename T>
void mean_pool_backward(const Tensor<T>& grad_out, Tensor<T>* grad_x);

template <typename T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& x, std::size_t factor);

template <typename T>
void upsample_nearest_backward(const Tensor<T>& grad_out, std::size_t factor, Tensor<T>* grad_x);

/// Mean over masked rows of -log softmax(logits[t])[targets[t]].
/// `probs` receives the row softmax of masked rows for the backward pass.
template <typename T>
T masked_cross_entropy_forward(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                               std::span<const std::uint8_t> mask, Tensor<T>* probs);

template <typename T>
void masked_cross_entropy_backward(const Tensor<T>& probs, std::span<const std::int32_t> targets,
                                   std::span<const std::uint8_t> mask, T grad_out, Tensor<T>* grad_logits);

}  // namespace convnova::kernels

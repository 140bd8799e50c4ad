#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "convnova/kernels.hpp"
#include "convnova/tape.hpp"
#include "convnova/tensor.hpp"

// Differentiable operations. Every op has an eager overload on Tensor<T> and a
// recording overload on Var<T>, so model code written against either runs
// unchanged as plain inference or as a taped training step.
namespace convnova {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
const Tensor<T>& value_of(const Tensor<T>& t) {
  return t;
}
template <typename T>
const Tensor<T>& value_of(const Var<T>& v) {
  return v.value();
}

namespace detail {

template <typename T>
Tensor<T> finite(Tensor<T> t, const char* op) {
  require(t.all_finite(), "non_finite", std::string(op) + ": produced a non-finite value");
  return t;
}

template <typename T>
void check_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t dilation,
                std::size_t stride) {
  require(x.rank() == 2, "shape_mismatch", "conv1d: input must be [length, channels], got " + shape_str(x.shape()));
  require(w.rank() == 3, "shape_mismatch", "conv1d: weight must be [k, c_in, c_out], got " + shape_str(w.shape()));
  require(w.dim(0) % 2 == 1, "even_kernel", "conv1d: kernel size must be odd, got " + std::to_string(w.dim(0)));
  require(w.dim(1) == x.dim(1), "shape_mismatch",
          "conv1d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " +
              std::to_string(x.dim(1)));
  require(b.shape() == Shape{w.dim(2)}, "shape_mismatch", "conv1d: bias must be [c_out]");
  require(dilation >= 1 && stride >= 1, "bad_argument", "conv1d: dilation and stride must be >= 1");
}

template <typename T>
void check_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  require(x.rank() == 2, "shape_mismatch", "layer_norm: input must be [length, d]");
  require(gamma.shape() == Shape{x.dim(1)} && beta.shape() == Shape{x.dim(1)}, "shape_mismatch",
          "layer_norm: gamma/beta must be [d]");
}

template <typename T>
void check_affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.rank() == 1 || x.rank() == 2, "shape_mismatch", "affine: input must be rank 1 or 2");
  require(w.rank() == 2 && w.dim(0) == x.shape().back(), "shape_mismatch",
          "affine: weight " + shape_str(w.shape()) + " does not conform to input " + shape_str(x.shape()));
  require(b.shape() == Shape{w.dim(1)}, "shape_mismatch", "affine: bias must be [d_out]");
}

template <typename T>
void check_cross_entropy(const Tensor<T>& logits, const std::vector<std::int32_t>& targets,
                         const std::vector<std::uint8_t>& mask) {
  require(logits.rank() <= 2, "shape_mismatch", "cross_entropy: logits must be [C] or [l, C]");
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.size() / classes;
  require(targets.size() == rows && mask.size() == rows, "shape_mismatch",
          "cross_entropy: targets/mask length must equal number of logit rows");
  bool any = false;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    any = true;
    require(targets[t] >= 0 && static_cast<std::size_t>(targets[t]) < classes, "bad_target",
            "cross_entropy: target " + std::to_string(targets[t]) + " out of range");
  }
  require(any, "empty_mask", "cross_entropy: mask selects no positions");
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace detail

// ---- eager ----------------------------------------------------------------

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t dilation = 1,
                 std::size_t stride = 1) {
  detail::check_conv(x, w, b, dilation, stride);
  return detail::finite(kernels::conv1d_forward(x, w, b, dilation, stride), "conv1d");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(kLayerNormEps)) {
  detail::check_layer_norm(x, gamma, beta);
  return detail::finite(kernels::layer_norm_forward<T>(x, gamma, beta, eps, nullptr), "layer_norm");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::map(x, kernels::gelu<T>);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::map(x, kernels::sigmoid<T>);
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "add");
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return detail::finite(std::move(out), "add");
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "hadamard");
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return detail::finite(std::move(out), "hadamard");
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::check_affine(x, w, b);
  return detail::finite(kernels::affine_forward(x, w, b), "affine");
}

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x) {
  require(x.rank() == 2, "shape_mismatch", "mean_pool: input must be [length, d]");
  return kernels::mean_pool_forward(x);
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  require(x.rank() == 2 && factor >= 1, "shape_mismatch", "upsample_nearest: input must be [length, d]");
  return kernels::upsample_nearest_forward(x, factor);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return Tensor<T>::scalar(acc);
}

/// Mean over masked rows of the negative log-likelihood. Rank-1 logits are a
/// single row.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const std::vector<std::int32_t>& targets,
                               const std::vector<std::uint8_t>& mask) {
  detail::check_cross_entropy(logits, targets, mask);
  return Tensor<T>::scalar(kernels::masked_cross_entropy_forward<T>(logits, targets, mask, nullptr));
}

// ---- taped ----------------------------------------------------------------

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t dilation = 1,
              std::size_t stride = 1) {
  detail::check_conv(x.value(), w.value(), b.value(), dilation, stride);
  const Tensor<T>* xv = &x.value();
  const Tensor<T>* wv = &w.value();
  return x.tape().record(
      OpKind::conv1d, kernels::conv1d_forward(*xv, *wv, b.value(), dilation, stride), {x.id(), w.id(), b.id()},
      [xv, wv, dilation, stride](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
        kernels::conv1d_backward(*xv, *wv, g, dilation, stride, in[0], in[1], in[2]);
      });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = static_cast<T>(kLayerNormEps)) {
  detail::check_layer_norm(x.value(), gamma.value(), beta.value());
  auto saved = std::make_shared<kernels::LayerNormSaved<T>>();
  auto out = kernels::layer_norm_forward(x.value(), gamma.value(), beta.value(), eps, saved.get());
  const Tensor<T>* gv = &gamma.value();
  return x.tape().record(OpKind::layer_norm, std::move(out), {x.id(), gamma.id(), beta.id()},
                         [saved, gv](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           kernels::layer_norm_backward(*saved, *gv, g, in[0], in[1], in[2]);
                         });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const Tensor<T>* xv = &x.value();
  return x.tape().record(OpKind::gelu, gelu(*xv), {x.id()},
                         [xv](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             (*in[0])[i] += g[i] * kernels::gelu_derivative((*xv)[i]);
                         });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  // Backward reads the node's own stored output: s' = s (1 - s).
  Tape<T>* tape = &x.tape();
  const NodeId self = tape->size();
  return tape->record(OpKind::sigmoid, sigmoid(x.value()), {x.id()},
                      [tape, self](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                        const Tensor<T>& s = tape->value(self);
                        for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * s[i] * (T(1) - s[i]);
                      });
}

template <typename T>
Var<T> add(const Var<T>& x, const Var<T>& y) {
  return x.tape().record(OpKind::add, add(x.value(), y.value()), {x.id(), y.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           for (auto* slot : in)
                             if (slot)
                               for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
                         });
}

template <typename T>
Var<T> hadamard(const Var<T>& x, const Var<T>& y) {
  const Tensor<T>* xv = &x.value();
  const Tensor<T>* yv = &y.value();
  return x.tape().record(OpKind::hadamard, hadamard(*xv, *yv), {x.id(), y.id()},
                         [xv, yv](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           if (in[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * (*yv)[i];
                           if (in[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * (*xv)[i];
                         });
}

template <typename T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Tensor<T>* xv = &x.value();
  const Tensor<T>* wv = &w.value();
  return x.tape().record(OpKind::affine, affine(*xv, *wv, b.value()), {x.id(), w.id(), b.id()},
                         [xv, wv](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           kernels::affine_backward(*xv, *wv, g, in[0], in[1], in[2]);
                         });
}

template <typename T>
Var<T> mean_pool(const Var<T>& x) {
  return x.tape().record(OpKind::mean_pool, mean_pool(x.value()), {x.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           kernels::mean_pool_backward(g, in[0]);
                         });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t factor) {
  return x.tape().record(OpKind::upsample, upsample_nearest(x.value(), factor), {x.id()},
                         [factor](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           kernels::upsample_nearest_backward(g, factor, in[0]);
                         });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return x.tape().record(OpKind::sum, sum(x.value()), {x.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> in) {
                           for (std::size_t i = 0; i < in[0]->size(); ++i) (*in[0])[i] += g[0];
                         });
}

template <typename T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::vector<std::int32_t> targets, std::vector<std::uint8_t> mask) {
  detail::check_cross_entropy(logits.value(), targets, mask);
  auto probs = std::make_shared<Tensor<T>>(Tensor<T>::zeros_like(logits.value()));
  const T loss = kernels::masked_cross_entropy_forward<T>(logits.value(), targets, mask, probs.get());
  return logits.tape().record(
      OpKind::cross_entropy, Tensor<T>::scalar(loss), {logits.id()},
      [probs, targets = std::move(targets), mask = std::move(mask)](const Tensor<T>& g,
                                                                     std::span<Tensor<T>* const> in) {
        kernels::masked_cross_entropy_backward<T>(*probs, targets, mask, g[0], in[0]);
      });
}

}  // namespace convnova

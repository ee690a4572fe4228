#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "equivar/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the autodiff
// graph when one of its inputs requires gradients.
namespace equivar {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& x) { return scale(x, T(-1)); }

template <typename T> Tensor<T> exp(const Tensor<T>& x);
/// Natural log; non-positive inputs raise NumericError.
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);
/// x / max(||x||, eps) along `axis`.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = T(1e-12));

/// [M,K] x [K,N] -> [M,N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// out[..., i, ...] = x[..., perm[i], ...] along `axis`. `perm` must be a bijection.
template <typename T> Tensor<T> index_permute(const Tensor<T>& x, std::size_t axis, std::span<const std::size_t> perm);
/// out.flat[i] = x.flat[index[i]]; the backward pass scatter-adds.
template <typename T> Tensor<T> gather(const Tensor<T>& x, std::span<const std::uint32_t> index, Shape shape);
/// Value-identical tensor with no path back to `x`.
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);
/// Adds `bias` (extent = x.shape[axis]) broadcast over every other axis.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias, std::size_t axis);

/// Cross-correlation with zero padding. input [B,C,H,W], weight [O,C,k,k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride = 1, std::size_t pad = 0);
/// Non-overlapping k x k mean pooling over the two trailing axes.
template <typename T> Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
/// For x of shape [B,G,C,H,W]: per (b, c) zero-mean unit-variance over (G,H,W).
template <typename T> Tensor<T> channel_normalize(const Tensor<T>& x, T eps = T(1e-5));

}  // namespace equivar

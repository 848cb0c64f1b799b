#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mqe_align/diff/tensor.hpp"

// Differentiable primitives. Matrices are row-major rank-2 tensors; a rank-1
// tensor of length n is accepted wherever a 1×n row is expected.
namespace mqe::ops {

enum class Activation { gelu, identity };

/// a[m,k] · b[k,n]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

/// x[m,k] · w[k,n] + bias[n]; bias may be undefined.
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias);

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

/// x[m,n] + row[n] broadcast over rows.
template <typename Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& row);

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor);

/// x · s where s is a one-element tensor (gradient flows into s).
template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& x, const Tensor<Real>& s);

/// One element of a vector as a one-element tensor.
template <typename Real>
Tensor<Real> select(const Tensor<Real>& v, std::size_t index);

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> activate(const Tensor<Real>& x, Activation act);

/// Row-wise softmax over the last axis. With `order_invariant` the
/// normaliser is summed in ascending value order so that permuting the
/// inputs permutes the outputs bit-exactly.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, bool order_invariant = false);

inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        double eps = kLayerNormEps);

/// Rows of `table` gathered by id.
template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids);

/// Vertical concatenation of matrices with equal column count.
template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts);

/// Contiguous row range [begin, end).
template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, std::size_t begin, std::size_t end);

/// Column mean, shape [1, n].
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x);

/// Column-wise max over consecutive blocks of `group` rows: [m·group, n] -> [m, n].
template <typename Real>
Tensor<Real> max_pool_rows(const Tensor<Real>& x, std::size_t group);

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x);

/// Multi-head scaled dot-product attention on already-projected inputs.
/// q[tq, d], k[tk, d], v[tk, d]; heads split the d columns evenly. With
/// `causal`, query i attends to keys j <= i + (tk - tq).
template <typename Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       std::size_t heads, bool causal);

/// Attention probabilities of the op above, [heads·tq, tk]; not differentiable.
template <typename Real>
Tensor<Real> attention_weights(const Tensor<Real>& q, const Tensor<Real>& k, std::size_t heads,
                               bool causal);

/// Mean negative log-likelihood of `targets` over rows where `mask` is set.
/// Rows with mask 0 contribute neither value nor gradient.
template <typename Real>
Tensor<Real> cross_entropy_masked(const Tensor<Real>& logits, std::span<const int> targets,
                                  std::span<const std::uint8_t> mask);

/// Threads used by the large-matmul kernel (rows are partitioned, so results
/// do not depend on the count). Read from MQE_ALIGN_THREADS, default 1.
std::size_t kernel_threads();
void set_kernel_threads(std::size_t n);

}  // namespace mqe::ops

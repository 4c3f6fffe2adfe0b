#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ssmcyto/tensor.hpp"

namespace ssmcyto {

// Elementwise arithmetic with numpy-style broadcasting (shapes aligned from
// the right; size-1 dimensions stretch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);

// Full reductions to a [1] tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [B, L, C] -> [B, C], averaging over the middle axis.
Tensor mean_tokens(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// a[..., k] · b[k, n] -> [..., n]. Leading dims of `a` are flattened into rows.
Tensor matmul(const Tensor& a, const Tensor& b);
// x·W (+ bias), bias broadcast over rows; `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Last-axis concatenation / slicing.
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
// out[..., j] = x[..., perm[j]]
Tensor permute_last(const Tensor& x, std::span<const std::size_t> perm);
// x: [B, L, C]; out[b, i, :] = x[b, index[i], :]. `index` may repeat or omit rows.
Tensor gather_tokens(const Tensor& x, std::span<const std::size_t> index);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// Weighted mean cross-entropy: sum_b w[y_b] * -log softmax(logits_b)[y_b] / sum_b w[y_b].
// Empty `class_weights` means w ≡ 1.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> class_weights = {});

enum class ConvMode { causal1d, standard1d, depthwise1d, standard2d, grouped2d };

struct ConvOptions {
  ConvMode mode = ConvMode::standard1d;
  std::size_t groups = 1;
  std::size_t height = 1;  // grid height for 2D modes
  std::size_t width = 1;   // grid width for 2D modes
};

// x: [B, L, C_in] channels-last (L = H·W for 2D modes).
// weight: [C_out, C_in/groups, K] (1D) or [C_out, C_in/groups, K, K] (2D).
// causal1d pads K-1 on the left; the other modes pad symmetrically and need odd K.
// depthwise1d forces groups = C_in.
Tensor convolve(const Tensor& x, const Tensor& weight, const ConvOptions& options);

enum class ScanImpl { sequential, parallel };

// Fused selective scan (see kernels::ScanGeometry for layouts).
// x, delta: [B, L, D]; A: [D, N]; B, C: [B, L, N]; skip: [D].
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                      const Tensor& skip, ScanImpl impl = ScanImpl::parallel);

}  // namespace ssmcyto

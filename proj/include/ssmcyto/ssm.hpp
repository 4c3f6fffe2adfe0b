#pragma once

// Selective state-space (S6) layer: input-dependent step sizes and
// projections, zero-order-hold decay with the simplified Euler input term,
// and two interchangeable scan evaluations.

#include <string>

#include "ssmcyto/ops.hpp"
#include "ssmcyto/params.hpp"

namespace ssmcyto {

// Per-sequence continuous parameters.
struct SSMParams {
  Tensor A;       // [D, N], strictly negative
  Tensor delta;   // [L, D], strictly positive
  Tensor B;       // [L, N]
  Tensor C;       // [L, N]
  Tensor D_skip;  // [D]
};

struct DiscreteSSM {
  Tensor A_bar;  // [L, D, N] = exp(delta * A)
  Tensor B_bar;  // [L, D, N] = delta * B
};

struct ScanResult {
  Tensor y;        // [L, D]
  Tensor h_final;  // [D, N]
};

DiscreteSSM discretize(const SSMParams& params);

// h_t = A_bar[t] ⊙ h_{t-1} + B_bar[t] · x_t,  y_t = Σ_n C[t,n] h_t[:,n] + D ⊙ x_t.
// `h0` may be undefined (zero initial state).
ScanResult scan_sequential(const DiscreteSSM& disc, const Tensor& x, const Tensor& C, const Tensor& D_skip,
                           const Tensor& h0 = {});
// Same contract through an inclusive Blelloch prefix scan of (A_bar, B_bar·x) pairs.
ScanResult scan_parallel(const DiscreteSSM& disc, const Tensor& x, const Tensor& C, const Tensor& D_skip,
                         const Tensor& h0 = {});

// Trainable S6 layer over [B, L, D] sequences.
struct S6Layer {
  Tensor W_delta;  // [D, D]
  Tensor b_delta;  // [D]
  Tensor W_B;      // [D, N]
  Tensor W_C;      // [D, N]
  Tensor A_log;    // [D, N]
  Tensor D_skip;   // [D]

  // delta = softplus(x·W_delta + b_delta), B = x·W_B, C = x·W_C, A = -exp(A_log).
  Tensor forward(const Tensor& x, ScanImpl impl = ScanImpl::parallel) const;
};

// A_log[d, n] = ln(n + 1); b_delta chosen so softplus(b_delta) is log-uniform in [1e-3, 1e-1].
S6Layer make_s6(ParamStore& store, const std::string& name, std::size_t d_inner, std::size_t n_state, Rng& rng);

double inverse_softplus(double y);

}  // namespace ssmcyto

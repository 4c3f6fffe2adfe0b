#pragma once

// Raw compute kernels. Every kernel exists twice: a plain serial reference and
// an OpenMP version. The OpenMP versions only split over independent outputs
// and keep each output's accumulation order identical to the serial loop, so
// results are bitwise independent of the thread count.

#include <cstddef>
#include <span>

namespace ssmcyto::kernels {

// C[m,n] (+)= op(A) * op(B), op(A) is m×k, op(B) is k×n. Row-major storage;
// with trans_a the buffer A holds k×m, with trans_b the buffer B holds n×k.
struct GemmArgs {
  bool trans_a = false;
  bool trans_b = false;
  std::size_t m = 0, n = 0, k = 0;
  bool accumulate = false;
};

// Channels-last grouped convolution over a (height × width) grid. 1D modes use
// height == 1 and kernel_h == 1. Output has the input's spatial size.
struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t height = 1, width = 1;
  std::size_t in_channels = 1, out_channels = 1;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t pad_top = 0, pad_left = 0;
  std::size_t groups = 1;
};

// Batched selective scan with discretization fused in:
//   a[t,d,n] = exp(delta[t,d] * A[d,n]),  u[t,d,n] = delta[t,d] * B[t,n] * x[t,d]
//   h_t = a_t * h_{t-1} + u_t,  y[t,d] = sum_n C[t,n] h_t[d,n] + skip[d] x[t,d]
// Layouts: x, delta, y: [batch, len, dim]; B, C: [batch, len, state];
// A: [dim, state]; skip: [dim]; h0 (optional): [batch, dim, state];
// states (optional output for backward): [batch, dim, state, len].
struct ScanGeometry {
  std::size_t batch = 1, len = 1, dim = 1, state = 1;
};

struct ScanInputs {
  std::span<const double> x, delta, A, B, C, skip, h0;
};

struct ScanGrads {
  std::span<double> x, delta, A, B, C, skip;
};

// In-place inclusive scan of one lane of (decay, input) pairs under
// (a1,b1)∘(a2,b2) = (a2*a1, a2*b1 + b2). Afterwards decay[t] is the running
// product and input[t] is the state reached from a zero initial state.
void scan_lane_sequential(std::span<double> decay, std::span<double> input);
// Same contract via a Blelloch up-sweep / down-sweep over a fixed tree.
void scan_lane_blelloch(std::span<double> decay, std::span<double> input);

namespace serial {

void gemm(const GemmArgs& args, std::span<const double> a, std::span<const double> b, std::span<double> c);
void conv_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                  std::span<double> y);
void conv_backward_input(const ConvGeometry& g, std::span<const double> dy, std::span<const double> w,
                         std::span<double> dx);
void conv_backward_weight(const ConvGeometry& g, std::span<const double> dy, std::span<const double> x,
                          std::span<double> dw);
void selective_scan(const ScanGeometry& g, const ScanInputs& in, std::span<double> y,
                    std::span<double> states, std::span<double> h_final);

}  // namespace serial

namespace parallel {

void gemm(const GemmArgs& args, std::span<const double> a, std::span<const double> b, std::span<double> c);
void conv_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                  std::span<double> y);
void conv_backward_input(const ConvGeometry& g, std::span<const double> dy, std::span<const double> w,
                         std::span<double> dx);
void conv_backward_weight(const ConvGeometry& g, std::span<const double> dy, std::span<const double> x,
                          std::span<double> dw);
void selective_scan(const ScanGeometry& g, const ScanInputs& in, std::span<double> y,
                    std::span<double> states, std::span<double> h_final);

}  // namespace parallel

// Reverse-mode rule for selective_scan given the saved states. Gradients are
// accumulated (+=) into any non-empty span of `grads`.
void selective_scan_backward(const ScanGeometry& g, const ScanInputs& in, std::span<const double> states,
                             std::span<const double> dy, const ScanGrads& grads);

// Worker threads used by the parallel kernels. The CLI caps this with SSMCYTO_THREADS.
int thread_count();
void set_thread_count(int n);

}  // namespace ssmcyto::kernels

#include "ssmcyto/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ssmcyto::kernels {

namespace {

// Row block [row_begin, row_end) of C = A·B with both operands untransposed.
void gemm_nn_rows(std::size_t row_begin, std::size_t row_end, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = row_begin; i < row_end; ++i) std::fill(c + i * n, c + (i + 1) * n, 0.0);
  }
  // Four rows share each pass over a row of b. Every c[i][j] still sums over p
  // in increasing order, so the blocking does not change results.
  std::size_t i = row_begin;
  for (; i + 4 <= row_end; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < row_end; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// Materializes untransposed operands so both kernels share one inner loop.
struct GemmOperands {
  std::vector<double> a_buf, b_buf;
  const double* a = nullptr;
  const double* b = nullptr;
};

GemmOperands prepare(const GemmArgs& args, std::span<const double> a, std::span<const double> b) {
  GemmOperands ops;
  if (args.trans_a) {
    ops.a_buf = transposed(a.data(), args.k, args.m);
    ops.a = ops.a_buf.data();
  } else {
    ops.a = a.data();
  }
  if (args.trans_b) {
    ops.b_buf = transposed(b.data(), args.n, args.k);
    ops.b = ops.b_buf.data();
  } else {
    ops.b = b.data();
  }
  return ops;
}

inline std::size_t x_index(const ConvGeometry& g, std::size_t b, std::size_t h, std::size_t w) {
  return ((b * g.height + h) * g.width + w) * g.in_channels;
}

inline std::size_t y_index(const ConvGeometry& g, std::size_t b, std::size_t h, std::size_t w) {
  return ((b * g.height + h) * g.width + w) * g.out_channels;
}

inline std::size_t w_index(const ConvGeometry& g, std::size_t co, std::size_t ci, std::size_t kh, std::size_t kw) {
  const std::size_t cin_g = g.in_channels / g.groups;
  return ((co * cin_g + ci) * g.kernel_h + kh) * g.kernel_w + kw;
}

// Output row (b, oh) of the convolution.
void conv_forward_row(const ConvGeometry& g, std::size_t b, std::size_t oh, const double* x, const double* w,
                      double* y) {
  const std::size_t cin_g = g.in_channels / g.groups;
  const std::size_t cout_g = g.out_channels / g.groups;
  for (std::size_t ow = 0; ow < g.width; ++ow) {
    double* yp = y + y_index(g, b, oh, ow);
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const std::size_t grp = co / cout_g;
      double acc = 0.0;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - static_cast<std::ptrdiff_t>(g.pad_top);
        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kw) - static_cast<std::ptrdiff_t>(g.pad_left);
          if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
          const double* xp = x + x_index(g, b, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) + grp * cin_g;
          for (std::size_t ci = 0; ci < cin_g; ++ci) acc += xp[ci] * w[w_index(g, co, ci, kh, kw)];
        }
      }
      yp[co] = acc;
    }
  }
}

void conv_backward_input_row(const ConvGeometry& g, std::size_t b, std::size_t ih, const double* dy,
                             const double* w, double* dx) {
  const std::size_t cin_g = g.in_channels / g.groups;
  const std::size_t cout_g = g.out_channels / g.groups;
  for (std::size_t iw = 0; iw < g.width; ++iw) {
    double* dxp = dx + x_index(g, b, ih, iw);
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      const std::size_t grp = ci / cin_g;
      const std::size_t ci_local = ci - grp * cin_g;
      double acc = 0.0;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih + g.pad_top) - static_cast<std::ptrdiff_t>(kh);
        if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(g.height)) continue;
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(iw + g.pad_left) - static_cast<std::ptrdiff_t>(kw);
          if (ow < 0 || ow >= static_cast<std::ptrdiff_t>(g.width)) continue;
          const double* dyp = dy + y_index(g, b, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow));
          for (std::size_t co = grp * cout_g; co < (grp + 1) * cout_g; ++co)
            acc += dyp[co] * w[w_index(g, co, ci_local, kh, kw)];
        }
      }
      dxp[ci] += acc;
    }
  }
}

void conv_backward_weight_channel(const ConvGeometry& g, std::size_t co, const double* dy, const double* x,
                                  double* dw) {
  const std::size_t cin_g = g.in_channels / g.groups;
  const std::size_t cout_g = g.out_channels / g.groups;
  const std::size_t grp = co / cout_g;
  for (std::size_t ci = 0; ci < cin_g; ++ci) {
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        double acc = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b) {
          for (std::size_t oh = 0; oh < g.height; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - static_cast<std::ptrdiff_t>(g.pad_top);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ow = 0; ow < g.width; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kw) - static_cast<std::ptrdiff_t>(g.pad_left);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
              acc += dy[y_index(g, b, oh, ow) + co] *
                     x[x_index(g, b, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) + grp * cin_g + ci];
            }
          }
        }
        dw[w_index(g, co, ci, kh, kw)] += acc;
      }
    }
  }
}

inline std::size_t seq_index(const ScanGeometry& g, std::size_t b, std::size_t t, std::size_t d) {
  return (b * g.len + t) * g.dim + d;
}

inline std::size_t bc_index(const ScanGeometry& g, std::size_t b, std::size_t t, std::size_t n) {
  return (b * g.len + t) * g.state + n;
}

inline std::size_t state_index(const ScanGeometry& g, std::size_t b, std::size_t d, std::size_t n, std::size_t t) {
  return ((b * g.dim + d) * g.state + n) * g.len + t;
}

inline void compose_into(double a1, double b1, double& a2, double& b2) {
  b2 = a2 * b1 + b2;
  a2 = a2 * a1;
}

// One (batch, channel) pair of the fused scan. `decay` and `input` are
// len-sized scratch buffers owned by the caller.
template <bool Blelloch>
void scan_channel(const ScanGeometry& g, const ScanInputs& in, std::size_t b, std::size_t d,
                  std::vector<double>& decay, std::vector<double>& input, std::span<double> y,
                  std::span<double> states, std::span<double> h_final) {
  for (std::size_t t = 0; t < g.len; ++t) y[seq_index(g, b, t, d)] = in.skip[d] * in.x[seq_index(g, b, t, d)];
  for (std::size_t n = 0; n < g.state; ++n) {
    const double h0 = in.h0.empty() ? 0.0 : in.h0[(b * g.dim + d) * g.state + n];
    const double a_dn = in.A[d * g.state + n];
    double h_last = h0;
    if constexpr (Blelloch) {
      for (std::size_t t = 0; t < g.len; ++t) {
        const double dt = in.delta[seq_index(g, b, t, d)];
        decay[t] = std::exp(dt * a_dn);
        input[t] = dt * in.B[bc_index(g, b, t, n)] * in.x[seq_index(g, b, t, d)];
      }
      scan_lane_blelloch(std::span<double>(decay.data(), g.len), std::span<double>(input.data(), g.len));
      for (std::size_t t = 0; t < g.len; ++t) {
        const double h = decay[t] * h0 + input[t];
        input[t] = h;
      }
      h_last = input[g.len - 1];
    } else {
      double h = h0;
      for (std::size_t t = 0; t < g.len; ++t) {
        const double dt = in.delta[seq_index(g, b, t, d)];
        h = std::exp(dt * a_dn) * h + dt * in.B[bc_index(g, b, t, n)] * in.x[seq_index(g, b, t, d)];
        input[t] = h;
      }
      h_last = h;
    }
    for (std::size_t t = 0; t < g.len; ++t) {
      y[seq_index(g, b, t, d)] += in.C[bc_index(g, b, t, n)] * input[t];
      if (!states.empty()) states[state_index(g, b, d, n, t)] = input[t];
    }
    if (!h_final.empty()) h_final[(b * g.dim + d) * g.state + n] = h_last;
  }
}

}  // namespace

void scan_lane_sequential(std::span<double> decay, std::span<double> input) {
  for (std::size_t t = 1; t < decay.size(); ++t) compose_into(decay[t - 1], input[t - 1], decay[t], input[t]);
}

void scan_lane_blelloch(std::span<double> decay, std::span<double> input) {
  const std::size_t len = decay.size();
  if (len < 2) return;
  std::size_t padded = 1;
  while (padded < len) padded <<= 1;
  // Identity (1, 0) pads the lane to a full binary tree.
  std::vector<double> a(padded, 1.0), u(padded, 0.0);
  std::copy(decay.begin(), decay.end(), a.begin());
  std::copy(input.begin(), input.end(), u.begin());
  // Up-sweep: node i of level `stride` reduces the block ending at i.
  for (std::size_t stride = 1; stride < padded; stride <<= 1) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride)
      compose_into(a[i - stride], u[i - stride], a[i], u[i]);
  }
  // Down-sweep: fill the remaining inclusive prefixes from completed left neighbours.
  for (std::size_t stride = padded / 4; stride >= 1; stride >>= 1) {
    for (std::size_t i = 3 * stride - 1; i < padded; i += 2 * stride)
      compose_into(a[i - stride], u[i - stride], a[i], u[i]);
  }
  std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(len), decay.begin());
  std::copy(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(len), input.begin());
}

namespace serial {

void gemm(const GemmArgs& args, std::span<const double> a, std::span<const double> b, std::span<double> c) {
  GemmOperands ops = prepare(args, a, b);
  gemm_nn_rows(0, args.m, args.n, args.k, ops.a, ops.b, c.data(), args.accumulate);
}

void conv_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                  std::span<double> y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t h = 0; h < g.height; ++h) conv_forward_row(g, b, h, x.data(), w.data(), y.data());
}

void conv_backward_input(const ConvGeometry& g, std::span<const double> dy, std::span<const double> w,
                         std::span<double> dx) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t h = 0; h < g.height; ++h) conv_backward_input_row(g, b, h, dy.data(), w.data(), dx.data());
}

void conv_backward_weight(const ConvGeometry& g, std::span<const double> dy, std::span<const double> x,
                          std::span<double> dw) {
  for (std::size_t co = 0; co < g.out_channels; ++co) conv_backward_weight_channel(g, co, dy.data(), x.data(), dw.data());
}

void selective_scan(const ScanGeometry& g, const ScanInputs& in, std::span<double> y, std::span<double> states,
                    std::span<double> h_final) {
  std::vector<double> decay(g.len), input(g.len);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t d = 0; d < g.dim; ++d) scan_channel<false>(g, in, b, d, decay, input, y, states, h_final);
}

}  // namespace serial

namespace parallel {

void gemm(const GemmArgs& args, std::span<const double> a, std::span<const double> b, std::span<double> c) {
  GemmOperands ops = prepare(args, a, b);
  const auto m = static_cast<std::ptrdiff_t>(args.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) {
    gemm_nn_rows(static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1, args.n, args.k, ops.a, ops.b,
                 c.data(), args.accumulate);
  }
}

void conv_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                  std::span<double> y) {
  const auto rows = static_cast<std::ptrdiff_t>(g.batch * g.height);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const auto row = static_cast<std::size_t>(r);
    conv_forward_row(g, row / g.height, row % g.height, x.data(), w.data(), y.data());
  }
}

void conv_backward_input(const ConvGeometry& g, std::span<const double> dy, std::span<const double> w,
                         std::span<double> dx) {
  const auto rows = static_cast<std::ptrdiff_t>(g.batch * g.height);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const auto row = static_cast<std::size_t>(r);
    conv_backward_input_row(g, row / g.height, row % g.height, dy.data(), w.data(), dx.data());
  }
}

void conv_backward_weight(const ConvGeometry& g, std::span<const double> dy, std::span<const double> x,
                          std::span<double> dw) {
  const auto channels = static_cast<std::ptrdiff_t>(g.out_channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t co = 0; co < channels; ++co)
    conv_backward_weight_channel(g, static_cast<std::size_t>(co), dy.data(), x.data(), dw.data());
}

void selective_scan(const ScanGeometry& g, const ScanInputs& in, std::span<double> y, std::span<double> states,
                    std::span<double> h_final) {
  const auto lanes = static_cast<std::ptrdiff_t>(g.batch * g.dim);
#pragma omp parallel
  {
    std::vector<double> decay(g.len), input(g.len);
#pragma omp for schedule(static)
    for (std::ptrdiff_t lane = 0; lane < lanes; ++lane) {
      const auto l = static_cast<std::size_t>(lane);
      scan_channel<true>(g, in, l / g.dim, l % g.dim, decay, input, y, states, h_final);
    }
  }
}

}  // namespace parallel

void selective_scan_backward(const ScanGeometry& g, const ScanInputs& in, std::span<const double> states,
                             std::span<const double> dy, const ScanGrads& grads) {
  // dh[b,d,n,t] = d(loss)/d(h_t), filled by a reverse recurrence per lane.
  std::vector<double> dh(g.batch * g.dim * g.state * g.len);
  auto prev_state = [&](std::size_t b, std::size_t d, std::size_t n, std::size_t t) {
    if (t > 0) return states[state_index(g, b, d, n, t - 1)];
    return in.h0.empty() ? 0.0 : in.h0[(b * g.dim + d) * g.state + n];
  };

  // Per-lane partial sums of dA, reduced over the batch in a fixed order below.
  std::vector<double> da_part(grads.A.empty() ? 0 : g.batch * g.dim * g.state);
  const auto lanes = static_cast<std::ptrdiff_t>(g.batch * g.dim);
#pragma omp parallel
  {
    std::vector<double> ddelta(g.len), dx(g.len);
#pragma omp for schedule(static)
    for (std::ptrdiff_t lane = 0; lane < lanes; ++lane) {
      const std::size_t b = static_cast<std::size_t>(lane) / g.dim;
      const std::size_t d = static_cast<std::size_t>(lane) % g.dim;
      for (std::size_t t = 0; t < g.len; ++t) {
        ddelta[t] = 0.0;
        dx[t] = dy[seq_index(g, b, t, d)] * in.skip[d];
      }
      for (std::size_t n = 0; n < g.state; ++n) {
        const double a_dn = in.A[d * g.state + n];
        double carry = 0.0;  // dh_{t+1} * a_{t+1}
        double da = 0.0;
        for (std::size_t t = g.len; t-- > 0;) {
          const double dt = in.delta[seq_index(g, b, t, d)];
          const double xt = in.x[seq_index(g, b, t, d)];
          const double bt = in.B[bc_index(g, b, t, n)];
          const double grad_h = carry + in.C[bc_index(g, b, t, n)] * dy[seq_index(g, b, t, d)];
          dh[state_index(g, b, d, n, t)] = grad_h;
          const double decay = std::exp(dt * a_dn);
          const double through = grad_h * prev_state(b, d, n, t) * decay;
          ddelta[t] += through * a_dn + grad_h * bt * xt;
          da += through * dt;
          dx[t] += grad_h * dt * bt;
          carry = grad_h * decay;
        }
        if (!da_part.empty()) da_part[static_cast<std::size_t>(lane) * g.state + n] = da;
      }
      for (std::size_t t = 0; t < g.len; ++t) {
        if (!grads.delta.empty()) grads.delta[seq_index(g, b, t, d)] += ddelta[t];
        if (!grads.x.empty()) grads.x[seq_index(g, b, t, d)] += dx[t];
      }
    }
  }

  const auto steps = static_cast<std::ptrdiff_t>(g.batch * g.len);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bt_index = 0; bt_index < steps; ++bt_index) {
    const std::size_t b = static_cast<std::size_t>(bt_index) / g.len;
    const std::size_t t = static_cast<std::size_t>(bt_index) % g.len;
    for (std::size_t n = 0; n < g.state; ++n) {
      double gb = 0.0, gc = 0.0;
      for (std::size_t d = 0; d < g.dim; ++d) {
        const std::size_t si = seq_index(g, b, t, d);
        gb += dh[state_index(g, b, d, n, t)] * in.delta[si] * in.x[si];
        gc += dy[si] * states[state_index(g, b, d, n, t)];
      }
      if (!grads.B.empty()) grads.B[bc_index(g, b, t, n)] += gb;
      if (!grads.C.empty()) grads.C[bc_index(g, b, t, n)] += gc;
    }
  }

  const auto dims = static_cast<std::ptrdiff_t>(g.dim);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t di = 0; di < dims; ++di) {
    const auto d = static_cast<std::size_t>(di);
    if (!grads.A.empty()) {
      for (std::size_t n = 0; n < g.state; ++n) {
        double acc = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b) acc += da_part[(b * g.dim + d) * g.state + n];
        grads.A[d * g.state + n] += acc;
      }
    }
    if (!grads.skip.empty()) {
      double acc = 0.0;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t t = 0; t < g.len; ++t) acc += dy[seq_index(g, b, t, d)] * in.x[seq_index(g, b, t, d)];
      grads.skip[d] += acc;
    }
  }
}

int thread_count() { return omp_get_max_threads(); }

void set_thread_count(int n) {
  if (n > 0) omp_set_num_threads(n);
}

}  // namespace ssmcyto::kernels

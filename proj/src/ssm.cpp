#include "ssmcyto/ssm.hpp"

#include <omp.h>

#include <cmath>
#include <vector>

#include "ssmcyto/error.hpp"
#include "ssmcyto/kernels.hpp"

namespace ssmcyto {

namespace {

struct Dims {
  std::size_t len, dim, state;
};

Dims check_scan_inputs(const DiscreteSSM& disc, const Tensor& x, const Tensor& C, const Tensor& D_skip,
                       const Tensor& h0) {
  if (disc.A_bar.rank() != 3 || disc.B_bar.shape() != disc.A_bar.shape()) {
    throw ShapeError("scan: A_bar and B_bar must share an [L, D, N] shape");
  }
  Dims d{disc.A_bar.dim(0), disc.A_bar.dim(1), disc.A_bar.dim(2)};
  if (x.shape() != Shape{d.len, d.dim}) throw ShapeError("scan: x must be [L, D], got " + shape_str(x.shape()));
  if (C.shape() != Shape{d.len, d.state}) throw ShapeError("scan: C must be [L, N], got " + shape_str(C.shape()));
  if (D_skip.numel() != d.dim) throw ShapeError("scan: D_skip must have D entries");
  if (h0.defined() && h0.shape() != Shape{d.dim, d.state}) {
    throw ShapeError("scan: h0 must be [D, N], got " + shape_str(h0.shape()));
  }
  return d;
}

// Output assembly shared by both scan routes: states[d][n][t] -> y, h_final.
ScanResult readout(const Dims& d, const std::vector<double>& states, const Tensor& x, const Tensor& C,
                   const Tensor& D_skip) {
  std::vector<double> y(d.len * d.dim), h_final(d.dim * d.state);
  auto xd = x.data();
  auto cd = C.data();
  auto dd = D_skip.data();
  for (std::size_t ch = 0; ch < d.dim; ++ch) {
    for (std::size_t t = 0; t < d.len; ++t) {
      double acc = dd[ch] * xd[t * d.dim + ch];
      for (std::size_t n = 0; n < d.state; ++n) acc += cd[t * d.state + n] * states[(ch * d.state + n) * d.len + t];
      y[t * d.dim + ch] = acc;
    }
    for (std::size_t n = 0; n < d.state; ++n)
      h_final[ch * d.state + n] = states[(ch * d.state + n) * d.len + d.len - 1];
  }
  return {Tensor::from({d.len, d.dim}, std::move(y)), Tensor::from({d.dim, d.state}, std::move(h_final))};
}

}  // namespace

DiscreteSSM discretize(const SSMParams& p) {
  if (p.A.rank() != 2 || p.delta.rank() != 2 || p.delta.dim(1) != p.A.dim(0)) {
    throw ShapeError("discretize: A must be [D, N] and delta [L, D]");
  }
  const std::size_t len = p.delta.dim(0), dim = p.A.dim(0), state = p.A.dim(1);
  if (p.B.shape() != Shape{len, state}) throw ShapeError("discretize: B must be [L, N], got " + shape_str(p.B.shape()));
  auto a = p.A.data();
  auto dt = p.delta.data();
  auto b = p.B.data();
  for (double v : dt) {
    if (!(v > 0)) throw ContractError("discretize: step size delta must be positive (softplus parameterization broken)");
  }
  for (double v : a) {
    if (!(v < 0)) throw ContractError("discretize: state matrix A must be strictly negative");
  }
  std::vector<double> a_bar(len * dim * state), b_bar(len * dim * state);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < dim; ++d)
      for (std::size_t n = 0; n < state; ++n) {
        const std::size_t i = (t * dim + d) * state + n;
        a_bar[i] = std::exp(dt[t * dim + d] * a[d * state + n]);
        b_bar[i] = dt[t * dim + d] * b[t * state + n];
      }
  return {Tensor::from({len, dim, state}, std::move(a_bar)), Tensor::from({len, dim, state}, std::move(b_bar))};
}

ScanResult scan_sequential(const DiscreteSSM& disc, const Tensor& x, const Tensor& C, const Tensor& D_skip,
                           const Tensor& h0) {
  const Dims d = check_scan_inputs(disc, x, C, D_skip, h0);
  auto ab = disc.A_bar.data();
  auto bb = disc.B_bar.data();
  auto xd = x.data();
  std::vector<double> states(d.dim * d.state * d.len);
  for (std::size_t ch = 0; ch < d.dim; ++ch) {
    for (std::size_t n = 0; n < d.state; ++n) {
      double h = h0.defined() ? h0.at(ch * d.state + n) : 0.0;
      for (std::size_t t = 0; t < d.len; ++t) {
        const std::size_t i = (t * d.dim + ch) * d.state + n;
        h = ab[i] * h + bb[i] * xd[t * d.dim + ch];
        states[(ch * d.state + n) * d.len + t] = h;
      }
    }
  }
  return readout(d, states, x, C, D_skip);
}

ScanResult scan_parallel(const DiscreteSSM& disc, const Tensor& x, const Tensor& C, const Tensor& D_skip,
                         const Tensor& h0) {
  const Dims d = check_scan_inputs(disc, x, C, D_skip, h0);
  auto ab = disc.A_bar.data();
  auto bb = disc.B_bar.data();
  auto xd = x.data();
  std::vector<double> states(d.dim * d.state * d.len);
  const auto lanes = static_cast<std::ptrdiff_t>(d.dim * d.state);
#pragma omp parallel
  {
    std::vector<double> decay(d.len), input(d.len);
#pragma omp for schedule(static)
    for (std::ptrdiff_t lane = 0; lane < lanes; ++lane) {
      const std::size_t ch = static_cast<std::size_t>(lane) / d.state;
      const std::size_t n = static_cast<std::size_t>(lane) % d.state;
      for (std::size_t t = 0; t < d.len; ++t) {
        const std::size_t i = (t * d.dim + ch) * d.state + n;
        decay[t] = ab[i];
        input[t] = bb[i] * xd[t * d.dim + ch];
      }
      kernels::scan_lane_blelloch(decay, input);
      const double start = h0.defined() ? h0.at(ch * d.state + n) : 0.0;
      for (std::size_t t = 0; t < d.len; ++t)
        states[static_cast<std::size_t>(lane) * d.len + t] = decay[t] * start + input[t];
    }
  }
  return readout(d, states, x, C, D_skip);
}

Tensor S6Layer::forward(const Tensor& x, ScanImpl impl) const {
  Tensor delta = softplus(linear(x, W_delta, b_delta));
  Tensor B = matmul(x, W_B);
  Tensor C = matmul(x, W_C);
  Tensor A = neg(exp(A_log));
  return selective_scan(x, delta, A, B, C, D_skip, impl);
}

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

S6Layer make_s6(ParamStore& store, const std::string& name, std::size_t d_inner, std::size_t n_state, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_inner));
  S6Layer s;
  s.W_delta = store.uniform(name + ".W_delta", {d_inner, d_inner}, bound, rng, true);
  std::vector<double> bias(d_inner);
  for (double& b : bias) {
    const double dt = std::exp(uniform(rng, std::log(1e-3), std::log(1e-1)));
    b = inverse_softplus(dt);
  }
  s.b_delta = store.add(name + ".b_delta", {d_inner}, std::move(bias), false);
  s.W_B = store.uniform(name + ".W_B", {d_inner, n_state}, bound, rng, true);
  s.W_C = store.uniform(name + ".W_C", {d_inner, n_state}, bound, rng, true);
  std::vector<double> a_log(d_inner * n_state);
  for (std::size_t d = 0; d < d_inner; ++d)
    for (std::size_t n = 0; n < n_state; ++n) a_log[d * n_state + n] = std::log(static_cast<double>(n + 1));
  s.A_log = store.add(name + ".A_log", {d_inner, n_state}, std::move(a_log), false);
  s.D_skip = store.constant(name + ".D_skip", {d_inner}, 1.0);
  return s;
}

}  // namespace ssmcyto

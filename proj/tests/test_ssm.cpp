#include <doctest.h>

#include <cmath>
#include <random>

#include "ssmcyto/error.hpp"
#include "ssmcyto/gradcheck.hpp"
#include "ssmcyto/kernels.hpp"
#include "ssmcyto/ssm.hpp"
#include "test_util.hpp"

using namespace ssmcyto;
using testutil::random_tensor;

namespace {

DiscreteSSM constant_disc(std::size_t len, std::size_t dim, std::size_t state, double a, double b) {
  return {Tensor::full({len, dim, state}, a), Tensor::full({len, dim, state}, b)};
}

SSMParams random_params(std::size_t len, std::size_t dim, std::size_t state, std::mt19937_64& rng) {
  SSMParams p;
  p.A = random_tensor({dim, state}, rng, -3.0, -0.05);
  p.delta = random_tensor({len, dim}, rng, 0.01, 1.0);
  p.B = random_tensor({len, state}, rng);
  p.C = random_tensor({len, state}, rng);
  p.D_skip = random_tensor({dim}, rng);
  return p;
}

}  // namespace

TEST_CASE("discretize examples") {
  SSMParams p;
  p.A = Tensor::from({1, 1}, {-1.0});
  p.delta = Tensor::from({1, 1}, {std::log(2.0)});
  p.B = Tensor::from({1, 1}, {2.0});
  p.C = Tensor::from({1, 1}, {1.0});
  p.D_skip = Tensor::from({1}, {0.0});
  DiscreteSSM d = discretize(p);
  CHECK(d.A_bar.at(0) == doctest::Approx(0.5).epsilon(1e-14));

  p.delta = Tensor::from({1, 1}, {0.5});
  CHECK(discretize(p).B_bar.at(0) == 1.0);

  p.delta = Tensor::from({1, 1}, {1e-14});
  d = discretize(p);
  CHECK(d.A_bar.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(d.B_bar.at(0)) < 1e-13);

  p.delta = Tensor::from({1, 1}, {0.0});
  CHECK_THROWS_AS(discretize(p), ContractError);
  p.delta = Tensor::from({1, 1}, {-0.1});
  CHECK_THROWS_AS(discretize(p), ContractError);
}

TEST_CASE("discretized decay stays strictly inside (0, 1)") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    DiscreteSSM d = discretize(random_params(16, 3, 4, rng));
    for (double v : d.A_bar.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("scan_sequential examples") {
  // Memoryless: y_t = (C_t · B_bar_t) x_t + D x_t.
  std::mt19937_64 rng(22);
  const std::size_t len = 5, dim = 2, state = 3;
  DiscreteSSM memoryless{Tensor::zeros({len, dim, state}), random_tensor({len, dim, state}, rng)};
  Tensor x = random_tensor({len, dim}, rng), C = random_tensor({len, state}, rng), D = random_tensor({dim}, rng);
  ScanResult r = scan_sequential(memoryless, x, C, D);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < dim; ++d) {
      double cb = 0.0;
      for (std::size_t n = 0; n < state; ++n) cb += C.at(t * state + n) * memoryless.B_bar.at((t * dim + d) * state + n);
      CHECK(r.y.at(t * dim + d) == doctest::Approx(cb * x.at(t * dim + d) + D.at(d) * x.at(t * dim + d)));
    }

  ScanResult s = scan_sequential(constant_disc(3, 1, 1, 0.5, 1.0), Tensor::full({3, 1}, 1.0), Tensor::full({3, 1}, 1.0),
                                 Tensor::zeros({1}));
  CHECK(s.y.at(0) == 1.0);
  CHECK(s.y.at(1) == 1.5);
  CHECK(s.y.at(2) == 1.75);

  Tensor xs = Tensor::from({4, 1}, {3, -1, 2, 5});
  ScanResult acc = scan_sequential(constant_disc(4, 1, 1, 1.0, 1.0), xs, Tensor::full({4, 1}, 1.0), Tensor::zeros({1}));
  CHECK(acc.y.at(0) == 3.0);
  CHECK(acc.y.at(1) == 2.0);
  CHECK(acc.y.at(2) == 4.0);
  CHECK(acc.y.at(3) == 9.0);
  CHECK(acc.h_final.at(0) == 9.0);
}

TEST_CASE("scan_parallel matches scan_sequential") {
  std::mt19937_64 rng(23);
  SUBCASE("L = 1") {
    SSMParams p = random_params(1, 3, 4, rng);
    DiscreteSSM d = discretize(p);
    Tensor x = random_tensor({1, 3}, rng);
    ScanResult a = scan_sequential(d, x, p.C, p.D_skip), b = scan_parallel(d, x, p.C, p.D_skip);
    CHECK(testutil::max_abs_diff(a.y.data(), b.y.data()) == 0.0);
  }
  SUBCASE("L = 64, D = 4, N = 8") {
    SSMParams p = random_params(64, 4, 8, rng);
    DiscreteSSM d = discretize(p);
    Tensor x = random_tensor({64, 4}, rng);
    ScanResult a = scan_sequential(d, x, p.C, p.D_skip), b = scan_parallel(d, x, p.C, p.D_skip);
    CHECK(testutil::rel_diff(b.y.data(), a.y.data()) < 1e-9);
    CHECK(testutil::rel_diff(b.h_final.data(), a.h_final.data()) < 1e-9);
  }
  SUBCASE("nonzero h0") {
    SSMParams p = random_params(37, 3, 5, rng);
    DiscreteSSM d = discretize(p);
    Tensor x = random_tensor({37, 3}, rng), h0 = random_tensor({3, 5}, rng, -2, 2);
    ScanResult a = scan_sequential(d, x, p.C, p.D_skip, h0), b = scan_parallel(d, x, p.C, p.D_skip, h0);
    CHECK(testutil::rel_diff(b.y.data(), a.y.data()) < 1e-9);
    ScanResult zero = scan_sequential(d, x, p.C, p.D_skip);
    CHECK(testutil::max_abs_diff(a.y.data(), zero.y.data()) > 1e-6);
  }
}

TEST_CASE("property: scan equivalence on randomized instances") {
  std::mt19937_64 rng(24);
  std::uniform_int_distribution<std::size_t> len_d(1, 96), dim_d(1, 6), state_d(1, 8);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t L = len_d(rng), D = dim_d(rng), N = state_d(rng);
    SSMParams p = random_params(L, D, N, rng);
    DiscreteSSM d = discretize(p);
    Tensor x = random_tensor({L, D}, rng), h0 = random_tensor({D, N}, rng);
    ScanResult a = scan_sequential(d, x, p.C, p.D_skip, trial % 2 ? h0 : Tensor{});
    ScanResult b = scan_parallel(d, x, p.C, p.D_skip, trial % 2 ? h0 : Tensor{});
    CHECK(testutil::rel_diff(b.y.data(), a.y.data()) < 1e-9);
  }
}

TEST_CASE("scans are causal") {
  std::mt19937_64 rng(25);
  const std::size_t L = 20, D = 3, N = 4;
  SSMParams p = random_params(L, D, N, rng);
  DiscreteSSM d = discretize(p);
  Tensor x = random_tensor({L, D}, rng);
  for (std::size_t k : {0u, 5u, 18u}) {
    Tensor x2 = x.clone();
    for (std::size_t t = k + 1; t < L; ++t)
      for (std::size_t c = 0; c < D; ++c) x2.mutable_data()[t * D + c] += 3.0;
    for (auto scan : {&scan_sequential, &scan_parallel}) {
      ScanResult a = scan(d, x, p.C, p.D_skip, {}), b = scan(d, x2, p.C, p.D_skip, {});
      for (std::size_t i = 0; i < (k + 1) * D; ++i) CHECK(a.y.at(i) == b.y.at(i));
    }
  }
}

TEST_CASE("state stays within the geometric bound for constant parameters") {
  std::mt19937_64 rng(26);
  const double a_bar = 0.9, b_bar = 0.7;
  const std::size_t L = 200;
  Tensor x = random_tensor({L, 1}, rng, -2, 2);
  const double bound = b_bar * testutil::max_abs(x.data()) / (1.0 - a_bar);
  DiscreteSSM d = constant_disc(L, 1, 1, a_bar, b_bar);
  for (std::size_t t = 1; t <= L; ++t) {
    DiscreteSSM prefix = constant_disc(t, 1, 1, a_bar, b_bar);
    Tensor xt = Tensor::from({t, 1}, std::vector<double>(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(t)));
    ScanResult r = scan_sequential(prefix, xt, Tensor::full({t, 1}, 1.0), Tensor::zeros({1}));
    CHECK(std::abs(r.h_final.at(0)) <= bound);
  }
}

TEST_CASE("fused batched kernels agree with discretize + scan_sequential") {
  std::mt19937_64 rng(27);
  const std::size_t batch = 3, L = 19, D = 5, N = 4;
  Tensor x = random_tensor({batch, L, D}, rng), delta = random_tensor({batch, L, D}, rng, 0.01, 1.0);
  Tensor A = random_tensor({D, N}, rng, -2.0, -0.1), B = random_tensor({batch, L, N}, rng),
         C = random_tensor({batch, L, N}, rng), skip = random_tensor({D}, rng);
  Tensor y_seq = selective_scan(x, delta, A, B, C, skip, ScanImpl::sequential);
  Tensor y_par = selective_scan(x, delta, A, B, C, skip, ScanImpl::parallel);
  CHECK(testutil::rel_diff(y_par.data(), y_seq.data()) < 1e-9);
  for (std::size_t b = 0; b < batch; ++b) {
    auto slice = [&](const Tensor& t, std::size_t width) {
      auto d = t.data();
      return Tensor::from({L, width}, std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(b * L * width),
                                                           d.begin() + static_cast<std::ptrdiff_t>((b + 1) * L * width)));
    };
    SSMParams p{A, slice(delta, D), slice(B, N), slice(C, N), skip};
    ScanResult r = scan_sequential(discretize(p), slice(x, D), p.C, skip);
    Tensor yb = slice(y_seq, D);
    CHECK(testutil::rel_diff(yb.data(), r.y.data()) < 1e-12);
  }
}

TEST_CASE("discretize and scan compose to correct gradients") {
  std::mt19937_64 rng(28);
  const std::size_t batch = 2, L = 7, D = 3, N = 4;
  Tensor x = random_tensor({batch, L, D}, rng), delta = random_tensor({batch, L, D}, rng, 0.05, 0.8);
  Tensor A = random_tensor({D, N}, rng, -2.0, -0.2), B = random_tensor({batch, L, N}, rng),
         C = random_tensor({batch, L, N}, rng), skip = random_tensor({D}, rng), r = random_tensor({batch, L, D}, rng);
  for (ScanImpl impl : {ScanImpl::sequential, ScanImpl::parallel}) {
    auto report = grad_check([&] { return testutil::probe(selective_scan(x, delta, A, B, C, skip, impl), r); },
                             {x, delta, A, B, C, skip}, {1e-4});
    CHECK(report.passed);
  }
}

TEST_CASE("S6 layer") {
  std::mt19937_64 seed_rng(29);
  Rng rng(29);
  ParamStore store;
  S6Layer s6 = make_s6(store, "s6", 4, 8, rng);
  for (double a : s6.A_log.data()) CHECK(-std::exp(a) < 0.0);
  for (double b : s6.b_delta.data()) {
    const double dt = std::log1p(std::exp(b));
    CHECK(dt >= 1e-3 * (1 - 1e-9));
    CHECK(dt <= 1e-1 * (1 + 1e-9));
  }

  SUBCASE("vanishing step size leaves only the skip path") {
    for (double& w : s6.W_delta.mutable_data()) w = 0.0;
    for (double& b : s6.b_delta.mutable_data()) b = -60.0;
    for (double& d : s6.D_skip.mutable_data()) d = 0.37;
    Tensor x = random_tensor({1, 9, 4}, seed_rng);
    Tensor y = s6.forward(x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(0.37 * x.at(i)).epsilon(1e-12));
  }
  SUBCASE("parallel and sequential scans agree inside the layer") {
    Tensor x = random_tensor({2, 33, 4}, seed_rng, -2, 2);
    Tensor a = s6.forward(x, ScanImpl::parallel), b = s6.forward(x, ScanImpl::sequential);
    CHECK(testutil::rel_diff(a.data(), b.data()) < 1e-9);
  }
  SUBCASE("full layer gradient on a 1x8 sequence") {
    Tensor x = random_tensor({1, 8, 4}, seed_rng);
    Tensor r = random_tensor({1, 8, 4}, seed_rng);
    std::vector<Tensor> leaves{x};
    for (const Param& p : store.params()) leaves.push_back(p.value);
    auto report = grad_check([&] { return testutil::probe(s6.forward(x), r); }, leaves, {1e-3});
    CHECK(report.passed);
    CHECK(report.checked > 100);
  }
}

TEST_CASE("parallel fused scan is bitwise stable across thread counts") {
  std::mt19937_64 rng(30);
  kernels::ScanGeometry g{2, 40, 6, 4};
  Tensor x = random_tensor({2 * 40 * 6}, rng), delta = random_tensor({2 * 40 * 6}, rng, 0.01, 1.0),
         A = random_tensor({24}, rng, -2, -0.1), B = random_tensor({2 * 40 * 4}, rng), C = random_tensor({2 * 40 * 4}, rng),
         skip = random_tensor({6}, rng);
  kernels::ScanInputs in{x.data(), delta.data(), A.data(), B.data(), C.data(), skip.data(), {}};
  const int saved = kernels::thread_count();
  std::vector<double> y1(480), y2(480);
  kernels::set_thread_count(1);
  kernels::parallel::selective_scan(g, in, y1, {}, {});
  kernels::set_thread_count(4);
  kernels::parallel::selective_scan(g, in, y2, {}, {});
  kernels::set_thread_count(saved);
  CHECK(y1 == y2);
}

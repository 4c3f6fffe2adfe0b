#include "ssmcyto/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "ssmcyto/blocks.hpp"
#include "ssmcyto/metrics.hpp"
#include "ssmcyto/model.hpp"
#include "ssmcyto/ops.hpp"
#include "ssmcyto/ssm.hpp"
#include "ssmcyto/traversal.hpp"

namespace ssmcyto {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = uniform(rng, lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

Tensor probe(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

double max_abs(std::span<const double> v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

SuiteResult scan_equivalence_suite(const ScanSuiteOptions& opt) {
  const auto t0 = Clock::now();
  SuiteResult r{"scan equivalence", true, 0, 0.0, "", 0.0};
  Rng rng(opt.seed);
  NoGradGuard guard;
  for (std::size_t i = 0; i < opt.instances; ++i) {
    const std::size_t len = 1 + uniform_index(rng, opt.max_len);
    const std::size_t dim = 1 + uniform_index(rng, opt.max_dim);
    const std::size_t state = 1 + uniform_index(rng, opt.max_state);
    SSMParams p;
    p.A = random_tensor({dim, state}, rng, -2.0, -0.05, false);
    p.delta = random_tensor({len, dim}, rng, 0.001, 0.5, false);
    p.B = random_tensor({len, state}, rng, -1.0, 1.0, false);
    p.C = random_tensor({len, state}, rng, -1.0, 1.0, false);
    p.D_skip = random_tensor({dim}, rng, -1.0, 1.0, false);
    const Tensor x = random_tensor({len, dim}, rng, -1.0, 1.0, false);
    const Tensor h0 = random_tensor({dim, state}, rng, -1.0, 1.0, false);
    const DiscreteSSM disc = discretize(p);
    const ScanResult a = scan_sequential(disc, x, p.C, p.D_skip, h0);
    const ScanResult b = scan_parallel(disc, x, p.C, p.D_skip, h0);
    const double ey = max_abs_diff(b.y.data(), a.y.data()) / std::max(max_abs(a.y.data()), 1e-300);
    const double eh = max_abs_diff(b.h_final.data(), a.h_final.data()) / std::max(max_abs(a.h_final.data()), 1e-300);
    r.worst = std::max({r.worst, ey, eh});
    ++r.cases;
  }
  r.passed = r.worst < opt.tol;
  r.seconds = seconds_since(t0);
  std::ostringstream d;
  d << r.cases << " instances (L<=" << opt.max_len << ", D<=" << opt.max_dim << ", N<=" << opt.max_state
    << ", nonzero h0), worst rel err " << std::scientific << std::setprecision(2) << r.worst;
  r.detail = d.str();
  return r;
}

std::vector<GradItem> gradient_items(std::uint64_t seed, bool include_blocks) {
  std::vector<GradItem> items;
  Rng rng(seed);
  auto check = [&items](const std::string& name, bool composite, const std::function<Tensor()>& f,
                      std::vector<Tensor> leaves) {
    GradCheckOptions opt;
    opt.tol = composite ? 1e-3 : 1e-4;
    items.push_back({name, composite, grad_check(f, std::move(leaves), opt)});
  };

  using Unary = Tensor (*)(const Tensor&);
  const std::pair<const char*, Unary> unary[] = {
      {"exp", static_cast<Unary>(&ssmcyto::exp)}, {"sigmoid", &sigmoid}, {"silu", &silu},
      {"softplus", &softplus},  {"softmax", &softmax}, {"log_softmax", &log_softmax}, {"neg", &neg}};
  for (const auto& [name, op] : unary) {
    Tensor x = random_tensor({3, 4}, rng, -2, 2), r = random_tensor({3, 4}, rng);
    check(name, false, [&, op] { return probe(op(x), r); }, {x});
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 1, 4}, rng), bias = random_tensor({4}, rng);
    Tensor r = random_tensor({2, 3, 4}, rng);
    check("add (broadcast)", false, [=] { return probe(add(a, b), r); }, {a, b});
    check("sub (broadcast)", false, [=] { return probe(sub(a, bias), r); }, {a, bias});
    check("mul (broadcast)", false, [=] { return probe(mul(a, b), r); }, {a, b});
    check("scale", false, [=] { return probe(scale(a, -1.7), r); }, {a});
    check("sum", false, [=] { return scale(sum(mul(a, a)), 0.5); }, {a});
    check("mean", false, [=] { return mean(mul(a, r)); }, {a});
    Tensor r2 = random_tensor({2, 4}, rng);
    check("mean_tokens", false, [=] { return probe(mean_tokens(a), r2); }, {a});
    check("reshape", false, [=] { return probe(reshape(a, {6, 4}), reshape(r, {6, 4})); }, {a});
    Tensor w = random_tensor({4, 5}, rng), b5 = random_tensor({5}, rng), r5 = random_tensor({2, 3, 5}, rng);
    check("matmul", false, [=] { return probe(matmul(a, w), r5); }, {a, w});
    check("linear", false, [=] { return probe(linear(a, w, b5), r5); }, {a, w, b5});
    Tensor c = random_tensor({2, 3, 2}, rng), r6 = random_tensor({2, 3, 6}, rng), r3 = random_tensor({2, 3, 2}, rng);
    check("concat_last", false, [=] { return probe(concat_last({a, c}), r6); }, {a, c});
    check("slice_last", false, [=] { return probe(slice_last(a, 1, 3), r3); }, {a});
    const std::vector<std::size_t> perm{2, 0, 3, 1}, tokens{2, 2, 0};
    check("permute_last", false, [=] { return probe(permute_last(a, perm), r); }, {a});
    check("gather_tokens", false, [=] { return probe(gather_tokens(a, tokens), r); }, {a});
    Tensor gamma = random_tensor({4}, rng, 0.5, 1.5), beta = random_tensor({4}, rng);
    check("layer_norm", false, [=] { return probe(layer_norm(a, gamma, beta), r); }, {a, gamma, beta});
    Tensor logits = random_tensor({3, 3}, rng, -3, 3);
    const std::vector<int> labels{1, 0, 2};
    const std::vector<double> weights{0.5, 2.0, 1.25};
    check("cross_entropy (weighted)", false, [=] { return cross_entropy(logits, labels, weights); }, {logits});
  }
  struct ConvCase {
    const char* name;
    ConvOptions opt;
    Shape x, w, y;
  };
  const ConvCase convs[] = {
      {"convolve causal1d", {ConvMode::causal1d, 1}, {2, 6, 3}, {2, 3, 3}, {2, 6, 2}},
      {"convolve causal1d depthwise", {ConvMode::causal1d, 3}, {2, 6, 3}, {3, 1, 4}, {2, 6, 3}},
      {"convolve standard1d", {ConvMode::standard1d, 1}, {2, 6, 3}, {4, 3, 3}, {2, 6, 4}},
      {"convolve depthwise1d", {ConvMode::depthwise1d}, {1, 7, 4}, {4, 1, 3}, {1, 7, 4}},
      {"convolve standard2d", {ConvMode::standard2d, 1, 3, 4}, {2, 12, 2}, {3, 2, 3, 3}, {2, 12, 3}},
      {"convolve grouped2d", {ConvMode::grouped2d, 2, 4, 3}, {1, 12, 4}, {6, 2, 3, 3}, {1, 12, 6}},
  };
  for (const ConvCase& c : convs) {
    Tensor x = random_tensor(c.x, rng), w = random_tensor(c.w, rng), r = random_tensor(c.y, rng);
    const ConvOptions opt = c.opt;
    check(c.name, false, [=] { return probe(convolve(x, w, opt), r); }, {x, w});
  }
  for (ScanImpl impl : {ScanImpl::sequential, ScanImpl::parallel}) {
    const std::size_t b = 2, l = 7, d = 3, n = 4;
    Tensor x = random_tensor({b, l, d}, rng), delta = random_tensor({b, l, d}, rng, 0.05, 0.8);
    Tensor A = random_tensor({d, n}, rng, -1.5, -0.2), B = random_tensor({b, l, n}, rng);
    Tensor C = random_tensor({b, l, n}, rng), skip = random_tensor({d}, rng), r = random_tensor({b, l, d}, rng);
    check(impl == ScanImpl::sequential ? "selective_scan (sequential)" : "selective_scan (parallel)", false,
        [=] { return probe(selective_scan(x, delta, A, B, C, skip, impl), r); }, {x, delta, A, B, C, skip});
  }

  {
    Rng init(seed + 1);
    ParamStore store;
    const S6Layer s6 = make_s6(store, "s6", 6, 4, init);
    Tensor x = random_tensor({2, 9, 6}, rng), r = random_tensor({2, 9, 6}, rng);
    std::vector<Tensor> leaves{x};
    for (const Param& p : store.params()) leaves.push_back(p.value);
    check("S6 layer", true, [=] { return probe(s6.forward(x), r); }, leaves);
  }
  {
    Rng init(seed + 2);
    ParamStore store;
    const Linear proj = make_linear(store, "merge", 12, 5, false, init);
    Tensor fmap = random_tensor({2, 16, 3}, rng), r = random_tensor({2, 4, 5}, rng);
    check("patch merging", true, [=] { return probe(downsample(fmap, {4, 4}, proj), r); }, {fmap, proj.weight});
  }
  if (include_blocks) {
    for (BlockVariant v : {BlockVariant::vanilla, BlockVariant::vim, BlockVariant::vmamba_ss2d,
                           BlockVariant::mambavision, BlockVariant::medmamba, BlockVariant::localmamba}) {
      Rng init(seed + 3);
      ParamStore store;
      const MambaBlock block(make_block_config(v, 8), store, "b", init);
      Tensor x = random_tensor({1, 16, 8}, rng), r = random_tensor({1, 16, 8}, rng);
      std::vector<Tensor> leaves{x};
      for (const Param& p : store.params()) leaves.push_back(p.value);
      check("block " + to_string(v), true, [&block, x, r] { return probe(block.forward(x, {4, 4}), r); }, leaves);
    }
  }
  return items;
}

SuiteResult gradient_suite(const std::vector<GradItem>& items, double primitive_tol, double composite_tol) {
  SuiteResult r{"gradient checks", true, items.size(), 0.0, "", 0.0};
  double worst_p = 0, worst_c = 0;
  std::string failed;
  for (const GradItem& it : items) {
    const double e = it.report.max_rel_error;
    (it.composite ? worst_c : worst_p) = std::max(it.composite ? worst_c : worst_p, e);
    if (e >= (it.composite ? composite_tol : primitive_tol)) {
      r.passed = false;
      failed += (failed.empty() ? "" : ", ") + it.name + " (" + it.report.worst_tensor + ")";
    }
  }
  r.worst = std::max(worst_p / primitive_tol, worst_c / composite_tol);
  std::ostringstream d;
  d << items.size() << " checks, worst rel err primitives " << std::scientific << std::setprecision(2) << worst_p
    << " composites " << worst_c;
  if (!failed.empty()) d << "; failed: " << failed;
  r.detail = d.str();
  return r;
}

SuiteResult traversal_suite(std::size_t max_side) {
  const auto t0 = Clock::now();
  SuiteResult r{"traversals", true, 0, 0.0, "", 0.0};
  Rng rng(4);
  NoGradGuard guard;
  std::size_t mismatches = 0;
  for (std::size_t h = 1; h <= max_side; ++h)
    for (std::size_t w = 1; w <= max_side; ++w) {
      std::vector<Traversal> all;
      for (bool rev : {false, true}) {
        all.push_back(make_traversal(TraversalKind::row_major, h, w, rev));
        all.push_back(make_traversal(TraversalKind::column_major, h, w, rev));
        for (std::size_t win = 1; win <= std::min(h, w); ++win)
          if (h % win == 0 && w % win == 0) all.push_back(make_traversal(TraversalKind::local_window, h, w, rev, win));
      }
      const std::size_t n = h * w, c = 3;
      const Tensor fmap = random_tensor({2, n, c}, rng, -1, 1, false);
      for (const Traversal& t : all) {
        ++r.cases;
        std::vector<std::size_t> sorted = t.order;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < n; ++i) mismatches += sorted[i] != i;
        for (std::size_t i = 0; i < n; ++i) mismatches += t.inverse[t.order[i]] != i;
        const Tensor back = deserialize_patches(serialize_patches(fmap, t), t);
        mismatches += max_abs_diff(back.data(), fmap.data()) != 0.0;
      }
      // cross_merge against a scatter-add in list order.
      std::vector<Tensor> seqs;
      std::vector<double> oracle(2 * n * c, 0.0);
      for (const Traversal& t : all) {
        seqs.push_back(random_tensor({2, n, c}, rng, -1, 1, false));
        const auto s = seqs.back().data();
        for (std::size_t b = 0; b < 2; ++b)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < c; ++k) oracle[(b * n + t.order[i]) * c + k] += s[(b * n + i) * c + k];
      }
      const Tensor merged = cross_merge(seqs, all);
      mismatches += max_abs_diff(merged.data(), oracle) != 0.0;
      ++r.cases;
    }
  r.worst = static_cast<double>(mismatches);
  r.passed = mismatches == 0;
  r.seconds = seconds_since(t0);
  r.detail = std::to_string(r.cases) + " traversal and merge checks on grids up to " + std::to_string(max_side) + "x" +
             std::to_string(max_side) + ", " + std::to_string(mismatches) + " mismatches";
  return r;
}

SuiteResult metric_identity_suite(std::size_t matrices, std::uint64_t seed, double tol) {
  const auto t0 = Clock::now();
  SuiteResult r{"metric identities", true, 0, 0.0, "", 0.0};
  Rng rng(seed);
  for (std::size_t m = 0; m < matrices; ++m) {
    const std::size_t k = 2 + uniform_index(rng, 9);
    const std::size_t n = 1 + uniform_index(rng, 400);
    std::vector<int> truth(n), pred(n);
    const double skill = uniform01(rng);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(uniform_index(rng, k));
      pred[i] = uniform01(rng) < skill ? truth[i] : static_cast<int>(uniform_index(rng, k));
    }
    const MetricsReport rep = weighted_metrics(confusion_matrix(truth, pred, k));
    // Oracle: tallies straight from the label vectors.
    double acc = 0, wp = 0, wr = 0, wf = 0;
    for (std::size_t i = 0; i < n; ++i) acc += truth[i] == pred[i];
    acc /= static_cast<double>(n);
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, pc = 0, ac = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool t = truth[i] == static_cast<int>(c), p = pred[i] == static_cast<int>(c);
        tp += t && p;
        pc += p;
        ac += t;
      }
      const double prec = pc > 0 ? tp / pc : 0.0, rec = ac > 0 ? tp / ac : 0.0;
      const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
      const double w = ac / static_cast<double>(n);
      wp += w * prec;
      wr += w * rec;
      wf += w * f1;
    }
    r.worst = std::max({r.worst, std::abs(rep.weighted_sensitivity - rep.accuracy), std::abs(rep.accuracy - acc),
                        std::abs(rep.weighted_precision - wp), std::abs(rep.weighted_sensitivity - wr),
                        std::abs(rep.weighted_f1 - wf)});
    ++r.cases;
  }
  r.passed = r.worst <= tol;
  r.seconds = seconds_since(t0);
  std::ostringstream d;
  d << r.cases << " random confusion matrices, worst abs err " << std::scientific << std::setprecision(2) << r.worst;
  r.detail = d.str();
  return r;
}

bool run_selftest(std::ostream& out) {
  std::vector<SuiteResult> results;
  results.push_back(scan_equivalence_suite());
  const auto t0 = Clock::now();
  results.push_back(gradient_suite(gradient_items()));
  results.back().seconds = seconds_since(t0);
  results.push_back(traversal_suite());
  results.push_back(metric_identity_suite());
  bool ok = true;
  for (const SuiteResult& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << std::fixed << std::setprecision(1)
        << r.seconds << " s]\n";
    ok = ok && r.passed;
  }
  out << (ok ? "all " : "not all ") << results.size() << " property suites passed\n";
  return ok;
}

}  // namespace ssmcyto

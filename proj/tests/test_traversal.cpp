#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "ssmcyto/error.hpp"
#include "ssmcyto/traversal.hpp"
#include "test_util.hpp"

using namespace ssmcyto;
using testutil::random_tensor;

using Order = std::vector<std::size_t>;

TEST_CASE("traversal examples") {
  CHECK(make_traversal(TraversalKind::row_major, 2, 2).order == Order{0, 1, 2, 3});
  CHECK(make_traversal(TraversalKind::column_major, 2, 2).order == Order{0, 2, 1, 3});
  CHECK(make_traversal(TraversalKind::local_window, 4, 4, false, 2).order ==
        Order{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
  CHECK_THROWS_AS(make_traversal(TraversalKind::local_window, 4, 6, false, 4), ConfigError);
  CHECK_THROWS_AS(make_traversal(TraversalKind::local_window, 4, 4, false, 0), ConfigError);
}

TEST_CASE("serialize examples") {
  Tensor fmap = Tensor::from({4, 1}, {10, 20, 30, 40});
  Tensor same = serialize_patches(fmap, make_traversal(TraversalKind::row_major, 2, 2));
  CHECK(testutil::max_abs_diff(same.data(), fmap.data()) == 0.0);
  Tensor rev = serialize_patches(fmap, make_traversal(TraversalKind::row_major, 2, 2, true));
  CHECK(std::vector<double>(rev.data().begin(), rev.data().end()) == std::vector<double>{40, 30, 20, 10});
  CHECK_THROWS_AS(serialize_patches(Tensor::zeros({5, 1}), make_traversal(TraversalKind::row_major, 2, 2)), ShapeError);
}

TEST_CASE("property: every traversal is a permutation with exact round trip") {
  std::mt19937_64 rng(31);
  for (std::size_t h = 1; h <= 8; ++h) {
    for (std::size_t w = 1; w <= 8; ++w) {
      std::vector<Traversal> all;
      for (bool rev : {false, true}) {
        all.push_back(make_traversal(TraversalKind::row_major, h, w, rev));
        all.push_back(make_traversal(TraversalKind::column_major, h, w, rev));
        for (std::size_t win = 1; win <= std::min(h, w); ++win)
          if (h % win == 0 && w % win == 0) all.push_back(make_traversal(TraversalKind::local_window, h, w, rev, win));
      }
      Tensor fmap = random_tensor({2, h * w, 3}, rng);
      for (const Traversal& t : all) {
        Order sorted = t.order;
        std::sort(sorted.begin(), sorted.end());
        Order expected(h * w);
        std::iota(expected.begin(), expected.end(), 0);
        CHECK(sorted == expected);
        for (std::size_t i = 0; i < t.order.size(); ++i) CHECK(t.inverse[t.order[i]] == i);
        Tensor back = deserialize_patches(serialize_patches(fmap, t), t);
        CHECK(testutil::max_abs_diff(back.data(), fmap.data()) == 0.0);
      }
    }
  }
}

TEST_CASE("SS2D paths are pairwise distinct") {
  for (std::size_t h = 2; h <= 6; ++h)
    for (std::size_t w = 2; w <= 6; ++w) {
      auto paths = ss2d_traversals(h, w);
      for (std::size_t i = 0; i < paths.size(); ++i)
        for (std::size_t j = i + 1; j < paths.size(); ++j) CHECK(paths[i].order != paths[j].order);
    }
}

TEST_CASE("cross_merge") {
  std::mt19937_64 rng(32);
  SUBCASE("single identity traversal") {
    Tensor s = random_tensor({9, 2}, rng);
    Tensor m = cross_merge({s}, {make_traversal(TraversalKind::row_major, 3, 3)});
    CHECK(testutil::max_abs_diff(m.data(), s.data()) == 0.0);
  }
  SUBCASE("four SS2D serializations of one map merge to four times the map") {
    Tensor fmap = random_tensor({12, 3}, rng);
    auto paths = ss2d_traversals(3, 4);
    std::vector<Tensor> seqs;
    for (const auto& t : paths) seqs.push_back(serialize_patches(fmap, t));
    Tensor m = cross_merge(seqs, paths);
    for (std::size_t i = 0; i < fmap.numel(); ++i) CHECK(m.at(i) == doctest::Approx(4.0 * fmap.at(i)));
  }
  SUBCASE("matches an index-by-index scatter-add oracle") {
    auto paths = local_traversals(4, 4, 2);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> seqs;
      for (std::size_t i = 0; i < paths.size(); ++i) seqs.push_back(random_tensor({16, 5}, rng));
      Tensor m = cross_merge(seqs, paths);
      std::vector<double> oracle(16 * 5, 0.0);
      for (std::size_t k = 0; k < seqs.size(); ++k)
        for (std::size_t i = 0; i < 16; ++i)
          for (std::size_t c = 0; c < 5; ++c) oracle[paths[k].order[i] * 5 + c] += seqs[k].at(i * 5 + c);
      CHECK(testutil::max_abs_diff(m.data(), oracle) == 0.0);
    }
  }
  SUBCASE("permuting the sequence list leaves the merge unchanged") {
    auto paths = ss2d_traversals(4, 4);
    std::vector<Tensor> seqs;
    for (std::size_t i = 0; i < paths.size(); ++i) seqs.push_back(random_tensor({16, 2}, rng));
    Tensor base = cross_merge(seqs, paths);
    std::vector<std::size_t> idx{0, 1, 2, 3};
    while (std::next_permutation(idx.begin(), idx.end())) {
      std::vector<Tensor> s;
      std::vector<Traversal> t;
      for (std::size_t i : idx) {
        s.push_back(seqs[i]);
        t.push_back(paths[i]);
      }
      CHECK(testutil::max_abs_diff(cross_merge(s, t).data(), base.data()) < 1e-14);
    }
  }
  SUBCASE("mismatched grids are rejected") {
    CHECK_THROWS_AS(cross_merge({Tensor::zeros({4, 1}), Tensor::zeros({4, 1})},
                                {make_traversal(TraversalKind::row_major, 2, 2),
                                 make_traversal(TraversalKind::row_major, 1, 4)}),
                    ConfigError);
  }
}

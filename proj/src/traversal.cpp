#include "ssmcyto/traversal.hpp"

#include <algorithm>

#include "ssmcyto/error.hpp"
#include "ssmcyto/ops.hpp"

namespace ssmcyto {

Traversal make_traversal(TraversalKind kind, std::size_t height, std::size_t width, bool reverse,
                         std::size_t window) {
  if (height == 0 || width == 0) throw ConfigError("traversal grid must be at least 1x1");
  Traversal t{kind, reverse, window, height, width, {}, {}};
  t.order.reserve(height * width);
  switch (kind) {
    case TraversalKind::row_major:
      for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) t.order.push_back(r * width + c);
      break;
    case TraversalKind::column_major:
      for (std::size_t c = 0; c < width; ++c)
        for (std::size_t r = 0; r < height; ++r) t.order.push_back(r * width + c);
      break;
    case TraversalKind::local_window:
      if (window == 0 || height % window != 0 || width % window != 0) {
        throw ConfigError("local window " + std::to_string(window) + " must divide grid " + std::to_string(height) +
                          "x" + std::to_string(width));
      }
      for (std::size_t wr = 0; wr < height; wr += window)
        for (std::size_t wc = 0; wc < width; wc += window)
          for (std::size_t r = wr; r < wr + window; ++r)
            for (std::size_t c = wc; c < wc + window; ++c) t.order.push_back(r * width + c);
      break;
  }
  if (reverse) std::reverse(t.order.begin(), t.order.end());
  t.inverse.assign(t.order.size(), 0);
  for (std::size_t i = 0; i < t.order.size(); ++i) t.inverse[t.order[i]] = i;
  return t;
}

namespace {

Tensor permute_tokens(const Tensor& x, const std::vector<std::size_t>& index, std::size_t tokens) {
  if (x.rank() == 2) {
    if (x.dim(0) != tokens) throw ShapeError("sequence length " + std::to_string(x.dim(0)) + " does not match grid of " + std::to_string(tokens));
    return reshape(gather_tokens(reshape(x, {1, x.dim(0), x.dim(1)}), index), x.shape());
  }
  if (x.rank() != 3 || x.dim(1) != tokens) {
    throw ShapeError("expected [H·W, C] or [B, H·W, C] with " + std::to_string(tokens) + " tokens, got " +
                     shape_str(x.shape()));
  }
  return gather_tokens(x, index);
}

}  // namespace

Tensor serialize_patches(const Tensor& fmap, const Traversal& t) { return permute_tokens(fmap, t.order, t.order.size()); }

Tensor deserialize_patches(const Tensor& seq, const Traversal& t) { return permute_tokens(seq, t.inverse, t.order.size()); }

Tensor cross_merge(const std::vector<Tensor>& seqs, const std::vector<Traversal>& traversals) {
  if (seqs.empty() || seqs.size() != traversals.size()) {
    throw ConfigError("cross_merge needs one traversal per sequence");
  }
  for (const Traversal& t : traversals) {
    if (t.height != traversals[0].height || t.width != traversals[0].width) {
      throw ConfigError("cross_merge: traversals cover different grids");
    }
  }
  Tensor merged = deserialize_patches(seqs[0], traversals[0]);
  for (std::size_t i = 1; i < seqs.size(); ++i) merged = add(merged, deserialize_patches(seqs[i], traversals[i]));
  return merged;
}

std::vector<Traversal> ss2d_traversals(std::size_t height, std::size_t width) {
  return {make_traversal(TraversalKind::row_major, height, width, false),
          make_traversal(TraversalKind::row_major, height, width, true),
          make_traversal(TraversalKind::column_major, height, width, false),
          make_traversal(TraversalKind::column_major, height, width, true)};
}

std::vector<Traversal> local_traversals(std::size_t height, std::size_t width, std::size_t window) {
  return {make_traversal(TraversalKind::local_window, height, width, false, window),
          make_traversal(TraversalKind::local_window, height, width, true, window),
          make_traversal(TraversalKind::row_major, height, width, false),
          make_traversal(TraversalKind::column_major, height, width, false)};
}

}  // namespace ssmcyto

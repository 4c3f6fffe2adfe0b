#pragma once

#include <cstddef>
#include <vector>

#include "ssmcyto/tensor.hpp"

namespace ssmcyto {

enum class TraversalKind { row_major, column_major, local_window };

// A 1D visiting order over an H×W patch grid. order[i] is the grid index
// (r * W + c) visited at step i; inverse[order[i]] == i.
struct Traversal {
  TraversalKind kind = TraversalKind::row_major;
  bool reverse = false;
  std::size_t window = 0;
  std::size_t height = 0, width = 0;
  std::vector<std::size_t> order;
  std::vector<std::size_t> inverse;
};

Traversal make_traversal(TraversalKind kind, std::size_t height, std::size_t width, bool reverse = false,
                         std::size_t window = 0);

// fmap: [H·W, C] or [B, H·W, C]; output[i] = fmap[order[i]].
Tensor serialize_patches(const Tensor& fmap, const Traversal& t);
// Undoes serialize_patches: output[order[i]] = seq[i].
Tensor deserialize_patches(const Tensor& seq, const Traversal& t);

// De-serializes each sequence with its traversal and sums the maps in list order.
Tensor cross_merge(const std::vector<Tensor>& seqs, const std::vector<Traversal>& traversals);

// {row fwd, row rev, column fwd, column rev}.
std::vector<Traversal> ss2d_traversals(std::size_t height, std::size_t width);
// {local window fwd, local window rev, row fwd, column fwd}.
std::vector<Traversal> local_traversals(std::size_t height, std::size_t width, std::size_t window);

}  // namespace ssmcyto

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ssmcyto/ops.hpp"
#include "ssmcyto/params.hpp"
#include "ssmcyto/ssm.hpp"
#include "ssmcyto/traversal.hpp"

namespace ssmcyto {

enum class BlockVariant { vanilla, vim, vmamba_ss2d, mambavision, medmamba, localmamba };

// The five variants the ensemble combines, in ensemble order.
inline constexpr std::array<BlockVariant, 5> kEnsembleVariants{BlockVariant::vim, BlockVariant::vmamba_ss2d,
                                                               BlockVariant::mambavision, BlockVariant::medmamba,
                                                               BlockVariant::localmamba};

std::string to_string(BlockVariant v);
BlockVariant parse_variant(const std::string& name);

enum class SeqConv { causal, standard };

struct BlockConfig {
  BlockVariant variant = BlockVariant::vanilla;
  std::size_t d_model = 32;
  std::size_t n_state = 8;
  std::size_t expand = 2;  // d_inner = expand * d_model
  std::size_t conv_kernel = 3;
  SeqConv conv_mode = SeqConv::causal;
  std::size_t groups = 2;  // medmamba grouped-conv branch
  std::size_t window = 2;  // localmamba local scan window
};

// Fills the variant-implied conv mode.
BlockConfig make_block_config(BlockVariant variant, std::size_t d_model);
void validate(const BlockConfig& cfg);

struct Grid {
  std::size_t height = 1, width = 1;
  std::size_t tokens() const { return height * width; }
};

// out[..., j] = x[..., (j % g) * (C / g) + j / g]
std::vector<std::size_t> channel_shuffle_permutation(std::size_t channels, std::size_t groups);
Tensor channel_shuffle(const Tensor& x, std::size_t groups);

// Spatial branch: token mean -> linear -> sigmoid, one gate per channel shared
// by all tokens. Channel branch: per-token linear -> sigmoid. Output is
// x ⊙ spatial ⊙ channel.
struct DualBranchAttention {
  Linear spatial;
  Linear channel;
  Tensor operator()(const Tensor& x) const;
};

DualBranchAttention make_dual_branch_attention(ParamStore& store, const std::string& name, std::size_t channels,
                                               Rng& rng);

// One residual block x + f(LN(x)) on [B, H·W, C] token maps.
class MambaBlock {
 public:
  MambaBlock(const BlockConfig& cfg, ParamStore& store, const std::string& name, Rng& rng);

  Tensor forward(const Tensor& x, Grid grid, ScanImpl impl = ScanImpl::parallel) const;

  // vim only: the forward-order and (re-reversed) reverse-order branch outputs
  // before averaging and gating.
  struct Branches {
    Tensor forward, reverse;
  };
  Branches vim_branches(const Tensor& x, ScanImpl impl = ScanImpl::parallel) const;

  const BlockConfig& config() const { return cfg_; }

 private:
  // Depthwise conv + bias + SiLU + S6 over one serialization.
  struct ConvSsm {
    Tensor conv_w, conv_b;
    S6Layer ssm;
  };
  // Input projections, 2D depthwise conv and one S6 per traversal.
  struct Scan2D {
    Linear in_x, in_z;
    Tensor conv_w, conv_b;
    std::vector<S6Layer> ssms;
    LayerNorm out_norm;
    Linear out;
  };

  ConvSsm make_conv_ssm(ParamStore& store, const std::string& name, std::size_t d_inner, Rng& rng) const;
  Scan2D make_scan2d(ParamStore& store, const std::string& name, std::size_t d_model, Rng& rng) const;
  Branches vim_from_projected(const Tensor& xm, ScanImpl impl) const;
  Tensor seq_branch(const ConvSsm& branch, const Tensor& xm, ConvMode mode, ScanImpl impl) const;
  Tensor scan2d_forward(const Scan2D& s, const Tensor& u, Grid grid, const std::vector<Traversal>& paths,
                        ScanImpl impl, bool attention) const;

  BlockConfig cfg_;
  LayerNorm norm_;
  Linear in_x_, in_z_, out_;
  std::vector<ConvSsm> branches_;  // vanilla/mambavision: 1, vim: 2 (fwd, rev)
  Tensor gate_conv_w_, gate_conv_b_;  // mambavision secondary-path conv
  std::optional<Scan2D> scan2d_;      // vmamba_ss2d, localmamba, medmamba half A
  Tensor group_conv_w_, group_conv_b_;  // medmamba half B
  std::optional<DualBranchAttention> attention_;
};

}  // namespace ssmcyto

#include "ssmcyto/blocks.hpp"

#include <cmath>
#include <numeric>

#include "ssmcyto/error.hpp"

namespace ssmcyto {

namespace {

struct VariantName {
  BlockVariant variant;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {BlockVariant::vanilla, "vanilla"},         {BlockVariant::vim, "vim"},
    {BlockVariant::vmamba_ss2d, "vmamba_ss2d"}, {BlockVariant::mambavision, "mambavision"},
    {BlockVariant::medmamba, "medmamba"},       {BlockVariant::localmamba, "localmamba"},
};

bool is_2d(BlockVariant v) {
  return v == BlockVariant::vmamba_ss2d || v == BlockVariant::medmamba || v == BlockVariant::localmamba;
}

// Accepts [L, C] or [B, L, C]; returns the batched view.
Tensor as_batched(const Tensor& x, std::size_t channels) {
  if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  if (x.rank() != 3) throw ShapeError("block: input must be [L, C] or [B, L, C], got " + shape_str(x.shape()));
  if (x.dim(2) != channels) {
    throw ShapeError("block: expected " + std::to_string(channels) + " channels, got " + shape_str(x.shape()));
  }
  return x;
}

std::vector<std::size_t> reversed_order(std::size_t len) {
  std::vector<std::size_t> idx(len);
  std::iota(idx.rbegin(), idx.rend(), 0);
  return idx;
}

}  // namespace

std::string to_string(BlockVariant v) {
  for (const auto& e : kVariantNames)
    if (e.variant == v) return e.name;
  throw ConfigError("unknown block variant");
}

BlockVariant parse_variant(const std::string& name) {
  for (const auto& e : kVariantNames)
    if (name == e.name) return e.variant;
  throw ConfigError("unknown block variant '" + name + "'");
}

BlockConfig make_block_config(BlockVariant variant, std::size_t d_model) {
  BlockConfig cfg;
  cfg.variant = variant;
  cfg.d_model = d_model;
  cfg.conv_mode = (variant == BlockVariant::vanilla || variant == BlockVariant::vim) ? SeqConv::causal
                                                                                      : SeqConv::standard;
  return cfg;
}

void validate(const BlockConfig& cfg) {
  if (cfg.d_model == 0 || cfg.n_state == 0 || cfg.expand == 0) {
    throw ConfigError("block: d_model, n_state and expand must be positive");
  }
  if (cfg.conv_kernel == 0) throw ConfigError("block: conv_kernel must be positive");
  const bool causal_variant = cfg.variant == BlockVariant::vanilla || cfg.variant == BlockVariant::vim;
  if (causal_variant && cfg.conv_mode != SeqConv::causal) {
    throw ConfigError("block: " + to_string(cfg.variant) + " requires causal conv_mode");
  }
  if (cfg.variant == BlockVariant::mambavision && cfg.conv_mode != SeqConv::standard) {
    throw ConfigError("block: mambavision requires standard conv_mode");
  }
  const bool symmetric_conv = cfg.variant != BlockVariant::vanilla && cfg.variant != BlockVariant::vim;
  if (symmetric_conv && cfg.conv_kernel % 2 == 0) {
    throw ConfigError("block: " + to_string(cfg.variant) + " needs an odd conv_kernel");
  }
  if (cfg.variant == BlockVariant::medmamba) {
    if (cfg.d_model % 2 != 0) throw ConfigError("block: medmamba needs an even d_model");
    if (cfg.groups == 0 || (cfg.d_model / 2) % cfg.groups != 0) {
      throw ConfigError("block: medmamba groups must divide d_model / 2");
    }
  }
  if (cfg.variant == BlockVariant::localmamba && cfg.window == 0) {
    throw ConfigError("block: localmamba window must be positive");
  }
}

std::vector<std::size_t> channel_shuffle_permutation(std::size_t channels, std::size_t groups) {
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("channel_shuffle: groups " + std::to_string(groups) + " does not divide " +
                      std::to_string(channels) + " channels");
  }
  const std::size_t per = channels / groups;
  std::vector<std::size_t> perm(channels);
  for (std::size_t j = 0; j < channels; ++j) perm[j] = (j % groups) * per + j / groups;
  return perm;
}

Tensor channel_shuffle(const Tensor& x, std::size_t groups) {
  if (x.rank() == 0) throw ShapeError("channel_shuffle: input needs a channel axis");
  const auto perm = channel_shuffle_permutation(x.dim(x.rank() - 1), groups);
  return permute_last(x, perm);
}

Tensor DualBranchAttention::operator()(const Tensor& x) const {
  const Tensor xb = x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  const std::size_t batch = xb.dim(0), channels = xb.dim(2);
  Tensor spatial_gate = reshape(sigmoid(spatial(mean_tokens(xb))), {batch, 1, channels});
  Tensor channel_gate = sigmoid(channel(xb));
  Tensor out = mul(mul(xb, spatial_gate), channel_gate);
  return x.rank() == 2 ? reshape(out, x.shape()) : out;
}

DualBranchAttention make_dual_branch_attention(ParamStore& store, const std::string& name, std::size_t channels,
                                               Rng& rng) {
  DualBranchAttention a;
  a.spatial = make_linear(store, name + ".spatial", channels, channels, true, rng);
  a.channel = make_linear(store, name + ".channel", channels, channels, true, rng);
  return a;
}

MambaBlock::ConvSsm MambaBlock::make_conv_ssm(ParamStore& store, const std::string& name, std::size_t d_inner,
                                              Rng& rng) const {
  const std::size_t k = cfg_.conv_kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(k));
  ConvSsm b;
  b.conv_w = store.uniform(name + ".conv.weight", {d_inner, 1, k}, bound, rng, true);
  b.conv_b = store.uniform(name + ".conv.bias", {d_inner}, bound, rng, false);
  b.ssm = make_s6(store, name + ".s6", d_inner, cfg_.n_state, rng);
  return b;
}

MambaBlock::Scan2D MambaBlock::make_scan2d(ParamStore& store, const std::string& name, std::size_t d_model,
                                           Rng& rng) const {
  const std::size_t d_inner = cfg_.expand * d_model, k = cfg_.conv_kernel;
  const double bound = 1.0 / static_cast<double>(k);
  Scan2D s;
  s.in_x = make_linear(store, name + ".in_x", d_model, d_inner, true, rng);
  s.in_z = make_linear(store, name + ".in_z", d_model, d_inner, true, rng);
  s.conv_w = store.uniform(name + ".conv.weight", {d_inner, 1, k, k}, bound, rng, true);
  s.conv_b = store.uniform(name + ".conv.bias", {d_inner}, bound, rng, false);
  for (std::size_t i = 0; i < 4; ++i) {
    s.ssms.push_back(make_s6(store, name + ".s6_" + std::to_string(i), d_inner, cfg_.n_state, rng));
  }
  if (cfg_.variant != BlockVariant::localmamba) s.out_norm = make_layer_norm(store, name + ".out_norm", d_inner);
  s.out = make_linear(store, name + ".out", d_inner, d_model, true, rng);
  return s;
}

MambaBlock::MambaBlock(const BlockConfig& cfg, ParamStore& store, const std::string& name, Rng& rng) : cfg_(cfg) {
  validate(cfg_);
  const std::size_t c = cfg_.d_model, d_inner = cfg_.expand * c;
  norm_ = make_layer_norm(store, name + ".norm", c);
  switch (cfg_.variant) {
    case BlockVariant::vanilla:
    case BlockVariant::vim:
    case BlockVariant::mambavision: {
      in_x_ = make_linear(store, name + ".in_x", c, d_inner, true, rng);
      in_z_ = make_linear(store, name + ".in_z", c, d_inner, true, rng);
      branches_.push_back(make_conv_ssm(store, name + ".fwd", d_inner, rng));
      if (cfg_.variant == BlockVariant::vim) branches_.push_back(make_conv_ssm(store, name + ".rev", d_inner, rng));
      if (cfg_.variant == BlockVariant::mambavision) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.conv_kernel));
        gate_conv_w_ = store.uniform(name + ".gate_conv.weight", {d_inner, 1, cfg_.conv_kernel}, bound, rng, true);
        gate_conv_b_ = store.uniform(name + ".gate_conv.bias", {d_inner}, bound, rng, false);
      }
      out_ = make_linear(store, name + ".out", d_inner, c, true, rng);
      break;
    }
    case BlockVariant::vmamba_ss2d:
    case BlockVariant::localmamba:
      scan2d_ = make_scan2d(store, name + ".ss2d", c, rng);
      if (cfg_.variant == BlockVariant::localmamba) {
        attention_ = make_dual_branch_attention(store, name + ".attn", d_inner, rng);
      }
      break;
    case BlockVariant::medmamba: {
      const std::size_t half = c / 2, k = cfg_.conv_kernel;
      scan2d_ = make_scan2d(store, name + ".ss2d", half, rng);
      const double bound = 1.0 / std::sqrt(static_cast<double>(half / cfg_.groups * k * k));
      group_conv_w_ = store.uniform(name + ".group_conv.weight", {half, half / cfg_.groups, k, k}, bound, rng, true);
      group_conv_b_ = store.uniform(name + ".group_conv.bias", {half}, bound, rng, false);
      out_ = make_linear(store, name + ".out", c, c, true, rng);
      break;
    }
  }
}

Tensor MambaBlock::seq_branch(const ConvSsm& branch, const Tensor& xm, ConvMode mode, ScanImpl impl) const {
  ConvOptions opts;
  opts.mode = mode;
  opts.groups = xm.dim(2);
  Tensor conv = add(convolve(xm, branch.conv_w, opts), branch.conv_b);
  return branch.ssm.forward(silu(conv), impl);
}

Tensor MambaBlock::scan2d_forward(const Scan2D& s, const Tensor& u, Grid grid, const std::vector<Traversal>& paths,
                                  ScanImpl impl, bool attention) const {
  ConvOptions opts;
  opts.mode = ConvMode::grouped2d;
  opts.groups = cfg_.expand * u.dim(2);
  opts.height = grid.height;
  opts.width = grid.width;
  Tensor xm = s.in_x(u);
  Tensor z = s.in_z(u);
  Tensor xc = silu(add(convolve(xm, s.conv_w, opts), s.conv_b));
  std::vector<Tensor> seqs;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    seqs.push_back(s.ssms[i].forward(serialize_patches(xc, paths[i]), impl));
  }
  Tensor merged = cross_merge(seqs, paths);
  merged = attention ? (*attention_)(merged) : s.out_norm(merged);
  return s.out(mul(merged, silu(z)));
}

Tensor MambaBlock::forward(const Tensor& x_in, Grid grid, ScanImpl impl) const {
  const Tensor x = as_batched(x_in, cfg_.d_model);
  const std::size_t len = x.dim(1);
  if (is_2d(cfg_.variant) && grid.tokens() != len) {
    throw ShapeError("block: grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                     " does not match " + std::to_string(len) + " tokens");
  }
  const Tensor u = norm_(x);
  Tensor y;
  switch (cfg_.variant) {
    case BlockVariant::vanilla: {
      Tensor main = seq_branch(branches_[0], in_x_(u), ConvMode::causal1d, impl);
      y = out_(mul(main, silu(in_z_(u))));
      break;
    }
    case BlockVariant::vim: {
      Branches b = vim_from_projected(in_x_(u), impl);
      Tensor main = scale(add(b.forward, b.reverse), 0.5);
      y = out_(mul(main, silu(in_z_(u))));
      break;
    }
    case BlockVariant::mambavision: {
      Tensor main = seq_branch(branches_[0], in_x_(u), ConvMode::depthwise1d, impl);
      ConvOptions opts;
      opts.mode = ConvMode::depthwise1d;
      Tensor gate = silu(add(convolve(in_z_(u), gate_conv_w_, opts), gate_conv_b_));
      y = out_(mul(main, gate));
      break;
    }
    case BlockVariant::vmamba_ss2d:
      y = scan2d_forward(*scan2d_, u, grid, ss2d_traversals(grid.height, grid.width), impl, false);
      break;
    case BlockVariant::localmamba:
      y = scan2d_forward(*scan2d_, u, grid, local_traversals(grid.height, grid.width, cfg_.window), impl, true);
      break;
    case BlockVariant::medmamba: {
      const std::size_t half = cfg_.d_model / 2;
      Tensor a = scan2d_forward(*scan2d_, slice_last(u, 0, half), grid, ss2d_traversals(grid.height, grid.width),
                                impl, false);
      ConvOptions opts;
      opts.mode = ConvMode::grouped2d;
      opts.groups = cfg_.groups;
      opts.height = grid.height;
      opts.width = grid.width;
      Tensor b = silu(add(convolve(slice_last(u, half, cfg_.d_model), group_conv_w_, opts), group_conv_b_));
      y = out_(channel_shuffle(concat_last({a, b}), 2));
      break;
    }
  }
  Tensor out = add(x, y);
  return x_in.rank() == 2 ? reshape(out, x_in.shape()) : out;
}

MambaBlock::Branches MambaBlock::vim_branches(const Tensor& x_in, ScanImpl impl) const {
  if (cfg_.variant != BlockVariant::vim) throw ConfigError("vim_branches: block is " + to_string(cfg_.variant));
  return vim_from_projected(in_x_(norm_(as_batched(x_in, cfg_.d_model))), impl);
}

MambaBlock::Branches MambaBlock::vim_from_projected(const Tensor& xm, ScanImpl impl) const {
  const auto rev = reversed_order(xm.dim(1));
  Branches b;
  b.forward = seq_branch(branches_[0], xm, ConvMode::causal1d, impl);
  b.reverse = gather_tokens(seq_branch(branches_[1], gather_tokens(xm, rev), ConvMode::causal1d, impl), rev);
  return b;
}

}  // namespace ssmcyto

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmcyto/random.hpp"
#include "ssmcyto/tensor.hpp"

namespace ssmcyto {

struct Param {
  std::string name;
  Tensor value;
  bool decay = false;  // AdamW decoupled weight decay applies to weight matrices only
};

// Ordered registry of trainable leaves. Registration order fixes both the
// initialization RNG stream and the checkpoint record order.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values, bool decay);
  Tensor uniform(const std::string& name, Shape shape, double bound, Rng& rng, bool decay);
  Tensor constant(const std::string& name, Shape shape, double value);

  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  const Param* find(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;

  void zero_grad();
  // FNV-1a over names and raw parameter bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<Param> params_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
  Tensor operator()(const Tensor& x) const;
};

// Weights and biases uniform in ±1/sqrt(in).
Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng);

struct LayerNorm {
  Tensor gamma, beta;
  Tensor operator()(const Tensor& x) const;
};

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, std::size_t width);

}  // namespace ssmcyto

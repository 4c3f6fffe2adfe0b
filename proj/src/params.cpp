#include "ssmcyto/params.hpp"

#include <cmath>
#include <cstring>

#include "ssmcyto/error.hpp"
#include "ssmcyto/ops.hpp"

namespace ssmcyto {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values, bool decay) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  params_.push_back({name, t, decay});
  return t;
}

Tensor ParamStore::uniform(const std::string& name, Shape shape, double bound, Rng& rng, bool decay) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = ssmcyto::uniform(rng, -bound, bound);
  return add(name, std::move(shape), std::move(v), decay);
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return add(name, std::move(shape), std::move(v), false);
}

const Param* ParamStore::find(const std::string& name) const {
  for (const Param& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const Param& p : params_) n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (Param& p : params_) p.value.zero_grad();
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Param& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data().data(), p.value.numel() * sizeof(double));
  }
  return h;
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = store.uniform(name + ".weight", {in, out}, bound, rng, true);
  if (bias) l.bias = store.uniform(name + ".bias", {out}, bound, rng, false);
  return l;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, std::size_t width) {
  return {store.constant(name + ".gamma", {width}, 1.0), store.constant(name + ".beta", {width}, 0.0)};
}

}  // namespace ssmcyto

#include "ssmcyto/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssmcyto/error.hpp"
#include "ssmcyto/kernels.hpp"

namespace ssmcyto {

using detail::make_result;
using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
}

// Maps an output flat index to an operand flat index under broadcasting.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& operand, const Shape& out) {
    const std::size_t n = shape_numel(operand);
    const std::size_t total = shape_numel(out);
    if (operand == out) {
      kind_ = Kind::same;
    } else if (n == 1) {
      kind_ = Kind::scalar;
    } else if (operand.size() <= out.size() &&
               std::equal(operand.begin(), operand.end(), out.end() - static_cast<std::ptrdiff_t>(operand.size()))) {
      kind_ = Kind::suffix;
      modulus_ = n;
    } else {
      kind_ = Kind::general;
      map_.resize(total);
      const std::size_t rank = out.size();
      const std::size_t offset = rank - operand.size();
      std::vector<std::size_t> stride(rank, 0);
      std::size_t s = 1;
      for (std::size_t i = operand.size(); i-- > 0;) {
        stride[i + offset] = operand[i] == 1 ? 0 : s;
        s *= operand[i];
      }
      std::vector<std::size_t> coord(rank, 0);
      std::size_t pos = 0;
      for (std::size_t i = 0; i < total; ++i) {
        map_[i] = pos;
        for (std::size_t axis = rank; axis-- > 0;) {
          ++coord[axis];
          pos += stride[axis];
          if (coord[axis] < out[axis]) break;
          pos -= stride[axis] * coord[axis];
          coord[axis] = 0;
        }
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::same: return i;
      case Kind::scalar: return 0;
      case Kind::suffix: return i % modulus_;
      case Kind::general: return map_[i];
    }
    return i;
  }

 private:
  enum class Kind { same, scalar, suffix, general };
  Kind kind_ = Kind::same;
  std::size_t modulus_ = 1;
  std::vector<std::size_t> map_;
};

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

enum class Binary { add, sub, mul };

Tensor binary_op(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto ia = std::make_shared<BroadcastIndex>(a.shape(), out_shape);
  auto ib = std::make_shared<BroadcastIndex>(b.shape(), out_shape);
  const std::size_t total = shape_numel(out_shape);
  std::vector<double> out(total);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < total; ++i) {
    const double x = ad[(*ia)(i)];
    const double y = bd[(*ib)(i)];
    out[i] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
  }
  return make_result(std::move(out_shape), std::move(out), {a, b}, [a, b, ia, ib, kind](Node& self) {
    const auto& g = self.grad;
    if (a.requires_grad()) {
      auto& ga = a.node()->ensure_grad();
      auto bd = b.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[(*ia)(i)] += kind == Binary::mul ? g[i] * bd[(*ib)(i)] : g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->ensure_grad();
      auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = kind == Binary::mul ? g[i] * ad[(*ia)(i)] : kind == Binary::sub ? -g[i] : g[i];
        gb[(*ib)(i)] += v;
      }
    }
  });
}

// Elementwise unary op with derivative expressed through input and output.
template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto result_values = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {x}, [x, result_values, deriv](Node& self) {
    auto& gx = x.node()->ensure_grad();
    auto xd = x.data();
    const auto& y = *result_values;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xd[i], y[i]);
  });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary_op(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        const double s = stable_sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor sum(const Tensor& x) {
  auto xd = x.data();
  double total = 0.0;
  for (double v : xd) total += v;
  return make_result({1}, {total}, {x}, [x](Node& self) {
    auto& gx = x.node()->ensure_grad();
    for (double& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_tokens(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("mean_tokens expects [B, L, C], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), ch = x.dim(2);
  auto xd = x.data();
  std::vector<double> out(batch * ch, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] += xd[(b * len + t) * ch + c];
  const double inv = 1.0 / static_cast<double>(len);
  for (double& v : out) v *= inv;
  return make_result({batch, ch}, std::move(out), {x}, [x, batch, len, ch, inv](Node& self) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < ch; ++c) gx[(b * len + t) * ch + c] += self.grad[b * ch + c] * inv;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) + " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](Node& self) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.rank() < 1 || last_dim(a) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n);
  kernels::parallel::gemm({false, false, m, n, k, false}, a.data(), b.data(), out);
  return make_result(std::move(out_shape), std::move(out), {a, b}, [a, b, m, n, k](Node& self) {
    if (a.requires_grad()) {
      auto& ga = a.node()->ensure_grad();
      kernels::parallel::gemm({false, true, m, k, n, true}, self.grad, b.data(), ga);
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->ensure_grad();
      kernels::parallel::gemm({true, false, k, n, m, true}, a.data(), self.grad, gb);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last needs at least one tensor");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total_width = 0;
  for (const Tensor& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) throw ShapeError("concat_last: leading shape mismatch " + shape_str(p.shape()));
    widths.push_back(last_dim(p));
    total_width += last_dim(p);
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total_width);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto pd = parts[pi].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(r * widths[pi]), widths[pi],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total_width + offset));
    offset += widths[pi];
  }
  Shape out_shape = lead;
  out_shape.push_back(total_width);
  return make_result(std::move(out_shape), std::move(out), parts, [parts, widths, rows, total_width](Node& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      if (parts[pi].requires_grad()) {
        auto& gp = parts[pi].node()->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[pi]; ++c) gp[r * widths[pi] + c] += self.grad[r * total_width + off + c];
      }
      off += widths[pi];
    }
  });
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t width = last_dim(x);
  if (begin >= end || end > width) {
    throw ShapeError("slice_last [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width, w = end - begin;
  auto xd = x.data();
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xd[r * width + begin + c];
  Shape out_shape = x.shape();
  out_shape.back() = w;
  return make_result(std::move(out_shape), std::move(out), {x}, [x, rows, w, width, begin](Node& self) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) gx[r * width + begin + c] += self.grad[r * w + c];
  });
}

Tensor permute_last(const Tensor& x, std::span<const std::size_t> perm) {
  const std::size_t width = last_dim(x);
  if (perm.size() != width) throw ShapeError("permute_last: permutation length differs from last axis");
  for (std::size_t p : perm)
    if (p >= width) throw ShapeError("permute_last: index out of range");
  std::vector<std::size_t> idx(perm.begin(), perm.end());
  const std::size_t rows = x.numel() / width;
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = xd[r * width + idx[j]];
  return make_result(x.shape(), std::move(out), {x}, [x, idx, rows, width](Node& self) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < width; ++j) gx[r * width + idx[j]] += self.grad[r * width + j];
  });
}

Tensor gather_tokens(const Tensor& x, std::span<const std::size_t> index) {
  if (x.rank() != 3) throw ShapeError("gather_tokens expects [B, L, C], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), ch = x.dim(2);
  for (std::size_t i : index)
    if (i >= len) throw ShapeError("gather_tokens: token index " + std::to_string(i) + " out of range");
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::size_t out_len = idx.size();
  auto xd = x.data();
  std::vector<double> out(batch * out_len * ch);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < out_len; ++i)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((b * len + idx[i]) * ch), ch,
                  out.begin() + static_cast<std::ptrdiff_t>((b * out_len + i) * ch));
  return make_result({batch, out_len, ch}, std::move(out), {x}, [x, idx, batch, len, ch](Node& self) {
    auto& gx = x.node()->ensure_grad();
    const std::size_t out_len = idx.size();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < out_len; ++i)
        for (std::size_t c = 0; c < ch; ++c) gx[(b * len + idx[i]) * ch + c] += self.grad[(b * out_len + i) * ch + c];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t ch = last_dim(x);
  if (gamma.numel() != ch || beta.numel() != ch) {
    throw ShapeError("layer_norm: affine parameters must have " + std::to_string(ch) + " entries");
  }
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / ch;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * ch;
    double mu = 0.0;
    for (std::size_t c = 0; c < ch; ++c) mu += row[c];
    mu /= static_cast<double>(ch);
    double var = 0.0;
    for (std::size_t c = 0; c < ch; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(ch);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t c = 0; c < ch; ++c) {
      const double h = (row[c] - mu) * inv;
      (*xhat)[r * ch + c] = h;
      out[r * ch + c] = h * gd[c] + bd[c];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, rows, ch](Node& self) {
    const auto& g = self.grad;
    const auto& h = *xhat;
    if (gamma.requires_grad()) {
      auto& gg = gamma.node()->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ch; ++c) gg[c] += g[r * ch + c] * h[r * ch + c];
    }
    if (beta.requires_grad()) {
      auto& gb = beta.node()->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ch; ++c) gb[c] += g[r * ch + c];
    }
    if (x.requires_grad()) {
      auto& gx = x.node()->ensure_grad();
      auto gd = gamma.data();
      const double inv_ch = 1.0 / static_cast<double>(ch);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t c = 0; c < ch; ++c) {
          const double dh = g[r * ch + c] * gd[c];
          mean_dh += dh;
          mean_dh_h += dh * h[r * ch + c];
        }
        mean_dh *= inv_ch;
        mean_dh_h *= inv_ch;
        for (std::size_t c = 0; c < ch; ++c) {
          const double dh = g[r * ch + c] * gd[c];
          gx[r * ch + c] += (*rstd)[r] * (dh - mean_dh - h[r * ch + c] * mean_dh_h);
        }
      }
    }
  });
}

namespace {

void softmax_rows(std::span<const double> x, std::size_t width, std::vector<double>& out) {
  const std::size_t rows = x.size() / width;
  out.resize(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * width;
    const double mx = *std::max_element(row, row + width);
    double z = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      out[r * width + c] = std::exp(row[c] - mx);
      z += out[r * width + c];
    }
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] /= z;
  }
}

}  // namespace

Tensor softmax(const Tensor& x) {
  const std::size_t width = last_dim(x);
  std::vector<double> out;
  softmax_rows(x.data(), width, out);
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {x}, [x, y, width](Node& self) {
    auto& gx = x.node()->ensure_grad();
    const std::size_t rows = gx.size() / width;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < width; ++c) dot += self.grad[r * width + c] * (*y)[r * width + c];
      for (std::size_t c = 0; c < width; ++c)
        gx[r * width + c] += (*y)[r * width + c] * (self.grad[r * width + c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t width = last_dim(x);
  auto p = std::make_shared<std::vector<double>>();
  softmax_rows(x.data(), width, *p);
  const std::size_t rows = x.numel() / width;
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * width;
    const double mx = *std::max_element(row, row + width);
    double z = 0.0;
    for (std::size_t c = 0; c < width; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = row[c] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, p, width, rows](Node& self) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < width; ++c) total += self.grad[r * width + c];
      for (std::size_t c = 0; c < width; ++c)
        gx[r * width + c] += self.grad[r * width + c] - (*p)[r * width + c] * total;
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> class_weights) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects logits [B, K], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy: label count differs from batch size");
  if (!class_weights.empty() && class_weights.size() != classes) {
    throw ShapeError("cross_entropy: class weight count differs from class count");
  }
  std::vector<double> sample_w(batch, 1.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    if (!class_weights.empty()) sample_w[b] = class_weights[static_cast<std::size_t>(labels[b])];
  }
  const double total_w = std::accumulate(sample_w.begin(), sample_w.end(), 0.0);
  auto p = std::make_shared<std::vector<double>>();
  softmax_rows(logits.data(), classes, *p);
  auto ld = logits.data();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = ld.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double nll = -(row[labels[b]] - mx - std::log(z));
    loss += sample_w[b] * nll;
  }
  loss /= total_w;
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result({1}, {loss}, {logits}, [logits, p, lab, sample_w, total_w, classes](Node& self) {
    auto& gl = logits.node()->ensure_grad();
    for (std::size_t b = 0; b < lab.size(); ++b) {
      const double coef = self.grad[0] * sample_w[b] / total_w;
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = static_cast<int>(c) == lab[b] ? 1.0 : 0.0;
        gl[b * classes + c] += coef * ((*p)[b * classes + c] - onehot);
      }
    }
  });
}

Tensor convolve(const Tensor& x, const Tensor& weight, const ConvOptions& options) {
  if (x.rank() != 3) throw ShapeError("convolve expects x [B, L, C], got " + shape_str(x.shape()));
  const bool two_d = options.mode == ConvMode::standard2d || options.mode == ConvMode::grouped2d;
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(2);
  g.groups = options.mode == ConvMode::depthwise1d ? g.in_channels
             : options.mode == ConvMode::standard2d ? 1
                                                    : options.groups;
  if (g.groups == 0 || g.in_channels % g.groups != 0) {
    throw ConfigError("convolve: groups " + std::to_string(g.groups) + " does not divide " +
                      std::to_string(g.in_channels) + " input channels");
  }
  if (weight.rank() != (two_d ? 4u : 3u)) {
    throw ShapeError("convolve: weight " + shape_str(weight.shape()) + " has wrong rank for the mode");
  }
  g.out_channels = weight.dim(0);
  if (g.out_channels % g.groups != 0) {
    throw ConfigError("convolve: groups " + std::to_string(g.groups) + " does not divide " +
                      std::to_string(g.out_channels) + " output channels");
  }
  if (weight.dim(1) != g.in_channels / g.groups) {
    throw ShapeError("convolve: weight " + shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)) +
                     " channels per group, input provides " + std::to_string(g.in_channels / g.groups));
  }
  const std::size_t k = weight.dim(2);
  if (two_d) {
    if (weight.dim(3) != k) throw ShapeError("convolve: 2D kernels must be square");
    if (options.height * options.width != x.dim(1)) {
      throw ShapeError("convolve: grid " + std::to_string(options.height) + "x" + std::to_string(options.width) +
                       " does not match " + std::to_string(x.dim(1)) + " tokens");
    }
    g.height = options.height;
    g.width = options.width;
    g.kernel_h = g.kernel_w = k;
  } else {
    g.height = 1;
    g.width = x.dim(1);
    g.kernel_h = 1;
    g.kernel_w = k;
  }
  if (options.mode == ConvMode::causal1d) {
    g.pad_left = k - 1;
  } else {
    if (k % 2 == 0) throw ConfigError("convolve: symmetric padding needs an odd kernel, got " + std::to_string(k));
    g.pad_left = (k - 1) / 2;
    g.pad_top = two_d ? (k - 1) / 2 : 0;
  }
  std::vector<double> out(g.batch * x.dim(1) * g.out_channels);
  kernels::parallel::conv_forward(g, x.data(), weight.data(), out);
  return make_result({g.batch, x.dim(1), g.out_channels}, std::move(out), {x, weight}, [x, weight, g](Node& self) {
    if (x.requires_grad()) kernels::parallel::conv_backward_input(g, self.grad, weight.data(), x.node()->ensure_grad());
    if (weight.requires_grad())
      kernels::parallel::conv_backward_weight(g, self.grad, x.data(), weight.node()->ensure_grad());
  });
}

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                      const Tensor& skip, ScanImpl impl) {
  if (x.rank() != 3) throw ShapeError("selective_scan expects x [B, L, D], got " + shape_str(x.shape()));
  kernels::ScanGeometry g{x.dim(0), x.dim(1), x.dim(2), A.rank() == 2 ? A.dim(1) : 0};
  require_same_shape(x, delta, "selective_scan(delta)");
  if (A.shape() != Shape{g.dim, g.state}) throw ShapeError("selective_scan: A must be [D, N], got " + shape_str(A.shape()));
  if (B.shape() != Shape{g.batch, g.len, g.state} || C.shape() != B.shape()) {
    throw ShapeError("selective_scan: B and C must be [B, L, N], got " + shape_str(B.shape()) + " and " +
                     shape_str(C.shape()));
  }
  if (skip.numel() != g.dim) throw ShapeError("selective_scan: skip must have D entries");
  auto states = std::make_shared<std::vector<double>>(g.batch * g.dim * g.state * g.len);
  std::vector<double> y(x.numel());
  kernels::ScanInputs in{x.data(), delta.data(), A.data(), B.data(), C.data(), skip.data(), {}};
  if (impl == ScanImpl::parallel) {
    kernels::parallel::selective_scan(g, in, y, *states, {});
  } else {
    kernels::serial::selective_scan(g, in, y, *states, {});
  }
  return make_result(x.shape(), std::move(y), {x, delta, A, B, C, skip},
                     [x, delta, A, B, C, skip, states, g](Node& self) {
                       kernels::ScanInputs in{x.data(), delta.data(), A.data(), B.data(), C.data(), skip.data(), {}};
                       auto grad_of = [](const Tensor& t) -> std::span<double> {
                         if (!t.requires_grad()) return {};
                         return t.node()->ensure_grad();
                       };
                       kernels::ScanGrads grads{grad_of(x), grad_of(delta), grad_of(A),
                                                grad_of(B), grad_of(C),     grad_of(skip)};
                       kernels::selective_scan_backward(g, in, *states, self.grad, grads);
                     });
}

}  // namespace ssmcyto

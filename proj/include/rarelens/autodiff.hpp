#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <span>
#include <utility>
#include <vector>

#include "rarelens/errors.hpp"
#include "rarelens/tensor.hpp"

namespace rarelens {

class GradTape;

// Handle to a value recorded on a GradTape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  GradTape& tape() const noexcept { return *tape_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class GradTape;
  Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  GradTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients of a scalar loss, keyed by tape id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> by_id) : by_id_(std::move(by_id)) {}

  bool has(const Var& v) const { return v.id() < by_id_.size() && !by_id_[v.id()].empty(); }
  const Tensor& operator[](const Var& v) const {
    if (!has(v)) throw ContractError("no gradient recorded for tape entry " + std::to_string(v.id()));
    return by_id_[v.id()];
  }

 private:
  std::vector<Tensor> by_id_;
};

// Reverse-mode tape. Entries are appended in evaluation order; backward()
// walks them in reverse. An entry whose parents are all constants carries no
// backward function, so frozen computations leave no gradient path.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, std::span<const double> upstream)>;

  Var constant(Tensor value) {
    value.set_requires_grad(false);
    entries_.push_back({std::move(value), false, false, nullptr});
    return Var(this, entries_.size() - 1);
  }

  // A constant that references `value` instead of copying it; `value` must
  // outlive the tape.
  Var borrow(const Tensor& value) {
    entries_.push_back({Tensor(), false, false, nullptr, &value});
    return Var(this, entries_.size() - 1);
  }

  Var parameter(Tensor value) {
    value.set_requires_grad(true);
    entries_.push_back({std::move(value), true, true, nullptr});
    return Var(this, entries_.size() - 1);
  }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    return push(std::move(value), rg, std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    return push(std::move(value), rg, std::move(fn));
  }

  const Tensor& value(std::size_t id) const {
    const auto& e = entries_[id];
    return e.borrowed ? *e.borrowed : e.value;
  }
  bool requires_grad(std::size_t id) const { return entries_[id].requires_grad; }
  std::size_t size() const noexcept { return entries_.size(); }

  // Number of entries that hold a backward function.
  std::size_t differentiable_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.backward ? 1 : 0;
    return n;
  }

  // Gradient accumulator for entry `id`; only valid inside backward().
  std::span<double> grad(std::size_t id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(value(id).size(), 0.0);
    return g;
  }

  Gradients backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractError("loss is not on this tape");
    if (loss.value().size() != 1)
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.value().shape()));
    grads_.assign(entries_.size(), {});
    grad(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (grads_[i].empty() || !entries_[i].backward) continue;
      entries_[i].backward(*this, grads_[i]);
    }
    std::vector<Tensor> out(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!entries_[i].leaf) continue;
      const auto& v = entries_[i].value;
      out[i] = grads_[i].empty() ? Tensor(v.shape()) : Tensor(v.shape(), std::move(grads_[i]));
    }
    grads_.clear();
    return Gradients(std::move(out));
  }

 private:
  struct Entry {
    Tensor value;
    bool requires_grad;
    bool leaf;
    BackwardFn backward;
    const Tensor* borrowed = nullptr;
  };

  Var push(Tensor value, bool rg, BackwardFn fn) {
    value.set_requires_grad(rg);
    entries_.push_back({std::move(value), rg, false, rg ? std::move(fn) : nullptr});
    return Var(this, entries_.size() - 1);
  }

  std::deque<Entry> entries_;  // stable references across appends
  std::vector<std::vector<double>> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// Differentiable operations. Each computes its value eagerly and records a
// closure that reads parent values back from the tape.
namespace ad {

namespace detail {
inline void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}
inline void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = rarelens::matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](GradTape& t, std::span<const double> g) {
    if (t.requires_grad(ia))
      kernel::gemm_nt(g.data(), t.value(ib).data().data(), t.grad(ia).data(), m, n, k);
    if (t.requires_grad(ib))
      kernel::gemm_tn(t.value(ia).data().data(), g.data(), t.grad(ib).data(), m, k, n);
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = rarelens::matmul_nt(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](GradTape& t, std::span<const double> g) {
    if (t.requires_grad(ia))
      kernel::gemm_nn(g.data(), t.value(ib).data().data(), t.grad(ia).data(), m, n, k);
    if (t.requires_grad(ib))
      kernel::gemm_tn(g.data(), t.value(ia).data().data(), t.grad(ib).data(), m, n, k);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  Tensor out = a.value() + b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](GradTape& t, std::span<const double> g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad(ia), g);
    if (t.requires_grad(ib)) detail::add_into(t.grad(ib), g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  Tensor out = a.value() - b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](GradTape& t, std::span<const double> g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad(ia), g);
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

// Element-wise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  if (a.value().shape() != b.value().shape())
    throw DimensionError("mul " + shape_str(a.value().shape()) + " * " + shape_str(b.value().shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](GradTape& t, std::span<const double> g) {
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = s * a.value();
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](GradTape& t, std::span<const double> g) {
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

// x[n,m] + bias[m] broadcast over rows.
inline Var add_bias(const Var& x, const Var& bias) {
  detail::require_same_tape(x, bias);
  const std::size_t n = x.rows(), m = x.cols();
  if (bias.value().size() != m)
    throw DimensionError("bias " + shape_str(bias.value().shape()) + " for rows of width " +
                         std::to_string(m));
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += bias.value()[j];
  const auto ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [=](GradTape& t, std::span<const double> g) {
    if (t.requires_grad(ix)) detail::add_into(t.grad(ix), g);
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
    }
  });
}

// tanh-approximated GELU, the smooth ramp used by every MLP here.
inline double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double th = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

inline Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = gelu_value(v);
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    auto gx = t.grad(ix);
    const auto& xv = t.value(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * gelu_grad(xv[i]);
  });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const std::size_t n = x.rows(), m = x.cols();
  if (gamma.value().size() != m || beta.value().size() != m)
    throw DimensionError("layer_norm affine width mismatch");
  const auto& xv = x.value();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = xv.row(i);
    double mu = 0.0;
    for (double v : r) mu += v;
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(m);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j)
      out(i, j) = (r[j] - mu) * rstd * gamma.value()[j] + beta.value()[j];
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(std::move(out), {x, gamma, beta}, [=](GradTape& t, std::span<const double> g) {
    const auto& xv = t.value(ix);
    const auto& gv = t.value(ig);
    std::vector<double> xhat(m), dxhat(m);
    const bool need_x = t.requires_grad(ix), need_g = t.requires_grad(ig), need_b = t.requires_grad(ib);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = xv.row(i);
      double mu = 0.0;
      for (double v : r) mu += v;
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (double v : r) var += (v - mu) * (v - mu);
      var /= static_cast<double>(m);
      const double rstd = 1.0 / std::sqrt(var + eps);
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        xhat[j] = (r[j] - mu) * rstd;
        dxhat[j] = g[i * m + j] * gv[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat[j];
      }
      mean_d /= static_cast<double>(m);
      mean_dx /= static_cast<double>(m);
      if (need_x) {
        auto gx = t.grad(ix);
        for (std::size_t j = 0; j < m; ++j)
          gx[i * m + j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
      }
      if (need_g) {
        auto gg = t.grad(ig);
        for (std::size_t j = 0; j < m; ++j) gg[j] += g[i * m + j] * xhat[j];
      }
      if (need_b) {
        auto gb = t.grad(ib);
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
      }
    }
  });
}

// Row softmax; with `causal`, entry (i, j) is masked when j > i + offset.
inline Var softmax_rows(const Var& x, bool causal = false, std::size_t offset = 0) {
  Tensor out = rarelens::softmax_rows(x.value(), causal, offset);
  const auto ix = x.id();
  const auto self_value = std::make_shared<Tensor>(out);
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    const Tensor& y = *self_value;
    auto gx = t.grad(ix);
    const std::size_t n = y.rows(), m = y.cols();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y(i, j);
      for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += y(i, j) * (g[i * m + j] - s);
    }
  });
}

inline Var log_softmax_rows(const Var& x) {
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = xv.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) out(i, j) = r[j] - lse;
  }
  const auto ix = x.id();
  const auto self_value = std::make_shared<Tensor>(out);
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    const Tensor& y = *self_value;
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += g[i * m + j];
      for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += g[i * m + j] - std::exp(y(i, j)) * s;
    }
  });
}

// Rows `ids` of `table`: embedding lookup.
inline Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
  const std::size_t m = table.cols(), vocab = table.rows();
  Tensor out(Shape{ids.size(), m});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) throw DimensionError("row id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(table.value().row(ids[i]).begin(), m, out.row(i).begin());
  }
  const auto it = table.id();
  return table.tape().record(std::move(out), {table}, [=](GradTape& t, std::span<const double> g) {
    auto gt = t.grad(it);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) gt[ids[i] * m + j] += g[i * m + j];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw DimensionError("concat_rows width mismatch");
    detail::require_same_tape(parts.front(), p);
    n += p.rows();
  }
  std::vector<double> data;
  data.reserve(n * m);
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    offsets.push_back(data.size());
    ids.push_back(p.id());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return parts.front().tape().record(Tensor(Shape{n, m}, std::move(data)), parts,
                                     [=](GradTape& t, std::span<const double> g) {
                                       for (std::size_t k = 0; k < ids.size(); ++k) {
                                         if (!t.requires_grad(ids[k])) continue;
                                         auto gp = t.grad(ids[k]);
                                         for (std::size_t i = 0; i < gp.size(); ++i)
                                           gp[i] += g[offsets[k] + i];
                                       }
                                     });
}

inline Var slice_rows(const Var& x, std::size_t r0, std::size_t r1) {
  const std::size_t m = x.cols();
  if (r0 >= r1 || r1 > x.rows()) throw DimensionError("slice_rows out of range");
  const auto src = x.value().data().subspan(r0 * m, (r1 - r0) * m);
  Tensor out(Shape{r1 - r0, m}, std::vector<double>(src.begin(), src.end()));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[r0 * m + i] += g[i];
  });
}

inline Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
  const std::size_t n = x.rows(), m = x.cols(), w = c1 - c0;
  if (c0 >= c1 || c1 > m) throw DimensionError("slice_cols out of range");
  Tensor out(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = x.value()(i, c0 + j);
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * m + c0 + j] += g[i * w + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    if (p.rows() != n) throw DimensionError("concat_cols height mismatch");
    ids.push_back(p.id());
    offsets.push_back(m);
    widths.push_back(p.cols());
    m += p.cols();
  }
  Tensor out(Shape{n, m});
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, offsets[k] + j) = parts[k].value()(i, j);
  return parts.front().tape().record(std::move(out), parts, [=](GradTape& t, std::span<const double> g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      auto gp = t.grad(ids[k]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * m + offsets[k] + j];
    }
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [=](GradTape& t, std::span<const double> g) {
    for (auto& v : t.grad(ix)) v += g[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  const auto ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [=](GradTape& t, std::span<const double> g) {
    auto gx = t.grad(ix);
    const auto& xv = t.value(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xv[i] * g[0];
  });
}

// Pairwise cosine between rows: out(i, j) = cos(a_i, b_j), clamped to
// [-1, 1]. The clamp is treated as the identity when differentiating.
inline Var cosine_rows(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  if (b.cols() != d)
    throw DimensionError("cosine_rows " + shape_str(a.value().shape()) + " vs " + shape_str(b.value().shape()));
  auto norms = [](const Tensor& x, const char* which) {
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out[i] = norm(x.row(i));
      if (out[i] == 0.0)
        throw DegenerateVectorError(std::string(which) + " row " + std::to_string(i) + " has zero norm");
    }
    return out;
  };
  const auto na = norms(a.value(), "left"), nb = norms(b.value(), "right");
  Tensor raw = rarelens::matmul_nt(a.value(), b.value());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) raw(i, j) /= na[i] * nb[j];
  Tensor out = raw;
  for (auto& v : out.data()) v = std::clamp(v, -1.0, 1.0);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](GradTape& t, std::span<const double> g) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double gij = g[i * m + j];
        if (gij == 0.0) continue;
        const double s = raw(i, j);
        if (need_a) {
          auto ga = t.grad(ia);
          const double c1 = gij / (na[i] * nb[j]), c2 = gij * s / (na[i] * na[i]);
          for (std::size_t k = 0; k < d; ++k) ga[i * d + k] += c1 * bv(j, k) - c2 * av(i, k);
        }
        if (need_b) {
          auto gb = t.grad(ib);
          const double c1 = gij / (na[i] * nb[j]), c2 = gij * s / (nb[j] * nb[j]);
          for (std::size_t k = 0; k < d; ++k) gb[j * d + k] += c1 * av(i, k) - c2 * bv(j, k);
        }
      }
    }
  });
}

// Per-row log-sum-exp over the entries selected by `mask` (row-major n*m).
// Returns an n x 1 column.
inline Var masked_logsumexp_rows(const Var& x, std::vector<char> mask) {
  const std::size_t n = x.rows(), m = x.cols();
  if (mask.size() != n * m) throw DimensionError("mask size mismatch");
  Tensor out(Shape{n, 1});
  auto weights = std::make_shared<std::vector<double>>(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) mx = std::max(mx, x.value()(i, j));
    if (mx == -INFINITY) throw ContractError("row " + std::to_string(i) + " has an empty selection");
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) s += ((*weights)[i * m + j] = std::exp(x.value()(i, j) - mx));
    for (std::size_t j = 0; j < m; ++j) (*weights)[i * m + j] /= s;
    out(i, 0) = mx + std::log(s);
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += g[i] * (*weights)[i * m + j];
  });
}

// out(i) = x(i, cols[i]) as an n x 1 column.
inline Var pick_cols(const Var& x, std::vector<std::size_t> cols) {
  const std::size_t n = x.rows(), m = x.cols();
  if (cols.size() != n) throw DimensionError("pick_cols needs one column per row");
  Tensor out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] >= m) throw DimensionError("pick_cols column out of range");
    out(i, 0) = x.value()(i, cols[i]);
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](GradTape& t, std::span<const double> g) {
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < n; ++i) gx[i * m + cols[i]] += g[i];
  });
}

struct TokenTarget {
  std::size_t row;
  std::size_t token;
};

// Sum over targets of -log softmax(logits[row])[token].
inline Var cross_entropy_sum(const Var& logits, std::vector<TokenTarget> targets) {
  const std::size_t m = logits.cols();
  const auto& lv = logits.value();
  auto probs = std::make_shared<std::vector<std::vector<double>>>();
  double total = 0.0;
  for (const auto& tg : targets) {
    if (tg.row >= lv.rows() || tg.token >= m) throw DimensionError("cross-entropy target out of range");
    const auto r = lv.row(tg.row);
    const double mx = *std::max_element(r.begin(), r.end());
    std::vector<double> p(m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (p[j] = std::exp(r[j] - mx));
    for (auto& v : p) v /= s;
    total -= (r[tg.token] - mx) - std::log(s);
    probs->push_back(std::move(p));
  }
  const auto il = logits.id();
  return logits.tape().record(Tensor::scalar(total), {logits}, [=](GradTape& t, std::span<const double> g) {
    auto gl = t.grad(il);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& p = (*probs)[k];
      const std::size_t base = targets[k].row * m;
      for (std::size_t j = 0; j < m; ++j) gl[base + j] += g[0] * p[j];
      gl[base + targets[k].token] -= g[0];
    }
  });
}

}  // namespace ad

// Builds the tape for a scalar objective of the given parameters.
using Objective = std::function<Var(GradTape&, std::span<const Var>)>;

// Largest |analytic - central difference| / max(1, |central difference|)
// over every coordinate of every parameter.
inline double grad_check(const Objective& f, const std::vector<Tensor>& params, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ContractError("grad_check step must be positive");
  auto evaluate = [&](const std::vector<Tensor>& ps) {
    GradTape tape;
    std::vector<Var> vars;
    for (const auto& p : ps) vars.push_back(tape.constant(p));
    const double v = f(tape, vars).value().item();
    if (!std::isfinite(v)) throw EvaluationError("objective is not finite at a probe point");
    return v;
  };

  GradTape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  const Var loss = f(tape, vars);
  if (!std::isfinite(loss.value().item())) throw EvaluationError("objective is not finite");
  const Gradients grads = tape.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& analytic = grads[vars[k]];
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double orig = params[k][i];
      probe[k][i] = orig + eps;
      const double up = evaluate(probe);
      probe[k][i] = orig - eps;
      const double down = evaluate(probe);
      probe[k][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace rarelens

#pragma once

// Plain-loop reference implementations shared by the unit tests and the
// acceptance run. Nothing here calls the vectorized code under test.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "rarelens/class_embeddings.hpp"
#include "rarelens/hinting.hpp"

namespace oracle {

using namespace rarelens;

inline double loop_cos(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) d += a(i, k) * b(j, k), na += a(i, k) * a(i, k), nb += b(j, k) * b(j, k);
  return d / std::sqrt(na * nb);
}

inline double align(const Tensor& hv, const std::vector<std::size_t>& lv, const Tensor& ht,
                    const std::vector<std::size_t>& lt, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < hv.rows(); ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < ht.rows(); ++j) {
      const double e = std::exp(loop_cos(hv, i, ht, j) / tau);
      den += e;
      if (lv[i] == lt[j]) num += e;
    }
    total += -std::log(num / den);
  }
  return total / double(hv.rows());
}

inline double class_loss(const Tensor& hv, const std::vector<std::size_t>& lv, const Tensor& ht,
                         const std::vector<std::size_t>& lt, const Tensor& w, double tau) {
  double total = 0.0;
  auto one = [&](const Tensor& h, std::size_t i, std::size_t y) {
    double den = 0.0;
    for (std::size_t c = 0; c < w.rows(); ++c) den += std::exp(loop_cos(h, i, w, c) / tau);
    total += -std::log(std::exp(loop_cos(h, i, w, y) / tau) / den);
  };
  for (std::size_t i = 0; i < hv.rows(); ++i) one(hv, i, lv[i]);
  for (std::size_t j = 0; j < ht.rows(); ++j) one(ht, j, lt[j]);
  return total / double(hv.rows() + ht.rows());
}

struct Batch {
  Tensor hv, ht, w;
  std::vector<std::size_t> lv, lt;
};

// Random batch in which every visual label has a text positive.
inline Batch random_batch(Rng& rng, std::size_t n, std::size_t t, std::size_t c, std::size_t d) {
  Batch b{rng.normal_tensor({n, d}, 1.0), rng.normal_tensor({t, d}, 1.0), rng.normal_tensor({c, d}, 1.0), {}, {}};
  for (std::size_t j = 0; j < t; ++j) b.lt.push_back(j < c ? j : rng.index(c));
  for (std::size_t i = 0; i < n; ++i) b.lv.push_back(rng.index(c));
  return b;
}

inline double align_value(const Batch& b, double tau) {
  GradTape tape;
  return align_loss(tape.constant(b.hv), b.lv, tape.constant(b.ht), b.lt, tau).value().item();
}

inline double class_value(const Batch& b, double tau) {
  GradTape tape;
  return rarelens::class_loss(tape.constant(b.hv), b.lv, tape.constant(b.ht), b.lt, tape.constant(b.w), tau)
      .value()
      .item();
}

// Per-class max cosine and its first patch, by brute force over s.
inline void score_max(const Tensor& s, std::vector<double>& r, std::vector<std::size_t>& arg) {
  r.assign(s.cols(), -INFINITY);
  arg.assign(s.cols(), 0);
  for (std::size_t c = 0; c < s.cols(); ++c)
    for (std::size_t i = 0; i < s.rows(); ++i)
      if (s(i, c) > r[c]) r[c] = s(i, c), arg[c] = i;
}

// Full sort by score, ties by class id.
inline std::vector<std::size_t> ranking(const std::vector<double>& r) {
  std::vector<std::size_t> order(r.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return r[a] != r[b] ? r[a] > r[b] : a < b; });
  return order;
}

}  // namespace oracle

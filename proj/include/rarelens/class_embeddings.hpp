#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "rarelens/autodiff.hpp"
#include "rarelens/errors.hpp"
#include "rarelens/io.hpp"
#include "rarelens/optim.hpp"
#include "rarelens/random.hpp"
#include "rarelens/synth_world.hpp"

namespace rarelens {

// Two-layer MLP: gelu(x W1 + b1) W2 + b2.
template <typename T>
struct MlpWeights {
  T w1, b1, w2, b2;
};

template <typename T>
struct HeadWeights {
  MlpWeights<T> vis, text;

  template <typename F, typename... S>
  static void visit(F&& f, S&... s) {
    f("vis.w1", s.vis.w1...);
    f("vis.b1", s.vis.b1...);
    f("vis.w2", s.vis.w2...);
    f("vis.b2", s.vis.b2...);
    f("text.w1", s.text.w1...);
    f("text.b1", s.text.b1...);
    f("text.w2", s.text.w2...);
    f("text.b2", s.text.b2...);
  }

  template <typename U, typename F>
  HeadWeights<U> map(F&& f) const {
    HeadWeights<U> out;
    HeadWeights<U>::visit([&](const std::string& n, U& dst, const T& src) { dst = f(n, src); }, out,
                          const_cast<HeadWeights&>(*this));
    return out;
  }
};

using ProjectionHeads = HeadWeights<Tensor>;

inline ProjectionHeads init_heads(std::size_t d_v, std::size_t d_t, std::size_t dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "projection-heads"));
  auto mlp = [&](std::size_t in) {
    MlpWeights<Tensor> m;
    m.w1 = rng.normal_tensor({in, dim}, 1.0 / std::sqrt(double(in)));
    m.b1 = Tensor(Shape{dim});
    m.w2 = rng.normal_tensor({dim, dim}, 1.0 / std::sqrt(double(dim)));
    m.b2 = Tensor(Shape{dim});
    return m;
  };
  ProjectionHeads h;
  h.vis = mlp(d_v);
  h.text = mlp(d_t);
  return h;
}

inline HeadWeights<Var> bind(GradTape& tape, const ProjectionHeads& h, bool trainable) {
  return h.map<Var>([&](const std::string&, const Tensor& t) { return trainable ? tape.parameter(t) : tape.borrow(t); });
}

// CRC32 over the heads' blob encoding; pairs a table with its heads.
inline std::uint32_t heads_checksum(const ProjectionHeads& h) {
  io::Writer w;
  ProjectionHeads::visit([&](const std::string& n, const Tensor& t) { w.blob(n, t); }, const_cast<ProjectionHeads&>(h));
  return io::crc32(w.finish());
}

inline Var mlp(const MlpWeights<Var>& m, const Var& x) {
  if (x.cols() != m.w1.rows())
    throw DimensionError("projection head expects width " + std::to_string(m.w1.rows()) + ", got " +
                         std::to_string(x.cols()));
  return ad::add_bias(ad::matmul(ad::gelu(ad::add_bias(ad::matmul(x, m.w1), m.b1)), m.w2), m.b2);
}

namespace detail {
inline Tensor as_rows(const Tensor& z) { return z.rank() == 1 ? z.reshaped({1, z.size()}) : z; }
inline Tensor project(const ProjectionHeads& h, const Tensor& z, bool visual) {
  GradTape tape;
  const auto w = bind(tape, h, false);
  Tensor out = mlp(visual ? w.vis : w.text, tape.constant(as_rows(z))).value();
  return z.rank() == 1 ? out.reshaped({out.cols()}) : out;
}
}  // namespace detail

// h_v = G_vis(z_v), h_t = G_text(z_t). Accept one vector or a row batch.
inline Tensor project_visual(const ProjectionHeads& h, const Tensor& z) { return detail::project(h, z, true); }
inline Tensor project_text(const ProjectionHeads& h, const Tensor& z) { return detail::project(h, z, false); }

// P_i as a row-major N x |T| mask.
inline std::vector<char> positive_mask(const std::vector<std::size_t>& vis_labels,
                                       const std::vector<std::size_t>& text_labels) {
  std::vector<char> mask(vis_labels.size() * text_labels.size(), 0);
  for (std::size_t i = 0; i < vis_labels.size(); ++i) {
    bool any = false;
    for (std::size_t j = 0; j < text_labels.size(); ++j)
      any |= (mask[i * text_labels.size() + j] = vis_labels[i] == text_labels[j]) != 0;
    if (!any) throw ContractError("visual sample " + std::to_string(i) + " has no positive text");
  }
  return mask;
}

// Multi-positive contrastive alignment of visual rows `hv` against text rows
// `ht`, averaged over visual samples.
inline Var align_loss(const Var& hv, const std::vector<std::size_t>& vis_labels, const Var& ht,
                      const std::vector<std::size_t>& text_labels, double tau = 1.0) {
  if (hv.rows() != vis_labels.size() || ht.rows() != text_labels.size())
    throw DimensionError("label count differs from embedding count");
  const auto pos = positive_mask(vis_labels, text_labels);
  const Var s = ad::scale(ad::cosine_rows(hv, ht), 1.0 / tau);
  const Var num = ad::masked_logsumexp_rows(s, pos);
  const Var den = ad::masked_logsumexp_rows(s, std::vector<char>(pos.size(), 1));
  return ad::scale(ad::sum(ad::sub(den, num)), 1.0 / static_cast<double>(vis_labels.size()));
}

inline void require_nondegenerate(const Tensor& w) {
  for (std::size_t c = 0; c < w.rows(); ++c)
    if (norm(w.row(c)) == 0.0) throw DegenerateVectorError("prototype " + std::to_string(c) + " has zero norm");
}

// Class-discriminative loss over every visual and text embedding against the
// prototype rows `w` (no gradient reaches `w` when it is a tape constant).
inline Var class_loss(const Var& hv, const std::vector<std::size_t>& vis_labels, const Var& ht,
                      const std::vector<std::size_t>& text_labels, const Var& w, double tau = 1.0) {
  if (hv.rows() != vis_labels.size() || ht.rows() != text_labels.size())
    throw DimensionError("label count differs from embedding count");
  require_nondegenerate(w.value());
  std::vector<std::size_t> labels = vis_labels;
  labels.insert(labels.end(), text_labels.begin(), text_labels.end());
  for (auto c : labels)
    if (c >= w.rows()) throw ContractError("label " + std::to_string(c) + " outside [0, C)");
  const Var s = ad::scale(ad::cosine_rows(ad::concat_rows({hv, ht}), w), 1.0 / tau);
  const Var picked = ad::pick_cols(ad::log_softmax_rows(s), labels);
  return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(labels.size()));
}

struct ClassEmbeddingTable {
  Tensor w;  // [C x D]
  std::vector<std::string> names;
  double kappa = 0.95;
  std::vector<std::size_t> update_count;
  std::uint32_t heads_checksum = 0;  // projection heads this table was trained with

  std::size_t size() const { return w.rows(); }
  std::size_t dim() const { return w.cols(); }
};

// Row means of `h` grouped by label; every class needs a sample.
inline Tensor class_means(const Tensor& h, const std::vector<std::size_t>& labels, std::size_t num_classes) {
  Tensor m(Shape{num_classes, h.cols()});
  std::vector<std::size_t> n(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++n.at(labels[i]);
    for (std::size_t k = 0; k < h.cols(); ++k) m(labels[i], k) += h(i, k);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (n[c] == 0) throw CoverageError("class " + std::to_string(c) + " has no visual samples");
    for (std::size_t k = 0; k < h.cols(); ++k) m(c, k) /= static_cast<double>(n[c]);
  }
  return m;
}

// w_c^(0) is the mean projected visual feature of class c. Zero rows are
// kept; see perturb_degenerate.
inline ClassEmbeddingTable init_class_embeddings(const Tensor& hv, const std::vector<std::size_t>& labels,
                                                 std::vector<std::string> names, double kappa = 0.95) {
  ClassEmbeddingTable t;
  t.w = class_means(hv, labels, names.size());
  t.names = std::move(names);
  t.kappa = kappa;
  t.update_count.assign(t.size(), 0);
  return t;
}

// Replaces zero-norm rows with 1e-6-scale seeded noise. Returns the classes
// that were touched.
inline std::vector<std::size_t> perturb_degenerate(ClassEmbeddingTable& t, std::uint64_t seed) {
  std::vector<std::size_t> flagged;
  Rng rng(derive_seed(seed, "prototype-perturb"));
  for (std::size_t c = 0; c < t.size(); ++c) {
    if (norm(t.w.row(c)) != 0.0) continue;
    for (auto& v : t.w.row(c)) v = 1e-6 * rng.normal();
    flagged.push_back(c);
  }
  return flagged;
}

// w_c <- kappa w_c + (1 - kappa) mean_c for every class with present[c];
// other rows are untouched. The result is clamped onto the segment so
// rounding can never leave it.
inline void ema_update(ClassEmbeddingTable& t, const Tensor& means, const std::vector<char>& present) {
  if (!(t.kappa >= 0.0 && t.kappa <= 1.0)) throw ConfigError("kappa must lie in [0, 1]");
  if (means.rows() != t.size() || means.cols() != t.dim() || present.size() != t.size())
    throw DimensionError("EMA means must be [C x D] with one presence flag per class");
  const double k = t.kappa;
  for (std::size_t c = 0; c < t.size(); ++c) {
    if (!present[c]) continue;
    for (std::size_t j = 0; j < t.dim(); ++j) {
      const double a = t.w(c, j), b = means(c, j);
      t.w(c, j) = std::clamp(k * a + (1.0 - k) * b, std::min(a, b), std::max(a, b));
    }
    ++t.update_count[c];
  }
}

// Nearest prototype by cosine; ties go to the lower class id.
inline std::size_t nearest_prototype(const Tensor& w, std::span<const double> h) {
  std::size_t best = 0;
  double best_s = -INFINITY;
  for (std::size_t c = 0; c < w.rows(); ++c) {
    const double s = cosine(h, w.row(c));
    if (s > best_s) best_s = s, best = c;
  }
  return best;
}

struct EmbeddingConfig {
  std::size_t epochs = 20;
  std::size_t phase1_epochs = 5;
  std::size_t batch = 128;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double kappa = 0.95;
  double lambda = 1.0;
  double tau = 1.0;
  std::size_t text_budget = 96;
  double gate_accuracy = 0.95;
  double gate_rare_recall = 0.9;
};

struct EmbeddingEpoch {
  std::size_t epoch = 0;
  int phase = 1;
  double l_align = 0.0;
  double l_class = 0.0;
  double proto_acc = 0.0;
};

struct PrototypeReport {
  double accuracy = 0.0;
  double rare_recall = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

struct EmbeddingResult {
  ProjectionHeads heads;
  ClassEmbeddingTable table;
  std::vector<EmbeddingEpoch> log;
  std::vector<std::size_t> perturbed;  // classes with a zero prototype at init
  PrototypeReport gate;
};

// 1-nearest-prototype classification of pooled object features.
inline PrototypeReport prototype_report(const ProjectionHeads& heads, const Tensor& w, const World& world,
                                        const std::vector<const SyntheticScene*>& scenes) {
  const std::size_t C = w.rows();
  PrototypeReport r;
  r.confusion.assign(C, std::vector<std::size_t>(C, 0));
  std::size_t hit = 0, rare_hit = 0, rare_n = 0;
  for (const auto* s : scenes) {
    const Tensor h = project_visual(heads, crop_and_pool(world.vision, *s));
    const std::size_t p = nearest_prototype(w, h.data());
    ++r.confusion[s->object_class][p];
    hit += p == s->object_class;
    if (world.data.manifest.is_rare(s->object_class)) ++rare_n, rare_hit += p == s->object_class;
  }
  r.accuracy = scenes.empty() ? 0.0 : double(hit) / double(scenes.size());
  r.rare_recall = rare_n ? double(rare_hit) / double(rare_n) : 1.0;
  return r;
}

inline std::string confusion_text(const PrototypeReport& r, const std::vector<std::string>& names) {
  std::ostringstream os;
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    os << "\n  " << names[c] << ":";
    for (auto n : r.confusion[c]) os << ' ' << n;
  }
  return os.str();
}

inline EmbeddingResult train_class_embeddings(const World& world, std::size_t dim, const EmbeddingConfig& cfg,
                                              std::uint64_t seed) {
  if (cfg.phase1_epochs > cfg.epochs) throw ConfigError("phase-1 epochs exceed total epochs");
  if (cfg.batch == 0) throw ConfigError("batch must be positive");
  if (!(cfg.tau > 0.0)) throw ConfigError("temperature must be positive");
  const Dataset& ds = world.data;
  const std::size_t C = ds.num_classes();
  const auto& dcfg = ds.manifest.config;

  // Pooled object features of the training split and the resampled texts.
  const auto train = ds.train();
  Tensor zv(Shape{train.size(), dcfg.d_v});
  std::vector<std::size_t> lv;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Tensor f = crop_and_pool(world.vision, *train[i]);
    std::copy(f.data().begin(), f.data().end(), zv.row(i).begin());
    lv.push_back(train[i]->object_class);
  }
  const auto texts = adaptive_resample(ds.pool, ds.manifest.train_counts, cfg.text_budget, seed);
  Tensor zt(Shape{texts.size(), dcfg.d_t});
  std::vector<std::size_t> lt;
  for (std::size_t j = 0; j < texts.size(); ++j) {
    const Tensor e = world.text.encode(texts[j].phrase);
    std::copy(e.data().begin(), e.data().end(), zt.row(j).begin());
    lt.push_back(texts[j].class_id);
  }

  EmbeddingResult res;
  res.heads = init_heads(dcfg.d_v, dcfg.d_t, dim, seed);
  std::vector<Tensor*> slots;
  ProjectionHeads::visit([&](const std::string&, Tensor& t) { slots.push_back(&t); }, res.heads);
  AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  Rng rng(derive_seed(seed, "embedding-order"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  bool have_table = false;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const int phase = epoch < cfg.phase1_epochs ? 1 : 2;
    if (phase == 2 && !have_table) {
      res.table = init_class_embeddings(project_visual(res.heads, zv), lv, ds.class_names(), cfg.kappa);
      res.perturbed = perturb_degenerate(res.table, seed);
      have_table = true;
    }
    rng.shuffle(order);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      Tensor xb(Shape{b1 - b0, dcfg.d_v});
      std::vector<std::size_t> lb;
      for (std::size_t i = b0; i < b1; ++i) {
        std::copy(zv.row(order[i]).begin(), zv.row(order[i]).end(), xb.row(i - b0).begin());
        lb.push_back(lv[order[i]]);
      }
      GradTape tape;
      const auto w = bind(tape, res.heads, true);
      const Var hv = mlp(w.vis, tape.constant(xb));
      const Var ht = mlp(w.text, tape.constant(zt));
      Var loss = align_loss(hv, lb, ht, lt, cfg.tau);
      if (phase == 2)
        loss = ad::add(loss, ad::scale(class_loss(hv, lb, ht, lt, tape.constant(res.table.w), cfg.tau), cfg.lambda));
      const auto g = tape.backward(loss);
      std::vector<Tensor> grads;
      HeadWeights<Var>::visit([&](const std::string&, const Var& v) { grads.push_back(g[v]); },
                              const_cast<HeadWeights<Var>&>(w));
      opt.step(slots, grads);
    }
    for (auto* t : slots) *t = round_to_f32(*t);

    const Tensor hv_all = project_visual(res.heads, zv);
    if (phase == 2) {
      ema_update(res.table, class_means(hv_all, lv, C), std::vector<char>(C, 1));
      res.table.w = round_to_f32(res.table.w);
    }
    // Epoch-end objective over the whole training set.
    const Tensor protos = phase == 2 ? res.table.w : class_means(hv_all, lv, C);
    GradTape tape;
    const Var hv = tape.constant(hv_all), ht = tape.constant(project_text(res.heads, zt));
    EmbeddingEpoch e{epoch, phase, align_loss(hv, lv, ht, lt, cfg.tau).value().item(), 0.0, 0.0};
    e.l_class = class_loss(hv, lv, ht, lt, tape.constant(protos), cfg.tau).value().item();
    e.proto_acc = prototype_report(res.heads, protos, world, ds.test()).accuracy;
    res.log.push_back(e);
  }
  if (!have_table) {
    res.table = init_class_embeddings(project_visual(res.heads, zv), lv, ds.class_names(), cfg.kappa);
    res.perturbed = perturb_degenerate(res.table, seed);
    res.table.w = round_to_f32(res.table.w);
  }
  res.table.heads_checksum = heads_checksum(res.heads);
  res.gate = prototype_report(res.heads, res.table.w, world, ds.test());
  if (res.gate.accuracy < cfg.gate_accuracy || res.gate.rare_recall < cfg.gate_rare_recall)
    throw GateError("prototype gate unmet: accuracy " + std::to_string(res.gate.accuracy) + " (need >= " +
                    std::to_string(cfg.gate_accuracy) + "), rare recall " + std::to_string(res.gate.rare_recall) +
                    " (need >= " + std::to_string(cfg.gate_rare_recall) + "); confusion rows:" +
                    confusion_text(res.gate, ds.class_names()));
  return res;
}

// ---- checkpoint --------------------------------------------------------

inline std::string encode_classes(const ProjectionHeads& h, const ClassEmbeddingTable& t) {
  io::Writer w;
  w.magic("RLCE");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(t.size()));
  w.u32(static_cast<std::uint32_t>(t.dim()));
  w.u32(static_cast<std::uint32_t>(h.vis.w1.rows()));
  w.u32(static_cast<std::uint32_t>(h.text.w1.rows()));
  w.f32(static_cast<float>(t.kappa));
  w.blob("W", t.w);
  ProjectionHeads::visit([&](const std::string& n, const Tensor& x) { w.blob(n, x); }, const_cast<ProjectionHeads&>(h));
  for (const auto& n : t.names) w.str(n);
  for (auto c : t.update_count) w.u32(static_cast<std::uint32_t>(c));
  w.u32(t.heads_checksum);
  return w.finish_with_crc();
}

inline std::pair<ProjectionHeads, ClassEmbeddingTable> decode_classes(std::string bytes,
                                                                      const std::string& what = "classes.ckpt") {
  io::Reader r(std::move(bytes), what, true);
  r.expect_magic("RLCE");
  if (r.u16() != 1) throw ChecksumError(what + ": unsupported version");
  const std::size_t C = r.u32(), D = r.u32(), dv = r.u32(), dt = r.u32();
  ClassEmbeddingTable t;
  t.kappa = r.f32();
  auto expect = [&](const std::string& name, const Shape& shape) {
    auto [n, v] = r.blob();
    if (n != name || v.shape() != shape) throw ChecksumError(what + ": unexpected blob '" + n + "'");
    return v;
  };
  t.w = expect("W", {C, D});
  ProjectionHeads h = init_heads(dv, dt, D, 0);
  ProjectionHeads::visit([&](const std::string& n, Tensor& x) { x = expect(n, x.shape()); }, h);
  for (std::size_t c = 0; c < C; ++c) t.names.push_back(r.str());
  for (std::size_t c = 0; c < C; ++c) t.update_count.push_back(r.u32());
  t.heads_checksum = r.u32();
  r.expect_end();
  if (t.heads_checksum != heads_checksum(h)) throw ChecksumError(what + ": projection heads do not match the table");
  return {std::move(h), std::move(t)};
}

// Identity of a trained table: CRC32 of its checkpoint encoding.
inline std::uint32_t checksum(const ProjectionHeads& h, const ClassEmbeddingTable& t) {
  return io::stored_crc(encode_classes(h, t));
}

inline void save_classes(const ProjectionHeads& h, const ClassEmbeddingTable& t, const std::filesystem::path& p) {
  io::write_file(p, encode_classes(h, t));
}
inline std::pair<ProjectionHeads, ClassEmbeddingTable> load_classes(const std::filesystem::path& p) {
  return decode_classes(io::read_file(p), p.string());
}

inline std::string embedding_log_csv(const std::vector<EmbeddingEpoch>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,phase,L_align,L_class,proto_acc\n";
  for (const auto& e : log) os << e.epoch << ',' << e.phase << ',' << e.l_align << ',' << e.l_class << ',' << e.proto_acc << '\n';
  return os.str();
}

}  // namespace rarelens

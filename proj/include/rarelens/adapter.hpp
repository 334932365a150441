#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rarelens/autodiff.hpp"
#include "rarelens/class_embeddings.hpp"
#include "rarelens/errors.hpp"
#include "rarelens/io.hpp"
#include "rarelens/optim.hpp"
#include "rarelens/random.hpp"
#include "rarelens/toy_vlm.hpp"

namespace rarelens {

// Single cross-attention layer: visual tokens query the class table.
template <typename T>
struct AdapterWeights {
  std::size_t heads = 4;
  T wq, wk, wv, wo;  // each [D x D]

  template <typename F, typename... S>
  static void visit(F&& f, S&... s) {
    f("wq", s.wq...);
    f("wk", s.wk...);
    f("wv", s.wv...);
    f("wo", s.wo...);
  }

  template <typename U, typename F>
  AdapterWeights<U> map(F&& f) const {
    AdapterWeights<U> out;
    out.heads = heads;
    AdapterWeights<U>::visit([&](const std::string& n, U& dst, const T& src) { dst = f(n, src); }, out,
                             const_cast<AdapterWeights&>(*this));
    return out;
  }
};

using AdapterParams = AdapterWeights<Tensor>;

// Output projection starts at zero, so the adapter starts as the identity.
inline AdapterParams init_adapter(std::size_t dim, std::size_t heads, std::uint64_t seed) {
  if (heads == 0 || dim % heads) throw ConfigError("adapter heads must divide D");
  Rng rng(derive_seed(seed, "adapter-init"));
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  AdapterParams a;
  a.heads = heads;
  a.wq = rng.normal_tensor({dim, dim}, s);
  a.wk = rng.normal_tensor({dim, dim}, s);
  a.wv = rng.normal_tensor({dim, dim}, s);
  a.wo = Tensor(Shape{dim, dim});
  return a;
}

inline std::size_t param_count(const AdapterParams& a) { return a.wq.size() + a.wk.size() + a.wv.size() + a.wo.size(); }

inline AdapterWeights<Var> bind(GradTape& tape, const AdapterParams& a, bool trainable) {
  return a.map<Var>([&](const std::string&, const Tensor& t) { return trainable ? tape.parameter(t) : tape.borrow(t); });
}

// V_hat = V + Att(V Wq, W Wk, W Wv) Wo, heads concatenated, no mask.
inline Var adapt(const AdapterWeights<Var>& a, const Var& v, const Var& w) {
  const std::size_t D = a.wq.rows();
  if (a.heads == 0 || D % a.heads) throw ConfigError("adapter heads must divide D");
  if (v.cols() != D || w.cols() != D)
    throw DimensionError("adapter expects width " + std::to_string(D) + ", got V " + shape_str(v.value().shape()) +
                         " and W " + shape_str(w.value().shape()));
  const std::size_t dh = D / a.heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const Var q = ad::matmul(v, a.wq), k = ad::matmul(w, a.wk), val = ad::matmul(w, a.wv);
  std::vector<Var> heads;
  for (std::size_t h = 0; h < a.heads; ++h) {
    const std::size_t c0 = h * dh, c1 = c0 + dh;
    const Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(ad::slice_cols(q, c0, c1), ad::slice_cols(k, c0, c1)), inv));
    heads.push_back(ad::matmul(att, ad::slice_cols(val, c0, c1)));
  }
  return ad::add(v, ad::matmul(a.heads == 1 ? heads[0] : ad::concat_cols(heads), a.wo));
}

struct RefinedTokens {
  Tensor v;  // [M x D]
  std::string scene_id;
  std::uint32_t table_checksum = 0;
  std::uint32_t adapter_checksum = 0;
};

inline Tensor adapt(const AdapterParams& a, const Tensor& v, const Tensor& w) {
  GradTape tape;
  return adapt(bind(tape, a, false), tape.borrow(v), tape.borrow(w)).value();
}

// ||V_hat - V||_F^2
inline Var rec_loss(const Var& v, const Var& v_hat) { return ad::sum_squares(ad::sub(v_hat, v)); }

// Summed next-token negative log-likelihood of `seq` given refined tokens.
inline Var autoreg_loss(const VlmWeights<Var>& vlm, const Var& v_hat, const TokenSequence& seq, bool all_text = false) {
  auto targets = next_token_targets(seq, all_text);
  if (targets.empty()) throw ContractError("sequence has no supervised positions");
  return ad::cross_entropy_sum(forward(vlm, v_hat, seq).logits, std::move(targets));
}

struct AdapterConfig {
  std::size_t heads = 4;
  std::size_t epochs = 10;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double rec_weight = 1.0;
  double autoreg_weight = 1.0;
  bool all_text = false;          // supervise every text token, not only the answer
  std::size_t max_per_class = 0;  // training scenes used per class; 0 = all
};

struct AdapterEpoch {
  std::size_t epoch = 0;  // 0 is the evaluation at initialization
  double l_rec = 0.0;
  double l_autoreg = 0.0;
};

struct AdapterResult {
  AdapterParams params;
  std::vector<AdapterEpoch> log;  // per-example means
};

struct AdapterExample {
  Tensor v;  // frozen connector output V
  TokenSequence seq;
};

inline std::vector<AdapterExample> adapter_examples(const World& world, const VLMParams& vlm, const Tokenizer& tok,
                                                    const std::vector<const SyntheticScene*>& scenes,
                                                    std::size_t max_per_class) {
  std::vector<std::size_t> used(world.data.num_classes(), 0);
  std::vector<AdapterExample> ex;
  for (const auto* s : scenes) {
    if (max_per_class && used[s->object_class] >= max_per_class) continue;
    ++used[s->object_class];
    const Tensor v = connector(vlm, world.vision.encode(*s));
    ex.push_back({v, make_sequence(tok, v.rows(), s->question, s->answer)});
  }
  return ex;
}

// Trains A_w with batch size 1 against the frozen VLM and class table.
inline AdapterResult train_adapter(const World& world, const FrozenVlm& vlm, const Tokenizer& tok,
                                   const ClassEmbeddingTable& table, const AdapterConfig& cfg, std::uint64_t seed) {
  const VLMParams& p = vlm.params();
  if (table.dim() != p.config.dim) throw DimensionError("class table width differs from the VLM width");
  const Tensor w_before = table.w;
  const auto examples = adapter_examples(world, p, tok, world.data.train(), cfg.max_per_class);
  AdapterResult res;
  res.params = init_adapter(p.config.dim, cfg.heads, seed);
  std::vector<Tensor*> slots;
  AdapterParams::visit([&](const std::string&, Tensor& t) { slots.push_back(&t); }, res.params);
  AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  Rng rng(derive_seed(seed, "adapter-order"));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto step = [&](const AdapterExample& e, bool train, AdapterEpoch& acc) {
    GradTape tape;
    const auto vw = bind(tape, p, false);
    const auto aw = bind(tape, res.params, train);
    const Var v = tape.borrow(e.v);
    const Var v_hat = adapt(aw, v, tape.borrow(table.w));
    const Var lr = rec_loss(v, v_hat), la = autoreg_loss(vw, v_hat, e.seq, cfg.all_text);
    acc.l_rec += lr.value().item();
    acc.l_autoreg += la.value().item();
    if (!train) return;
    const Var loss = ad::add(ad::scale(lr, cfg.rec_weight), ad::scale(la, cfg.autoreg_weight));
    const auto g = tape.backward(loss);
    std::vector<Tensor> grads;
    AdapterWeights<Var>::visit([&](const std::string&, const Var& x) { grads.push_back(g[x]); },
                               const_cast<AdapterWeights<Var>&>(aw));
    opt.step(slots, grads);
  };
  auto finish = [&](AdapterEpoch e) {
    const double n = static_cast<double>(examples.size());
    e.l_rec /= n, e.l_autoreg /= n;
    res.log.push_back(e);
  };

  AdapterEpoch init{0, 0.0, 0.0};
  for (const auto& e : examples) step(e, false, init);
  finish(init);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    AdapterEpoch acc{epoch, 0.0, 0.0};
    for (auto i : order) step(examples[i], true, acc);
    finish(acc);
  }
  for (auto* t : slots) *t = round_to_f32(*t);
  vlm.verify();
  if (!(table.w == w_before)) throw ContractError("class table was modified during adapter training");
  return res;
}

// ---- checkpoint --------------------------------------------------------

inline std::string encode_adapter(const AdapterParams& a, std::uint32_t table_checksum) {
  io::Writer w;
  w.magic("RLAD");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(a.wq.rows()));
  w.u32(static_cast<std::uint32_t>(a.heads));
  w.u32(table_checksum);
  AdapterParams::visit([&](const std::string& n, const Tensor& t) { w.blob(n, t); }, const_cast<AdapterParams&>(a));
  return w.finish_with_crc();
}

inline std::uint32_t checksum(const AdapterParams& a, std::uint32_t table_checksum) {
  return io::stored_crc(encode_adapter(a, table_checksum));
}

// Rejects an adapter trained against a different class table.
inline AdapterParams decode_adapter(std::string bytes, std::uint32_t expected_table_checksum,
                                    const std::string& what = "adapter.ckpt") {
  io::Reader r(std::move(bytes), what, true);
  r.expect_magic("RLAD");
  if (r.u16() != 1) throw ChecksumError(what + ": unsupported version");
  const std::size_t D = r.u32(), heads = r.u32();
  const std::uint32_t table = r.u32();
  if (table != expected_table_checksum)
    throw ChecksumError(what + ": trained against class table " + std::to_string(table) + ", expected " +
                        std::to_string(expected_table_checksum));
  if (heads == 0 || D == 0 || D % heads) throw ChecksumError(what + ": invalid geometry");
  AdapterParams a;
  a.heads = heads;
  AdapterParams::visit(
      [&](const std::string& name, Tensor& t) {
        auto [n, v] = r.blob();
        if (n != name || v.shape() != Shape{D, D}) throw ChecksumError(what + ": unexpected blob '" + n + "'");
        t = std::move(v);
      },
      a);
  r.expect_end();
  return a;
}

inline void save_adapter(const AdapterParams& a, std::uint32_t table_checksum, const std::filesystem::path& p) {
  io::write_file(p, encode_adapter(a, table_checksum));
}
inline AdapterParams load_adapter(const std::filesystem::path& p, std::uint32_t expected_table_checksum) {
  return decode_adapter(io::read_file(p), expected_table_checksum, p.string());
}

}  // namespace rarelens

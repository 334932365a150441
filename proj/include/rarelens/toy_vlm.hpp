#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rarelens/autodiff.hpp"
#include "rarelens/errors.hpp"
#include "rarelens/io.hpp"
#include "rarelens/optim.hpp"
#include "rarelens/prompt.hpp"
#include "rarelens/random.hpp"
#include "rarelens/synth_world.hpp"
#include "rarelens/tokenizer.hpp"

namespace rarelens {

enum class Role : std::uint8_t { Visual, Prompt, Answer };

// S = [V; T]: `ids` spans the whole sequence, visual positions carry the
// <img> placeholder id and are never embedded from the token table.
struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<Role> roles;

  std::size_t size() const { return ids.size(); }
  std::size_t visual_count() const {
    std::size_t m = 0;
    while (m < roles.size() && roles[m] == Role::Visual) ++m;
    return m;
  }
  std::vector<std::size_t> text_ids() const {
    return {ids.begin() + static_cast<std::ptrdiff_t>(visual_count()), ids.end()};
  }
  void push(std::size_t id, Role r) {
    ids.push_back(id);
    roles.push_back(r);
  }
  void validate() const {
    if (ids.size() != roles.size()) throw ContractError("role mask length differs from sequence length");
    for (std::size_t i = visual_count(); i < roles.size(); ++i)
      if (roles[i] == Role::Visual) throw ContractError("visual positions must form a contiguous prefix");
  }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// [<img> x M] <bos> prompt [answer <eos>]
inline TokenSequence make_sequence(const Tokenizer& tok, std::size_t m, const std::string& prompt,
                                   const std::string& answer = "") {
  TokenSequence s;
  for (std::size_t i = 0; i < m; ++i) s.push(tok.img(), Role::Visual);
  s.push(tok.bos(), Role::Prompt);
  for (auto id : tok.encode(prompt)) s.push(id, Role::Prompt);
  if (!answer.empty()) {
    for (auto id : tok.encode(answer)) s.push(id, Role::Answer);
    s.push(tok.eos(), Role::Answer);
  }
  return s;
}

// Next-token targets. By default only positions whose next token is in the
// ANSWER region are supervised; `all_text` supervises every text token after
// <bos>.
inline std::vector<ad::TokenTarget> next_token_targets(const TokenSequence& s, bool all_text = false) {
  std::vector<ad::TokenTarget> t;
  const std::size_t m = s.visual_count();
  for (std::size_t p = m; p + 1 < s.size(); ++p)
    if (all_text || s.roles[p + 1] == Role::Answer) t.push_back({p, s.ids[p + 1]});
  return t;
}

struct VlmConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t dim = 64;
  std::size_t ffn = 512;
  std::size_t context = 256;
  std::size_t vocab = 0;
  std::size_t d_v = 32;
  bool tied_head = true;  // language head is the transposed token table

  std::size_t head_dim() const { return dim / heads; }
  void validate() const {
    if (layers == 0 || heads == 0 || dim == 0 || ffn == 0 || vocab == 0 || d_v == 0 || context == 0)
      throw ConfigError("VLM geometry must be positive");
    if (dim % heads) throw ConfigError("dim must be divisible by heads");
  }
  friend bool operator==(const VlmConfig&, const VlmConfig&) = default;
};

template <typename T>
struct LayerWeights {
  T ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

// Weight set, generic over storage (Tensor for parameters, Var on a tape).
template <typename T>
struct VlmWeights {
  VlmConfig config;
  T tok_emb, pos_emb, connector;
  std::vector<LayerWeights<T>> layers;
  T lnf_g, lnf_b, lm_head;

  // Calls f(name, field...) on matching fields of every argument.
  template <typename F, typename... S>
  static void visit(F&& f, S&... s) {
    auto& first = std::get<0>(std::forward_as_tuple(s...));
    f("tok_emb", s.tok_emb...);
    f("pos_emb", s.pos_emb...);
    f("connector", s.connector...);
    for (std::size_t l = 0; l < first.layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "ln1_g", s.layers[l].ln1_g...);
      f(p + "ln1_b", s.layers[l].ln1_b...);
      f(p + "wq", s.layers[l].wq...);
      f(p + "wk", s.layers[l].wk...);
      f(p + "wv", s.layers[l].wv...);
      f(p + "wo", s.layers[l].wo...);
      f(p + "ln2_g", s.layers[l].ln2_g...);
      f(p + "ln2_b", s.layers[l].ln2_b...);
      f(p + "w1", s.layers[l].w1...);
      f(p + "b1", s.layers[l].b1...);
      f(p + "w2", s.layers[l].w2...);
      f(p + "b2", s.layers[l].b2...);
    }
    f("lnf_g", s.lnf_g...);
    f("lnf_b", s.lnf_b...);
    if (!first.config.tied_head) f("lm_head", s.lm_head...);
  }

  template <typename U, typename F>
  VlmWeights<U> map(F&& f) const {
    VlmWeights<U> out;
    out.config = config;
    out.layers.resize(layers.size());
    VlmWeights<U>::visit([&](const std::string& name, U& dst, const T& src) { dst = f(name, src); }, out,
                         const_cast<VlmWeights&>(*this));
    return out;
  }
};

using VLMParams = VlmWeights<Tensor>;

inline VLMParams init_vlm(const VlmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "vlm-init"));
  const std::size_t D = cfg.dim;
  const double s = 0.02, s_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  auto ones = [](std::size_t n) {
    Tensor t(Shape{n});
    for (auto& v : t.data()) v = 1.0;
    return t;
  };
  VLMParams p;
  p.config = cfg;
  p.tok_emb = rng.normal_tensor({cfg.vocab, D}, s);
  p.pos_emb = rng.normal_tensor({cfg.context, D}, s);
  p.connector = rng.normal_tensor({cfg.d_v, D}, 1.0 / std::sqrt(static_cast<double>(cfg.d_v)));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights<Tensor> w;
    w.ln1_g = ones(D), w.ln1_b = Tensor(Shape{D});
    w.wq = rng.normal_tensor({D, D}, s), w.wk = rng.normal_tensor({D, D}, s);
    w.wv = rng.normal_tensor({D, D}, s), w.wo = rng.normal_tensor({D, D}, s_out);
    w.ln2_g = ones(D), w.ln2_b = Tensor(Shape{D});
    w.w1 = rng.normal_tensor({D, cfg.ffn}, s), w.b1 = Tensor(Shape{cfg.ffn});
    w.w2 = rng.normal_tensor({cfg.ffn, D}, s_out), w.b2 = Tensor(Shape{D});
    p.layers.push_back(std::move(w));
  }
  p.lnf_g = ones(D), p.lnf_b = Tensor(Shape{D});
  if (!cfg.tied_head) p.lm_head = rng.normal_tensor({D, cfg.vocab}, s);
  return p;
}

inline VlmWeights<Var> bind(GradTape& tape, const VLMParams& p, bool trainable) {
  return p.map<Var>([&](const std::string&, const Tensor& t) { return trainable ? tape.parameter(t) : tape.borrow(t); });
}

inline std::size_t param_count(const VLMParams& p) {
  std::size_t n = 0;
  VLMParams::visit([&](const std::string&, const Tensor& t) { n += t.size(); }, const_cast<VLMParams&>(p));
  return n;
}

// V = U C_phi, one linear map per token.
inline Tensor connector(const VLMParams& p, const Tensor& u) {
  if (u.rank() != 2 || u.cols() != p.config.d_v)
    throw DimensionError("connector expects [Mx" + std::to_string(p.config.d_v) + "], got " + shape_str(u.shape()));
  return matmul(u, p.connector);
}

struct ForwardOutput {
  Var logits;                                   // [n x vocab]
  std::vector<Var> hidden;                      // H^(0..L), each [n x D]
  std::vector<std::vector<Tensor>> attention;   // [layer][head] -> [n x n], if requested
};

inline Var language_head(const VlmWeights<Var>& w, const Var& h) {
  const Var hf = ad::layer_norm(h, w.lnf_g, w.lnf_b);
  return w.config.tied_head ? ad::matmul_nt(hf, w.tok_emb) : ad::matmul(hf, w.lm_head);
}

// Causal pre-LN decoder over [visual; text]. `visual` may be absent (M = 0).
inline ForwardOutput forward(const VlmWeights<Var>& w, const std::optional<Var>& visual, const TokenSequence& seq,
                             bool keep_attention = false) {
  const auto& cfg = w.config;
  seq.validate();
  const std::size_t m = visual ? visual->rows() : 0;
  if (seq.visual_count() != m)
    throw ContractError("sequence has " + std::to_string(seq.visual_count()) + " visual positions, got " +
                        std::to_string(m) + " visual tokens");
  if (visual && visual->cols() != cfg.dim) throw DimensionError("visual tokens must have width D");
  const std::size_t n = seq.size();
  if (n > cfg.context)
    throw LengthError("sequence length " + std::to_string(n) + " exceeds context " + std::to_string(cfg.context));
  if (n == m) throw ContractError("sequence has no text positions");
  Var x = ad::gather_rows(w.tok_emb, seq.text_ids());
  if (visual) x = ad::concat_rows({*visual, x});
  x = ad::add(x, ad::slice_rows(w.pos_emb, 0, n));

  ForwardOutput out;
  out.hidden.push_back(x);
  const std::size_t dh = cfg.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& L : w.layers) {
    const Var h = ad::layer_norm(x, L.ln1_g, L.ln1_b);
    const Var q = ad::matmul(h, L.wq), k = ad::matmul(h, L.wk), v = ad::matmul(h, L.wv);
    std::vector<Var> heads;
    std::vector<Tensor> maps;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      const Var a = ad::softmax_rows(
          ad::scale(ad::matmul_nt(ad::slice_cols(q, c0, c1), ad::slice_cols(k, c0, c1)), inv), true);
      if (keep_attention) maps.push_back(a.value());
      heads.push_back(ad::matmul(a, ad::slice_cols(v, c0, c1)));
    }
    x = ad::add(x, ad::matmul(cfg.heads == 1 ? heads[0] : ad::concat_cols(heads), L.wo));
    const Var h2 = ad::layer_norm(x, L.ln2_g, L.ln2_b);
    const Var f = ad::gelu(ad::add_bias(ad::matmul(h2, L.w1), L.b1));
    x = ad::add(x, ad::add_bias(ad::matmul(f, L.w2), L.b2));
    out.hidden.push_back(x);
    if (keep_attention) out.attention.push_back(std::move(maps));
  }
  out.logits = language_head(w, x);
  return out;
}

// Plain-tensor result of an inference pass.
struct Trace {
  Tensor logits;
  std::vector<Tensor> hidden;
  std::vector<std::vector<Tensor>> attention;
};

inline Trace run(const VLMParams& p, const std::optional<Tensor>& visual, const TokenSequence& seq,
                 bool keep_attention = false) {
  GradTape tape;
  const auto w = bind(tape, p, false);
  std::optional<Var> v;
  if (visual) v = tape.constant(*visual);
  auto out = forward(w, v, seq, keep_attention);
  Trace t{out.logits.value(), {}, std::move(out.attention)};
  for (const auto& h : out.hidden) t.hidden.push_back(h.value());
  return t;
}

// Lowest id among the maximal entries.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Greedy decoding. Returns the generated tokens (ANSWER role), without the
// terminating <eos>. Stops early if the context is full.
inline TokenSequence generate(const VLMParams& p, const std::optional<Tensor>& visual, const TokenSequence& prompt,
                              std::size_t max_len, std::size_t eos) {
  if (prompt.size() == prompt.visual_count()) throw ContractError("prompt must contain text");
  TokenSequence seq = prompt, gen;
  for (std::size_t step = 0; step < max_len && seq.size() < p.config.context; ++step) {
    const Trace t = run(p, visual, seq);
    const std::size_t next = argmax(t.logits.row(seq.size() - 1));
    if (next == eos) break;
    seq.push(next, Role::Answer);
    gen.push(next, Role::Answer);
  }
  return gen;
}

// Per layer, the head-averaged attention mass that position `pos` puts on
// the visual prefix.
inline std::vector<double> attention_probe(const Trace& t, const TokenSequence& seq, std::size_t pos) {
  if (pos >= seq.size()) throw ContractError("probe position " + std::to_string(pos) + " out of range");
  if (seq.roles[pos] != Role::Answer) throw ContractError("probe position must be in the answer region");
  if (t.attention.empty()) throw ContractError("trace was run without attention maps");
  const std::size_t m = seq.visual_count();
  std::vector<double> out;
  for (const auto& heads : t.attention) {
    double s = 0.0;
    for (const auto& a : heads)
      for (std::size_t i = 0; i < m; ++i) s += a(pos, i);
    out.push_back(s / static_cast<double>(heads.size()));
  }
  return out;
}

struct LensCell {
  std::size_t layer = 0, position = 0;
  std::vector<std::size_t> top;  // best first
  std::size_t target_rank = 0;   // tokens ranked ahead of the target
  double target_prob = 0.0;
};

// Decodes hidden states through the final norm and language head.
inline Tensor lens_logits(const VLMParams& p, const Tensor& rows) {
  GradTape tape;
  const auto w = bind(tape, p, false);
  return language_head(w, tape.constant(rows)).value();
}

inline std::size_t token_rank(std::span<const double> row, std::size_t target) {
  std::size_t r = 0;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (row[j] > row[target] || (row[j] == row[target] && j < target)) ++r;
  return r;
}

inline std::vector<LensCell> logit_lens(const VLMParams& p, const std::vector<Tensor>& hidden,
                                        const std::vector<std::size_t>& positions, std::size_t target,
                                        std::size_t top_n = 5) {
  if (target >= p.config.vocab) throw ContractError("lens target outside vocabulary");
  std::vector<LensCell> cells;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    for (auto pos : positions)
      if (pos >= hidden[l].rows()) throw ContractError("lens position " + std::to_string(pos) + " out of range");
    Tensor rows(Shape{positions.size(), p.config.dim});
    for (std::size_t i = 0; i < positions.size(); ++i)
      std::copy_n(hidden[l].row(positions[i]).begin(), p.config.dim, rows.row(i).begin());
    const Tensor probs = softmax_rows(lens_logits(p, rows));
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const auto row = probs.row(i);
      LensCell c{l, positions[i], {}, token_rank(row, target), row[target]};
      std::vector<std::size_t> order(row.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return row[a] > row[b]; });
      order.resize(std::min(top_n, order.size()));
      c.top = std::move(order);
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

// ---- checkpoint --------------------------------------------------------

inline std::string encode_vlm(const VLMParams& p) {
  io::Writer w;
  w.magic("RLVM");
  w.u16(1);
  const auto& c = p.config;
  for (auto v : {c.layers, c.heads, c.dim, c.vocab, c.d_v, c.ffn, c.context, std::size_t(c.tied_head)})
    w.u32(static_cast<std::uint32_t>(v));
  std::uint32_t count = 0;
  VLMParams::visit([&](const std::string&, const Tensor&) { ++count; }, const_cast<VLMParams&>(p));
  w.u32(count);
  VLMParams::visit([&](const std::string& name, const Tensor& t) { w.blob(name, t); }, const_cast<VLMParams&>(p));
  return w.finish_with_crc();
}

inline VLMParams decode_vlm(std::string bytes, const std::string& what = "vlm.ckpt") {
  io::Reader r(std::move(bytes), what, true);
  r.expect_magic("RLVM");
  if (r.u16() != 1) throw ChecksumError(what + ": unsupported version");
  VlmConfig c;
  c.layers = r.u32(), c.heads = r.u32(), c.dim = r.u32(), c.vocab = r.u32();
  c.d_v = r.u32(), c.ffn = r.u32(), c.context = r.u32(), c.tied_head = r.u32() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ChecksumError(what + ": " + e.what());
  }
  VLMParams p = init_vlm(c, 0);
  std::uint32_t expected = 0;
  VLMParams::visit([&](const std::string&, const Tensor&) { ++expected; }, p);
  if (r.u32() != expected) throw ChecksumError(what + ": unexpected blob count");
  VLMParams::visit(
      [&](const std::string& name, Tensor& t) {
        auto [n, v] = r.blob();
        if (n != name || v.shape() != t.shape()) throw ChecksumError(what + ": unexpected blob '" + n + "'");
        t = std::move(v);
      },
      p);
  r.expect_end();
  return p;
}

// Identity of a parameter set: CRC32 of its checkpoint encoding.
inline std::uint32_t checksum(const VLMParams& p) { return io::stored_crc(encode_vlm(p)); }

inline void save_vlm(const VLMParams& p, const std::filesystem::path& path) { io::write_file(path, encode_vlm(p)); }
inline VLMParams load_vlm(const std::filesystem::path& path) { return decode_vlm(io::read_file(path), path.string()); }

// Read-only handle; verify() fails loudly if the weights changed.
class FrozenVlm {
 public:
  explicit FrozenVlm(VLMParams p) : params_(std::move(p)), checksum_(rarelens::checksum(params_)) {}
  const VLMParams& params() const { return params_; }
  std::uint32_t checksum() const { return checksum_; }
  void verify() const {
    if (rarelens::checksum(params_) != checksum_) throw ContractError("frozen VLM weights were modified");
  }

 private:
  VLMParams params_;
  std::uint32_t checksum_;
};

// ---- fixture pretraining ------------------------------------------------

inline Tokenizer build_tokenizer(const Dataset& ds) {
  std::vector<std::string> texts = {"[ detected : , ]"};  // hint syntax
  for (const auto& q : question_templates()) texts.push_back(q);
  for (const auto& name : ds.class_names()) texts.push_back(name);
  for (const auto& s : ds.scenes) texts.push_back(s.question + " " + s.answer);
  return Tokenizer::build(texts);
}

struct FixtureConfig {
  VlmConfig vlm;  // vocab and d_v are filled from the dataset
  std::size_t epochs = 8;
  std::size_t batch = 16;
  double lr = 2e-3;
  double weight_decay = 0.01;
  double final_lr_scale = 0.05;  // cosine decay floor
  double warmup_fraction = 0.05;  // linear warmup share of all steps
  double hint_fraction = 0.5;    // common scenes shown with a hint list
  double drill_fraction = 0.5;   // unfamiliar-object drills per common scene
  std::size_t max_per_class = 100;  // common scenes used per class; 0 = all
  std::size_t max_hints = 5;
  std::size_t max_answer_len = 3;
  double gate_common = 0.9;
  double gate_rare = 0.4;
};

struct Example {
  Tensor u;  // [M x d_v] encoded patches
  TokenSequence seq;
};

// Common-class QA, plus hint-following drills. In a drill the object is an
// unfamiliar random signature and the answer is the first listed hint; on a
// common scene the answer is always the visible class, hint or not. Rare
// scenes are never used.
inline std::vector<Example> fixture_examples(const World& world, const Tokenizer& tok, const FixtureConfig& cfg,
                                             std::uint64_t seed) {
  const Dataset& ds = world.data;
  const auto names = ds.class_names();
  const std::size_t C = names.size();
  Rng rng(derive_seed(seed, "fixture-data"));
  auto random_hints = [&](std::size_t k) {
    std::vector<std::size_t> ids(C);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    rng.shuffle(ids);
    ids.resize(k);
    return ids;
  };
  auto hint_names = [&](const std::vector<std::size_t>& ids) {
    std::vector<std::string> out;
    for (auto i : ids) out.push_back(names[i]);
    return out;
  };
  const std::size_t kmax = std::min(cfg.max_hints, C);
  std::vector<Example> ex;
  std::size_t common = 0;
  std::vector<std::size_t> used(C, 0);
  for (const auto* s : ds.train()) {
    if (ds.manifest.is_rare(s->object_class)) continue;
    if (cfg.max_per_class && used[s->object_class] >= cfg.max_per_class) continue;
    ++used[s->object_class];
    ++common;
    const Tensor u = world.vision.encode(*s);
    const std::size_t m = u.rows();
    std::string prompt = s->question;
    if (rng.uniform() < cfg.hint_fraction) prompt = enrich_prompt(prompt, hint_names(random_hints(1 + rng.index(kmax))));
    ex.push_back({u, make_sequence(tok, m, prompt, s->answer)});
  }
  const std::size_t drills = static_cast<std::size_t>(std::llround(cfg.drill_fraction * static_cast<double>(common)));
  const auto& dcfg = ds.manifest.config;
  for (std::size_t i = 0; i < drills; ++i) {
    ClassSpec novel{C, "novel", detail::random_unit(rng, dcfg.d_v), 1.0};
    const SyntheticScene s = detail::make_scene(i, novel, dcfg, rng);
    const auto hints = hint_names(random_hints(1 + rng.index(kmax)));
    const Tensor u = world.vision.encode(s);
    ex.push_back({u, make_sequence(tok, u.rows(), enrich_prompt(s.question, hints), hints.front())});
  }
  return ex;
}

struct FixtureResult {
  VLMParams params;
  Tokenizer tokenizer;
  std::vector<double> epoch_loss;  // mean per-example cross-entropy
  double common_accuracy = 0.0;
  double rare_accuracy = 0.0;
};

// Class id named by the first generated token, or npos.
inline std::size_t answered_class(const Tokenizer& tok, const TokenSequence& gen, const std::vector<std::string>& names) {
  if (gen.size() == 0) return std::size_t(-1);
  const auto& w = tok.token(gen.ids[0]);
  for (std::size_t c = 0; c < names.size(); ++c)
    if (names[c] == w) return c;
  return std::size_t(-1);
}

// Baseline answer accuracy on the test split, split into common and rare.
inline std::pair<double, double> baseline_accuracy(const VLMParams& p, const Tokenizer& tok, const World& world,
                                                   std::size_t max_len) {
  const auto names = world.data.class_names();
  std::size_t hit[2] = {0, 0}, tot[2] = {0, 0};
  for (const auto* s : world.data.test()) {
    const Tensor v = connector(p, world.vision.encode(*s));
    const auto gen = generate(p, v, make_sequence(tok, v.rows(), s->question), max_len, tok.eos());
    const int r = world.data.manifest.is_rare(s->object_class) ? 1 : 0;
    ++tot[r];
    hit[r] += answered_class(tok, gen, names) == s->object_class;
  }
  auto frac = [](std::size_t a, std::size_t b) { return b ? double(a) / double(b) : 0.0; };
  return {frac(hit[0], tot[0]), frac(hit[1], tot[1])};
}

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

// Linear warmup, then cosine decay to `floor`; `progress` in [0, 1).
inline double lr_schedule(double progress, double warmup, double floor) {
  if (progress < warmup) return (progress + 1e-3) / (warmup + 1e-3);
  const double t = warmup < 1.0 ? (progress - warmup) / (1.0 - warmup) : 1.0;
  return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * t));
}

inline FixtureResult pretrain_fixture(const World& world, FixtureConfig cfg, std::uint64_t seed,
                                      const EpochCallback& on_epoch = {}) {
  FixtureResult res;
  res.tokenizer = build_tokenizer(world.data);
  cfg.vlm.vocab = res.tokenizer.size();
  cfg.vlm.d_v = world.data.manifest.config.d_v;
  if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("fixture epochs and batch must be positive");
  VLMParams p = init_vlm(cfg.vlm, seed);
  const auto examples = fixture_examples(world, res.tokenizer, cfg, seed);
  AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  Rng order_rng(derive_seed(seed, "fixture-order"));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t steps_per_epoch = (examples.size() + cfg.batch - 1) / cfg.batch;
  const double total_steps = static_cast<double>(steps_per_epoch * cfg.epochs);
  std::vector<Tensor*> slots;
  VLMParams::visit([&](const std::string&, Tensor& t) { slots.push_back(&t); }, p);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      // One tape per minibatch: the summed loss gives the accumulated gradient.
      GradTape tape;
      const auto w = bind(tape, p, true);
      std::vector<Var> losses;
      for (std::size_t i = b0; i < b1; ++i) {
        const Example& e = examples[order[i]];
        const Var v = ad::matmul(tape.constant(e.u), w.connector);
        const auto out = forward(w, v, e.seq);
        losses.push_back(ad::cross_entropy_sum(out.logits, next_token_targets(e.seq)));
        loss_sum += losses.back().value().item();
      }
      const Var batch_loss = ad::scale(ad::sum(ad::concat_rows(losses)), 1.0 / static_cast<double>(b1 - b0));
      const auto g = tape.backward(batch_loss);
      std::vector<Tensor> acc;
      VlmWeights<Var>::visit([&](const std::string&, const Var& var) { acc.push_back(g[var]); },
                             const_cast<VlmWeights<Var>&>(w));
      const double progress = static_cast<double>(opt.steps()) / total_steps;
      opt.step(slots, acc, lr_schedule(progress, cfg.warmup_fraction, cfg.final_lr_scale));
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(examples.size()));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back());
  }
  for (auto* t : slots) *t = round_to_f32(*t);
  std::tie(res.common_accuracy, res.rare_accuracy) = baseline_accuracy(p, res.tokenizer, world, cfg.max_answer_len);
  res.params = std::move(p);
  if (res.common_accuracy < cfg.gate_common || res.rare_accuracy > cfg.gate_rare)
    throw GateError("fixture gate unmet: common accuracy " + std::to_string(res.common_accuracy) + " (need >= " +
                    std::to_string(cfg.gate_common) + "), rare accuracy " + std::to_string(res.rare_accuracy) +
                    " (need <= " + std::to_string(cfg.gate_rare) + ")");
  return res;
}

}  // namespace rarelens

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "rarelens/adapter.hpp"
#include "rarelens/class_embeddings.hpp"
#include "rarelens/errors.hpp"
#include "rarelens/hinting.hpp"
#include "rarelens/io.hpp"
#include "rarelens/plots.hpp"
#include "rarelens/synth_world.hpp"
#include "rarelens/toy_vlm.hpp"

namespace rarelens {

// ---- configuration ----------------------------------------------------------

struct InferenceConfig {
  std::size_t k = 3;
  Mode mode = Mode::Full;
  std::size_t max_answer_len = 3;
};

struct SweepConfig {
  std::vector<Mode> arms = all_modes();
  std::vector<std::size_t> k_values = {1, 2, 3, 4, 5, 6, 7, 8, 9};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetConfig data;
  std::string textpool;  // empty: the bundled pool
  FixtureConfig fixture;
  EmbeddingConfig embedding;
  AdapterConfig adapter;
  InferenceConfig inference;
  SweepConfig sweep;
  std::size_t probe_scenes = 6;  // test scenes written by `probe`

  // The dataset shares the experiment seed.
  DatasetConfig dataset() const {
    DatasetConfig d = data;
    d.seed = seed;
    return d;
  }
  std::filesystem::path textpool_path() const { return textpool.empty() ? default_textpool_path() : std::filesystem::path(textpool); }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    const auto& d = data;
    need(d.num_classes >= 2, "data.num_classes must be at least 2");
    need(d.profile.rare_classes < d.num_classes, "data.rare_classes must leave at least one common class");
    need(d.profile.rare_count >= 1 && d.profile.common_count >= 1, "every class needs a training scene");
    need(d.profile.test_per_class >= 1, "data.test_per_class must be positive");
    need(d.grid >= 1 && d.d_v >= 1 && d.d_t >= 1, "data geometry must be positive");
    need(d.noise >= 0.0, "data.noise must be non-negative");
    const auto& v = fixture.vlm;
    need(v.layers && v.heads && v.dim && v.ffn && v.context, "fixture geometry must be positive");
    need(v.dim % v.heads == 0, "fixture.heads must divide fixture.dim");
    need(fixture.epochs >= 1 && fixture.batch >= 1 && fixture.lr > 0.0, "fixture training needs epochs, batch and lr");
    need(embedding.phase1_epochs <= embedding.epochs, "embedding.phase1_epochs exceeds embedding.epochs");
    need(embedding.batch >= 1 && embedding.lr > 0.0 && embedding.tau > 0.0, "embedding batch, lr and tau must be positive");
    need(embedding.kappa >= 0.0 && embedding.kappa <= 1.0, "embedding.kappa must lie in [0, 1]");
    need(adapter.heads >= 1 && v.dim % adapter.heads == 0, "adapter.heads must divide fixture.dim");
    need(adapter.lr > 0.0, "adapter.lr must be positive");
    need(inference.k >= 1 && inference.max_answer_len >= 1, "inference.k and max_answer_len must be positive");
    need(!sweep.k_values.empty() && !sweep.arms.empty(), "sweep needs arms and k values");
    for (auto k : sweep.k_values) need(k >= 1, "sweep k values must be positive");
  }
};

// Large geometry (D=1024, 8 heads), kept for reference; far too slow for a desk run.
inline ExperimentConfig large_config() {
  ExperimentConfig c;
  c.fixture.vlm.heads = 8;
  c.fixture.vlm.dim = 1024;
  c.fixture.vlm.ffn = 4096;
  c.adapter.heads = 8;
  return c;
}

namespace detail {

// Reads known keys from one JSON object and rejects everything else.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("'" + (where_.empty() ? std::string("config") : where_) + "' must be an object");
  }

  template <typename T>
  Fields& get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return *this;
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) ok = it->is_boolean();
    else if constexpr (std::is_integral_v<T>) ok = it->is_number_unsigned();
    else if constexpr (std::is_floating_point_v<T>) ok = it->is_number();
    else if constexpr (std::is_same_v<T, std::string>) ok = it->is_string();
    else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      ok = it->is_array() && std::all_of(it->begin(), it->end(), [](const json& e) { return e.is_number_unsigned(); });
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      ok = it->is_array() && std::all_of(it->begin(), it->end(), [](const json& e) { return e.is_string(); });
    }
    if (!ok) throw ConfigError("'" + path(key) + "' has the wrong type");
    out = it->get<T>();
    return *this;
  }

  const json* section(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path(it.key()) + "'");
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline std::vector<std::string> mode_names(const std::vector<Mode>& modes) {
  std::vector<std::string> out;
  for (auto m : modes) out.push_back(mode_name(m));
  return out;
}

}  // namespace detail

inline json config_to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& f = c.fixture;
  const auto& e = c.embedding;
  const auto& a = c.adapter;
  return {
      {"seed", c.seed},
      {"data",
       {{"num_classes", d.num_classes},
        {"grid", d.grid},
        {"d_v", d.d_v},
        {"d_t", d.d_t},
        {"rare_classes", d.profile.rare_classes},
        {"rare_count", d.profile.rare_count},
        {"common_count", d.profile.common_count},
        {"test_per_class", d.profile.test_per_class},
        {"signal", d.signal},
        {"noise", d.noise},
        {"max_signature_cosine", d.max_signature_cosine},
        {"identity_vision_transform", d.identity_vision_transform},
        {"textpool", c.textpool}}},
      {"fixture",
       {{"layers", f.vlm.layers},
        {"heads", f.vlm.heads},
        {"dim", f.vlm.dim},
        {"ffn", f.vlm.ffn},
        {"context", f.vlm.context},
        {"tied_head", f.vlm.tied_head},
        {"epochs", f.epochs},
        {"batch", f.batch},
        {"lr", f.lr},
        {"weight_decay", f.weight_decay},
        {"final_lr_scale", f.final_lr_scale},
        {"warmup_fraction", f.warmup_fraction},
        {"hint_fraction", f.hint_fraction},
        {"drill_fraction", f.drill_fraction},
        {"max_per_class", f.max_per_class},
        {"max_hints", f.max_hints},
        {"gate_common", f.gate_common},
        {"gate_rare", f.gate_rare}}},
      {"embedding",
       {{"epochs", e.epochs},
        {"phase1_epochs", e.phase1_epochs},
        {"batch", e.batch},
        {"lr", e.lr},
        {"weight_decay", e.weight_decay},
        {"kappa", e.kappa},
        {"lambda", e.lambda},
        {"tau", e.tau},
        {"text_budget", e.text_budget},
        {"gate_accuracy", e.gate_accuracy},
        {"gate_rare_recall", e.gate_rare_recall}}},
      {"adapter",
       {{"heads", a.heads},
        {"epochs", a.epochs},
        {"lr", a.lr},
        {"weight_decay", a.weight_decay},
        {"rec_weight", a.rec_weight},
        {"autoreg_weight", a.autoreg_weight},
        {"supervise_all_text", a.all_text},
        {"max_per_class", a.max_per_class}}},
      {"inference",
       {{"k", c.inference.k}, {"mode", mode_name(c.inference.mode)}, {"max_answer_len", c.inference.max_answer_len}}},
      {"sweep", {{"arms", detail::mode_names(c.sweep.arms)}, {"k_values", c.sweep.k_values}}},
      {"probe", {{"scenes", c.probe_scenes}}},
  };
}

// Missing keys keep their defaults; unknown keys and wrong types are errors.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::Fields top(j, "");
  top.get("seed", c.seed);
  if (const json* s = top.section("data")) {
    detail::Fields f(*s, "data");
    auto& d = c.data;
    f.get("num_classes", d.num_classes).get("grid", d.grid).get("d_v", d.d_v).get("d_t", d.d_t);
    // The rare-class count follows num_classes unless given explicitly.
    d.profile = ImbalanceProfile::standard(d.num_classes);
    f.get("rare_classes", d.profile.rare_classes).get("rare_count", d.profile.rare_count);
    f.get("common_count", d.profile.common_count).get("test_per_class", d.profile.test_per_class);
    f.get("signal", d.signal).get("noise", d.noise).get("max_signature_cosine", d.max_signature_cosine);
    f.get("identity_vision_transform", d.identity_vision_transform).get("textpool", c.textpool);
    f.finish();
  }
  if (const json* s = top.section("fixture")) {
    detail::Fields f(*s, "fixture");
    auto& x = c.fixture;
    f.get("layers", x.vlm.layers).get("heads", x.vlm.heads).get("dim", x.vlm.dim).get("ffn", x.vlm.ffn);
    f.get("context", x.vlm.context).get("tied_head", x.vlm.tied_head).get("epochs", x.epochs).get("batch", x.batch);
    f.get("lr", x.lr).get("weight_decay", x.weight_decay).get("final_lr_scale", x.final_lr_scale);
    f.get("warmup_fraction", x.warmup_fraction).get("hint_fraction", x.hint_fraction);
    f.get("drill_fraction", x.drill_fraction).get("max_per_class", x.max_per_class).get("max_hints", x.max_hints);
    f.get("gate_common", x.gate_common).get("gate_rare", x.gate_rare);
    f.finish();
  }
  if (const json* s = top.section("embedding")) {
    detail::Fields f(*s, "embedding");
    auto& x = c.embedding;
    f.get("epochs", x.epochs).get("phase1_epochs", x.phase1_epochs).get("batch", x.batch).get("lr", x.lr);
    f.get("weight_decay", x.weight_decay).get("kappa", x.kappa).get("lambda", x.lambda).get("tau", x.tau);
    f.get("text_budget", x.text_budget).get("gate_accuracy", x.gate_accuracy).get("gate_rare_recall", x.gate_rare_recall);
    f.finish();
  }
  if (const json* s = top.section("adapter")) {
    detail::Fields f(*s, "adapter");
    auto& x = c.adapter;
    f.get("heads", x.heads).get("epochs", x.epochs).get("lr", x.lr).get("weight_decay", x.weight_decay);
    f.get("rec_weight", x.rec_weight).get("autoreg_weight", x.autoreg_weight).get("supervise_all_text", x.all_text);
    f.get("max_per_class", x.max_per_class);
    f.finish();
  }
  if (const json* s = top.section("inference")) {
    detail::Fields f(*s, "inference");
    std::string mode = mode_name(c.inference.mode);
    f.get("k", c.inference.k).get("mode", mode).get("max_answer_len", c.inference.max_answer_len);
    c.inference.mode = parse_mode(mode);
    f.finish();
  }
  if (const json* s = top.section("sweep")) {
    detail::Fields f(*s, "sweep");
    auto arms = detail::mode_names(c.sweep.arms);
    f.get("arms", arms).get("k_values", c.sweep.k_values);
    c.sweep.arms.clear();
    for (const auto& a : arms) c.sweep.arms.push_back(parse_mode(a));
    f.finish();
  }
  if (const json* s = top.section("probe")) {
    detail::Fields f(*s, "probe");
    f.get("scenes", c.probe_scenes);
    f.finish();
  }
  top.finish();
  c.fixture.max_answer_len = c.inference.max_answer_len;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
  json j;
  try {
    j = json::parse(io::read_file(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

// ---- evaluation -------------------------------------------------------------

struct ClassRow {
  std::size_t class_id = 0;
  std::string name;
  bool rare = false;
  std::size_t n = 0, correct = 0, trusted = 0;
};

// One ablation arm at one k over a list of scenes.
struct ArmResult {
  Mode mode = Mode::Baseline;
  std::size_t k = 0;
  std::vector<ClassRow> classes;

  template <typename P>
  std::pair<std::size_t, std::size_t> count(P&& pick) const {
    std::size_t n = 0, hit = 0;
    for (const auto& c : classes)
      if (pick(c)) n += c.n, hit += c.correct;
    return {n, hit};
  }
  static double rate(std::pair<std::size_t, std::size_t> p) { return p.first ? double(p.second) / double(p.first) : 0.0; }
  double accuracy() const { return rate(count([](const ClassRow&) { return true; })); }
  double rare_accuracy() const { return rate(count([](const ClassRow& c) { return c.rare; })); }
  double common_accuracy() const { return rate(count([](const ClassRow& c) { return !c.rare; })); }
  // Share of answers whose class name is one of the injected hints.
  double trust_rate() const {
    std::size_t n = 0, t = 0;
    for (const auto& c : classes) n += c.n, t += c.trusted;
    return n ? double(t) / double(n) : 0.0;
  }
};

inline ArmResult evaluate_arm(const Artifacts& a, const std::vector<const SyntheticScene*>& scenes, Mode mode,
                              std::size_t k, std::size_t max_len) {
  const auto names = a.world->data.class_names();
  ArmResult r{mode, k, {}};
  for (std::size_t c = 0; c < names.size(); ++c)
    r.classes.push_back({c, names[c], a.world->data.manifest.is_rare(c), 0, 0, 0});
  for (const auto* s : scenes) {
    const AnswerResult ans = detect_and_answer(*s, a, k, mode, max_len);
    auto& row = r.classes[s->object_class];
    ++row.n;
    row.correct += ans.answered_class == s->object_class;
    if (ans.answered_class < names.size())
      row.trusted += std::find(ans.hints.begin(), ans.hints.end(), names[ans.answered_class]) != ans.hints.end();
  }
  return r;
}

// Fraction of scenes whose true class is within the top k, for k = 1..C.
struct DetectionCurve {
  std::vector<double> all, rare, common;
};

inline DetectionCurve detection_curve(const Artifacts& a, const std::vector<const SyntheticScene*>& scenes) {
  const auto names = a.world->data.class_names();
  const std::size_t C = names.size();
  std::vector<std::size_t> hit_all(C, 0), hit_rare(C, 0), hit_common(C, 0);
  std::size_t n_rare = 0, n_common = 0;
  for (const auto* s : scenes) {
    const auto d = top_k(score_map(*s, a.world->vision, *a.heads, *a.table), C, names);
    std::size_t rank = 0;
    while (d[rank].class_id != s->object_class) ++rank;
    const bool rare = a.world->data.manifest.is_rare(s->object_class);
    (rare ? n_rare : n_common)++;
    for (std::size_t k = rank; k < C; ++k) ++hit_all[k], ++(rare ? hit_rare : hit_common)[k];
  }
  DetectionCurve out;
  auto frac = [](std::size_t h, std::size_t n) { return n ? double(h) / double(n) : 0.0; };
  for (std::size_t k = 0; k < C; ++k) {
    out.all.push_back(frac(hit_all[k], scenes.size()));
    out.rare.push_back(frac(hit_rare[k], n_rare));
    out.common.push_back(frac(hit_common[k], n_common));
  }
  return out;
}

// Baseline versus refined tokens for one scene, teacher-forced on the
// reference answer so the object token position is fixed.
struct SceneProbe {
  std::string scene_id;
  std::size_t target = 0;             // class-name token id
  std::size_t object_position = 0;    // first answer token
  std::vector<std::size_t> patches;   // object patch positions
  std::vector<double> attention_baseline, attention_refined;
  std::vector<LensCell> lens_baseline, lens_refined;  // layer-major
};

inline SceneProbe probe_scene(const SyntheticScene& s, const Artifacts& a) {
  const VLMParams& p = a.vlm->params();
  const Tensor v = connector(p, a.world->vision.encode(s));
  const Tensor vh = adapt(*a.adapter, v, a.table->w);
  const TokenSequence seq = make_sequence(*a.tok, v.rows(), s.question, s.answer);
  SceneProbe out;
  out.scene_id = s.scene_id;
  out.target = a.tok->id(a.world->data.class_names()[s.object_class]);
  out.object_position = std::find(seq.roles.begin(), seq.roles.end(), Role::Answer) - seq.roles.begin();
  out.patches = s.object_tokens();
  const Trace tb = run(p, v, seq, true), tr = run(p, vh, seq, true);
  out.attention_baseline = attention_probe(tb, seq, out.object_position);
  out.attention_refined = attention_probe(tr, seq, out.object_position);
  out.lens_baseline = logit_lens(p, tb.hidden, out.patches, out.target);
  out.lens_refined = logit_lens(p, tr.hidden, out.patches, out.target);
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// Aggregates over scenes: median target rank over every (layer, object patch)
// cell, and the mean object-token attention mass on visual positions.
struct ProbeSummary {
  std::size_t scenes = 0, cells = 0;
  double median_rank_baseline = 0.0, median_rank_refined = 0.0;
  double attention_baseline = 0.0, attention_refined = 0.0;
  bool identical = true;  // refined probes equal the baseline ones everywhere
};

inline ProbeSummary probe_summary(const Artifacts& a, const std::vector<const SyntheticScene*>& scenes) {
  ProbeSummary out;
  std::vector<double> rb, rr;
  for (const auto* s : scenes) {
    const SceneProbe p = probe_scene(*s, a);
    ++out.scenes;
    for (std::size_t i = 0; i < p.lens_baseline.size(); ++i) {
      rb.push_back(double(p.lens_baseline[i].target_rank));
      rr.push_back(double(p.lens_refined[i].target_rank));
      out.identical = out.identical && p.lens_baseline[i].target_prob == p.lens_refined[i].target_prob;
    }
    double ab = 0.0, ar = 0.0;
    for (std::size_t l = 0; l < p.attention_baseline.size(); ++l) ab += p.attention_baseline[l], ar += p.attention_refined[l];
    out.attention_baseline += ab / double(p.attention_baseline.size());
    out.attention_refined += ar / double(p.attention_refined.size());
    out.identical = out.identical && p.attention_baseline == p.attention_refined;
  }
  out.cells = rb.size();
  if (out.scenes) out.attention_baseline /= double(out.scenes), out.attention_refined /= double(out.scenes);
  out.median_rank_baseline = median(rb);
  out.median_rank_refined = median(rr);
  return out;
}

struct ParamReport {
  std::size_t vlm = 0, adapter = 0, heads = 0, table = 0;
  double ratio() const { return vlm ? double(adapter + heads + table) / double(vlm) : 0.0; }
  bool within_budget() const { return ratio() < 0.1; }  // added weights under 10% of the VLM
};

inline ParamReport report_params(const VLMParams& vlm, const AdapterParams& adapter, const ProjectionHeads& heads,
                                 const ClassEmbeddingTable& table) {
  ParamReport r{param_count(vlm), param_count(adapter), 0, table.w.size()};
  ProjectionHeads::visit([&](const std::string&, const Tensor& t) { r.heads += t.size(); }, heads);
  return r;
}

inline std::string params_table(const ParamReport& r) {
  std::ostringstream os;
  os << "component,parameters\n"
     << "vlm," << r.vlm << "\nadapter," << r.adapter << "\nprojection_heads," << r.heads << "\nclass_table," << r.table
     << "\nadded_ratio," << std::setprecision(6) << r.ratio() << '\n';
  return os.str();
}

struct EvalReport {
  std::size_t k = 0;
  std::vector<ArmResult> arms;  // every mode at k
  DetectionCurve detection;
  ProbeSummary probe;
  ParamReport params;
  json checksums;

  const ArmResult& arm(Mode m) const {
    for (const auto& a : arms)
      if (a.mode == m) return a;
    throw ContractError("report has no arm '" + mode_name(m) + "'");
  }
};

inline json arm_json(const ArmResult& a) {
  json rows = json::array();
  for (const auto& c : a.classes)
    rows.push_back({{"class_id", c.class_id},
                    {"name", c.name},
                    {"rare", c.rare},
                    {"n", c.n},
                    {"correct", c.correct},
                    {"accuracy", ArmResult::rate({c.n, c.correct})},
                    {"trusted", c.trusted}});
  return {{"mode", mode_name(a.mode)},
          {"k", a.k},
          {"accuracy", a.accuracy()},
          {"rare_accuracy", a.rare_accuracy()},
          {"common_accuracy", a.common_accuracy()},
          {"trust_rate", uses_hints(a.mode) ? json(a.trust_rate()) : json(nullptr)},
          {"per_class", rows}};
}

inline json report_json(const EvalReport& r) {
  json arms = json::array();
  for (const auto& a : r.arms) arms.push_back(arm_json(a));
  return {{"k", r.k},
          {"arms", arms},
          {"detection_accuracy", {{"all", r.detection.all}, {"rare", r.detection.rare}, {"common", r.detection.common}}},
          {"probe",
           {{"scenes", r.probe.scenes},
            {"cells", r.probe.cells},
            {"median_rank_baseline", r.probe.median_rank_baseline},
            {"median_rank_refined", r.probe.median_rank_refined},
            {"attention_baseline", r.probe.attention_baseline},
            {"attention_refined", r.probe.attention_refined},
            {"identical", r.probe.identical}}},
          {"params",
           {{"vlm", r.params.vlm},
            {"adapter", r.params.adapter},
            {"projection_heads", r.params.heads},
            {"class_table", r.params.table},
            {"added_ratio", r.params.ratio()},
            {"within_budget", r.params.within_budget()}}},
          {"checksums", r.checksums}};
}

// ---- sweep -------------------------------------------------------------------

struct SweepRow {
  Mode mode = Mode::Baseline;
  std::size_t k = 0;
  ArmResult result;
  double detection_accuracy = 0.0;
};

// Arms that ignore k are evaluated once and repeated on every k row.
inline std::vector<SweepRow> ablation_sweep(const Artifacts& a, const std::vector<const SyntheticScene*>& scenes,
                                            const std::vector<Mode>& arms, const std::vector<std::size_t>& ks,
                                            std::size_t max_len) {
  const DetectionCurve det = detection_curve(a, scenes);
  std::vector<SweepRow> rows;
  for (auto m : arms) {
    const bool uses_k = m == Mode::HintsOnly || m == Mode::Full;
    std::optional<ArmResult> fixed;
    for (auto k : ks) {
      ArmResult r = uses_k ? evaluate_arm(a, scenes, m, k, max_len)
                           : (fixed ? *fixed : *(fixed = evaluate_arm(a, scenes, m, k, max_len)));
      r.k = k;
      rows.push_back({m, k, std::move(r), det.all.at(std::min(k, det.all.size()) - 1)});
    }
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "arm,k,accuracy,rare_accuracy,common_accuracy,trust_rate,detection_accuracy\n";
  for (const auto& r : rows) {
    os << mode_name(r.mode) << ',' << r.k << ',' << r.result.accuracy() << ',' << r.result.rare_accuracy() << ','
       << r.result.common_accuracy() << ',';
    if (uses_hints(r.mode)) os << r.result.trust_rate();
    os << ',' << r.detection_accuracy << '\n';
  }
  return os.str();
}

inline void write_sweep_plots(const std::vector<SweepRow>& rows, std::size_t k_default,
                              const std::filesystem::path& dir) {
  std::vector<double> ks;
  std::vector<Mode> arms;
  for (const auto& r : rows) {
    if (std::find(ks.begin(), ks.end(), double(r.k)) == ks.end()) ks.push_back(double(r.k));
    if (std::find(arms.begin(), arms.end(), r.mode) == arms.end()) arms.push_back(r.mode);
  }
  std::sort(ks.begin(), ks.end());
  std::vector<plot::Series> lines;
  plot::Series det{"detection accuracy", {}};
  for (auto m : arms) {
    plot::Series s{mode_name(m) + " (rare)", {}};
    for (double k : ks)
      for (const auto& r : rows)
        if (r.mode == m && double(r.k) == k) s.y.push_back(r.result.rare_accuracy());
    lines.push_back(std::move(s));
  }
  for (double k : ks)
    for (const auto& r : rows)
      if (r.mode == arms.front() && double(r.k) == k) det.y.push_back(r.detection_accuracy);
  lines.push_back(std::move(det));
  io::write_file(dir / "sweep_k.svg", plot::line_chart("Rare-class accuracy by k", "k", ks, lines));

  std::vector<std::string> cats;
  plot::Series all{"all classes", {}}, rare{"rare classes", {}};
  for (auto m : arms)
    for (const auto& r : rows)
      if (r.mode == m && r.k == k_default) {
        cats.push_back(mode_name(m));
        all.y.push_back(r.result.accuracy());
        rare.y.push_back(r.result.rare_accuracy());
      }
  io::write_file(dir / "sweep_arms.svg", plot::bar_chart("Answer accuracy at k=" + std::to_string(k_default), cats, {all, rare}));
}

// ---- probe files ---------------------------------------------------------------

inline plot::Gray16 lens_image(const std::vector<LensCell>& cells, std::size_t layers, std::size_t patches) {
  plot::Gray16 img{patches, layers, {}};
  for (const auto& c : cells) img.pixels.push_back(plot::quantize(c.target_prob));
  if (img.pixels.size() != layers * patches) throw DimensionError("lens grid does not match layers x patches");
  return img;
}

inline void write_probe(const SceneProbe& p, const std::filesystem::path& dir) {
  std::ostringstream att, lens;
  att.precision(17);
  lens.precision(17);
  att << "layer,baseline,refined\n";
  for (std::size_t l = 0; l < p.attention_baseline.size(); ++l)
    att << l << ',' << p.attention_baseline[l] << ',' << p.attention_refined[l] << '\n';
  lens << "variant,layer,position,target_prob,target_rank\n";
  for (const auto* cells : {&p.lens_baseline, &p.lens_refined})
    for (const auto& c : *cells)
      lens << (cells == &p.lens_baseline ? "baseline" : "refined") << ',' << c.layer << ',' << c.position << ','
           << c.target_prob << ',' << c.target_rank << '\n';
  io::write_file(dir / (p.scene_id + "_attention.csv"), att.str());
  io::write_file(dir / (p.scene_id + "_lens.csv"), lens.str());
  const std::size_t layers = p.patches.empty() ? 0 : p.lens_baseline.size() / p.patches.size();
  io::write_file(dir / (p.scene_id + "_lens_baseline.pgm"), plot::encode_pgm(lens_image(p.lens_baseline, layers, p.patches.size())));
  io::write_file(dir / (p.scene_id + "_lens_refined.pgm"), plot::encode_pgm(lens_image(p.lens_refined, layers, p.patches.size())));
}

// ---- staged pipeline ---------------------------------------------------------

enum class Stage { Data, Vlm, Embeddings, Adapter };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s = {Stage::Data, Stage::Vlm, Stage::Embeddings, Stage::Adapter};
  return s;
}

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Data: return "gen-data";
    case Stage::Vlm: return "pretrain-vlm";
    case Stage::Embeddings: return "train-embeddings";
    case Stage::Adapter: return "train-adapter";
  }
  return "?";
}

using LogFn = std::function<void(const std::string&)>;

// Owns an output directory. Each stage writes its files, records an input key
// and an output checksum in pipeline.json, and is skipped on the next run when
// both still match.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path out, LogFn log = {})
      : cfg_(std::move(cfg)), out_(std::move(out)), log_(std::move(log)) {
    cfg_.validate();
    std::filesystem::create_directories(out_);
    const auto ledger = out_ / "pipeline.json";
    if (std::filesystem::exists(ledger)) {
      try {
        ledger_ = json::parse(io::read_file(ledger));
      } catch (const json::exception& e) {
        throw ChecksumError("pipeline.json: " + std::string(e.what()));
      }
    }
    if (!ledger_.is_object()) ledger_ = json::object();
    io::write_file(out_ / "config.json", config_to_json(cfg_).dump(2) + "\n");
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out() const { return out_; }
  // Stages actually executed (rather than resumed) by this object.
  const std::vector<Stage>& executed() const { return executed_; }

  // Brings every stage up to and including `last` up to date; `force` reruns
  // `last` even when it is current.
  void ensure(Stage last, bool force = false) {
    for (Stage s : all_stages()) {
      const bool is_last = s == last;
      if (!ready_[int(s)]) step(s, force && is_last);
      else if (force && is_last) step(s, true);
      if (is_last) break;
    }
  }

  Artifacts artifacts() {
    ensure(Stage::Adapter);
    return {&world_, vlm_.get(), &tok_, &heads_, &table_, &adapter_, table_sum_, adapter_sum_};
  }

  const World& world() {
    ensure(Stage::Data);
    return world_;
  }

  const FrozenVlm& vlm() {
    ensure(Stage::Vlm);
    return *vlm_;
  }

  json checksums() const {
    json j = json::object();
    for (Stage s : all_stages())
      if (ledger_.contains(stage_name(s))) j[stage_name(s)] = ledger_[stage_name(s)]["checksum"];
    return j;
  }

  EvalReport evaluate() {
    const Artifacts a = artifacts();
    const auto test = world_.data.test();
    EvalReport r;
    r.k = cfg_.inference.k;
    for (Mode m : all_modes()) {
      say("eval: " + mode_name(m));
      r.arms.push_back(evaluate_arm(a, test, m, r.k, cfg_.inference.max_answer_len));
    }
    r.detection = detection_curve(a, test);
    say("eval: probes");
    r.probe = probe_summary(a, test);
    r.params = report_params(vlm_->params(), adapter_, heads_, table_);
    r.checksums = checksums();
    vlm_->verify();
    io::write_file(out_ / "report.json", report_json(r).dump(2) + "\n");
    io::write_file(out_ / "params.csv", params_table(r.params));
    return r;
  }

  std::vector<SweepRow> sweep() {
    const Artifacts a = artifacts();
    auto rows = ablation_sweep(a, world_.data.test(), cfg_.sweep.arms, cfg_.sweep.k_values, cfg_.inference.max_answer_len);
    io::write_file(out_ / "sweep.csv", sweep_csv(rows));
    write_sweep_plots(rows, cfg_.inference.k, out_);
    return rows;
  }

  // Writes probe/<scene>_*.csv and .pgm for the given test scenes (default:
  // the first `probe_scenes` of the test split).
  std::vector<SceneProbe> probe(std::vector<std::string> scene_ids = {}) {
    const Artifacts a = artifacts();
    const auto test = world_.data.test();
    if (scene_ids.empty())
      for (std::size_t i = 0; i < std::min(cfg_.probe_scenes, test.size()); ++i) scene_ids.push_back(test[i]->scene_id);
    std::vector<SceneProbe> out;
    const auto dir = out_ / "probe";
    std::filesystem::create_directories(dir);
    for (const auto& id : scene_ids) {
      const auto it = std::find_if(world_.data.scenes.begin(), world_.data.scenes.end(),
                                   [&](const SyntheticScene& s) { return s.scene_id == id; });
      if (it == world_.data.scenes.end()) throw ConfigError("unknown scene id '" + id + "'");
      out.push_back(probe_scene(*it, a));
      write_probe(out.back(), dir);
    }
    return out;
  }

 private:
  std::string key_for(Stage s) const {
    const json c = config_to_json(cfg_);
    json k = {{"stage", stage_name(s)}, {"seed", cfg_.seed}};
    switch (s) {
      case Stage::Data:
        k["data"] = c["data"];
        k["textpool_crc"] = io::crc32(io::read_file(cfg_.textpool_path()));
        break;
      case Stage::Vlm:
        k["fixture"] = c["fixture"];
        k["max_answer_len"] = cfg_.inference.max_answer_len;
        break;
      case Stage::Embeddings:
        k["embedding"] = c["embedding"];
        k["dim"] = cfg_.fixture.vlm.dim;
        break;
      case Stage::Adapter:
        k["adapter"] = c["adapter"];
        break;
    }
    for (Stage up : all_stages()) {
      if (up == s) break;
      k["upstream"][stage_name(up)] = ledger_[stage_name(up)]["checksum"];
    }
    std::ostringstream os;
    os << std::hex << std::setw(8) << std::setfill('0') << io::crc32(k.dump());
    return os.str();
  }

  std::vector<std::filesystem::path> files(Stage s) const {
    switch (s) {
      case Stage::Data: {
        std::vector<std::filesystem::path> f = {out_ / "data" / "manifest.json", out_ / "data" / "textpool.json"};
        if (std::filesystem::exists(f[0])) {
          try {
            const json m = json::parse(io::read_file(f[0]));
            for (const auto* split : {"train", "test"})
              for (const auto& rec : m.at(split))
                f.push_back(out_ / "data" / "scenes" / (rec.at("id").get<std::string>() + ".bin"));
          } catch (const json::exception&) {
          }
        }
        return f;
      }
      case Stage::Vlm: return {out_ / "vlm.ckpt", out_ / "vocab.json", out_ / "fixture_log.csv"};
      case Stage::Embeddings: return {out_ / "classes.ckpt", out_ / "embedding_log.csv"};
      case Stage::Adapter: return {out_ / "adapter.ckpt", out_ / "adapter_log.csv"};
    }
    return {};
  }

  std::uint32_t files_checksum(Stage s) const {
    std::string all;
    for (const auto& f : files(s)) all += io::read_file(f);
    return io::crc32(all);
  }

  void step(Stage s, bool force) {
    const std::string name = stage_name(s), key = key_for(s);
    const auto fs = files(s);
    const bool present = std::all_of(fs.begin(), fs.end(), [](const auto& f) { return std::filesystem::exists(f); });
    const json* rec = ledger_.contains(name) ? &ledger_[name] : nullptr;
    if (!force && rec && (*rec)["key"] == key && present) {
      if (files_checksum(s) != (*rec)["checksum"].get<std::uint32_t>())
        throw ChecksumError(name + ": artifacts in " + out_.string() +
                            " differ from the recorded checksum; delete them to rebuild");
      say(name + ": up to date");
      load(s);
      return;
    }
    say(name + ": running");
    try {
      run(s);
    } catch (const GateError& e) {
      io::write_file(out_ / "gate_failure.txt", name + "\n" + e.what() + "\n");
      throw;
    }
    ledger_[name] = {{"key", key}, {"checksum", files_checksum(s)}, {"info", info_}};
    io::write_file(out_ / "pipeline.json", ledger_.dump(2) + "\n");
    // Downstream records are stale once this stage changed.
    bool after = false;
    for (Stage d : all_stages()) {
      if (after) ready_[int(d)] = false;
      after = after || d == s;
    }
    executed_.push_back(s);
    load(s);
  }

  void run(Stage s) {
    const std::uint64_t seed = cfg_.seed;
    info_ = json::object();
    switch (s) {
      case Stage::Data: {
        const Dataset ds = generate_dataset(cfg_.dataset(), TextPool::load(cfg_.textpool_path()));
        std::filesystem::remove_all(out_ / "data");
        save_dataset(ds, out_ / "data");
        info_ = {{"scenes", ds.scenes.size()}, {"train", ds.manifest.train_scenes.size()}};
        break;
      }
      case Stage::Vlm: {
        FixtureConfig fc = cfg_.fixture;
        fc.max_answer_len = cfg_.inference.max_answer_len;
        std::ostringstream log;
        log.precision(9);
        log << "epoch,loss\n";
        const FixtureResult r = pretrain_fixture(world_, fc, seed, [&](std::size_t e, double l) {
          log << e << ',' << l << '\n';
          say("pretrain-vlm: epoch " + std::to_string(e) + " loss " + std::to_string(l));
        });
        save_vlm(r.params, out_ / "vlm.ckpt");
        io::write_file(out_ / "vocab.json", r.tokenizer.to_json().dump(1) + "\n");
        io::write_file(out_ / "fixture_log.csv", log.str());
        info_ = {{"common_accuracy", r.common_accuracy}, {"rare_accuracy", r.rare_accuracy}};
        break;
      }
      case Stage::Embeddings: {
        const EmbeddingResult r = train_class_embeddings(world_, cfg_.fixture.vlm.dim, cfg_.embedding, seed);
        vlm_->verify();
        save_classes(r.heads, r.table, out_ / "classes.ckpt");
        io::write_file(out_ / "embedding_log.csv", embedding_log_csv(r.log));
        info_ = {{"gate_accuracy", r.gate.accuracy}, {"gate_rare_recall", r.gate.rare_recall}, {"perturbed", r.perturbed}};
        break;
      }
      case Stage::Adapter: {
        const std::uint32_t before = vlm_->checksum();
        const AdapterResult r = train_adapter(world_, *vlm_, tok_, table_, cfg_.adapter, seed);
        if (checksum(vlm_->params()) != before) throw ContractError("VLM checksum changed during adapter training");
        save_adapter(r.params, table_sum_, out_ / "adapter.ckpt");
        std::ostringstream log;
        log.precision(9);
        log << "epoch,L_rec,L_autoreg\n";
        for (const auto& e : r.log) log << e.epoch << ',' << e.l_rec << ',' << e.l_autoreg << '\n';
        io::write_file(out_ / "adapter_log.csv", log.str());
        info_ = {{"l_autoreg_init", r.log.front().l_autoreg}, {"l_autoreg_final", r.log.back().l_autoreg}};
        break;
      }
    }
  }

  // Every later stage reads its inputs back from disk, so resumed and
  // uninterrupted runs see identical bytes.
  void load(Stage s) {
    switch (s) {
      case Stage::Data:
        world_ = World::build(load_dataset(out_ / "data"));
        break;
      case Stage::Vlm: {
        vlm_ = std::make_unique<FrozenVlm>(load_vlm(out_ / "vlm.ckpt"));
        try {
          tok_ = Tokenizer::from_json(json::parse(io::read_file(out_ / "vocab.json")));
        } catch (const json::exception& e) {
          throw ChecksumError("vocab.json: " + std::string(e.what()));
        }
        if (tok_.size() != vlm_->params().config.vocab) throw ChecksumError("vocab.json does not match vlm.ckpt");
        break;
      }
      case Stage::Embeddings: {
        std::tie(heads_, table_) = load_classes(out_ / "classes.ckpt");
        if (table_.dim() != vlm_->params().config.dim) throw ChecksumError("classes.ckpt width differs from the VLM");
        table_sum_ = checksum(heads_, table_);
        break;
      }
      case Stage::Adapter:
        adapter_ = load_adapter(out_ / "adapter.ckpt", table_sum_);
        adapter_sum_ = checksum(adapter_, table_sum_);
        break;
    }
    ready_[int(s)] = true;
  }

  void say(const std::string& m) const {
    if (log_) log_(m);
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  LogFn log_;
  json ledger_;
  json info_;
  bool ready_[4] = {false, false, false, false};
  std::vector<Stage> executed_;

  World world_;
  Tokenizer tok_;
  std::unique_ptr<FrozenVlm> vlm_;
  ProjectionHeads heads_;
  ClassEmbeddingTable table_;
  AdapterParams adapter_;
  std::uint32_t table_sum_ = 0, adapter_sum_ = 0;
};

// gen-data through eval, resuming whatever is already current in `out`.
inline EvalReport run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out, LogFn log = {}) {
  Pipeline p(cfg, out, std::move(log));
  return p.evaluate();
}

}  // namespace rarelens

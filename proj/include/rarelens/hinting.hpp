#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "rarelens/adapter.hpp"
#include "rarelens/class_embeddings.hpp"
#include "rarelens/prompt.hpp"
#include "rarelens/synth_world.hpp"
#include "rarelens/toy_vlm.hpp"

namespace rarelens {

struct ScoreMap {
  Tensor s;                         // [M x C] cosine scores
  std::vector<double> r;            // per-class maximum over patches
  std::vector<std::size_t> argmax;  // patch attaining r_c (lowest index on ties)
};

inline void require_paired(const ProjectionHeads& heads, const ClassEmbeddingTable& table) {
  if (heads_checksum(heads) != table.heads_checksum)
    throw ChecksumError("projection heads and class table come from different training runs");
}

// Cosine of every projected patch token against every prototype.
inline ScoreMap score_map(const Tensor& patch_tokens, const ProjectionHeads& heads, const ClassEmbeddingTable& table) {
  require_paired(heads, table);
  const Tensor h = project_visual(heads, patch_tokens);
  require_nondegenerate(table.w);
  const std::size_t M = h.rows(), C = table.size();
  ScoreMap out{Tensor(Shape{M, C}), std::vector<double>(C, -INFINITY), std::vector<std::size_t>(C, 0)};
  for (std::size_t i = 0; i < M; ++i) {
    if (norm(h.row(i)) == 0.0) throw DegenerateVectorError("projected patch token " + std::to_string(i) + " has zero norm");
    for (std::size_t c = 0; c < C; ++c) {
      const double v = cosine(h.row(i), table.w.row(c));
      out.s(i, c) = v;
      if (v > out.r[c]) out.r[c] = v, out.argmax[c] = i;
    }
  }
  return out;
}

inline ScoreMap score_map(const SyntheticScene& scene, const VisionEncoder& vision, const ProjectionHeads& heads,
                          const ClassEmbeddingTable& table) {
  return score_map(vision.encode(scene), heads, table);
}

struct Detection {
  std::size_t class_id = 0;
  std::string name;
  double score = 0.0;
  std::size_t patch = 0;
};

using DetectionResult = std::vector<Detection>;

// Highest r_c first; equal scores keep ascending class id. k > C gives all.
inline DetectionResult top_k(const ScoreMap& m, std::size_t k, const std::vector<std::string>& names) {
  if (k == 0) throw ContractError("top_k needs k >= 1");
  if (names.size() != m.r.size()) throw DimensionError("one class name per score column required");
  std::vector<std::size_t> ids(m.r.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return m.r[a] > m.r[b]; });
  ids.resize(std::min(k, ids.size()));
  DetectionResult out;
  for (auto c : ids) out.push_back({c, names[c], m.r[c], m.argmax[c]});
  return out;
}

inline bool detected(const DetectionResult& d, std::size_t class_id) {
  return std::any_of(d.begin(), d.end(), [&](const Detection& x) { return x.class_id == class_id; });
}

inline std::vector<std::string> detection_names(const DetectionResult& d) {
  std::vector<std::string> out;
  for (const auto& x : d) out.push_back(x.name);
  return out;
}

inline std::string enrich_prompt(const std::string& prompt, const DetectionResult& d) {
  return enrich_prompt(prompt, detection_names(d));
}

enum class Mode { Baseline, VisualOnly, HintsOnly, AllClassesHints, Full };

inline const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> m = {Mode::Baseline, Mode::VisualOnly, Mode::HintsOnly, Mode::AllClassesHints,
                                      Mode::Full};
  return m;
}

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Baseline: return "baseline";
    case Mode::VisualOnly: return "visual-only";
    case Mode::HintsOnly: return "hints-only";
    case Mode::AllClassesHints: return "all-classes-hints";
    case Mode::Full: return "full";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (auto m : all_modes())
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown mode '" + s + "'");
}

// Refined tokens use the adapter; hints come from detection, or from every
// class name (in id order) for the all-classes arm.
inline bool uses_refinement(Mode m) { return m == Mode::VisualOnly || m == Mode::AllClassesHints || m == Mode::Full; }
inline bool uses_hints(Mode m) { return m == Mode::HintsOnly || m == Mode::AllClassesHints || m == Mode::Full; }

// Everything inference needs, already loaded and pairing-checked.
struct Artifacts {
  const World* world = nullptr;
  const FrozenVlm* vlm = nullptr;
  const Tokenizer* tok = nullptr;
  const ProjectionHeads* heads = nullptr;
  const ClassEmbeddingTable* table = nullptr;
  const AdapterParams* adapter = nullptr;
  std::uint32_t table_checksum = 0;
  std::uint32_t adapter_checksum = 0;
};

struct AnswerResult {
  std::string prompt;
  std::vector<std::string> hints;
  TokenSequence generated;
  std::string text;
  std::size_t answered_class = std::size_t(-1);
  DetectionResult detection;  // top-k, computed in every mode
  RefinedTokens tokens;       // the visual tokens actually fed to the decoder
};

inline AnswerResult detect_and_answer(const SyntheticScene& scene, const Artifacts& a, std::size_t k, Mode mode,
                                      std::size_t max_len = 3) {
  const auto names = a.world->data.class_names();
  AnswerResult out;
  out.detection = top_k(score_map(scene, a.world->vision, *a.heads, *a.table), k, names);
  const VLMParams& p = a.vlm->params();
  Tensor v = connector(p, a.world->vision.encode(scene));
  if (uses_refinement(mode)) v = adapt(*a.adapter, v, a.table->w);
  out.tokens = {v, scene.scene_id, a.table_checksum, uses_refinement(mode) ? a.adapter_checksum : 0};
  if (mode == Mode::AllClassesHints) out.hints = names;
  else if (uses_hints(mode)) out.hints = detection_names(out.detection);
  out.prompt = enrich_prompt(scene.question, out.hints);
  out.generated = generate(p, v, make_sequence(*a.tok, v.rows(), out.prompt), max_len, a.tok->eos());
  out.text = a.tok->decode(out.generated.ids);
  out.answered_class = answered_class(*a.tok, out.generated, names);
  return out;
}

}  // namespace rarelens

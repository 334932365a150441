#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rarelens/errors.hpp"
#include "rarelens/io.hpp"
#include "rarelens/random.hpp"
#include "rarelens/tensor.hpp"

namespace rarelens {

using json = nlohmann::json;

struct ClassSpec {
  std::size_t class_id = 0;
  std::string name;
  Tensor signature;  // unit-norm planted direction, [d_v]
  double frequency_weight = 1.0;
};

// Patch-index rectangle, rows [row0, row1) x cols [col0, col1).
struct BBox {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  std::size_t area() const { return row1 > row0 && col1 > col0 ? (row1 - row0) * (col1 - col0) : 0; }
  bool contains(std::size_t r, std::size_t c) const { return r >= row0 && r < row1 && c >= col0 && c < col1; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct SyntheticScene {
  std::string scene_id;
  Tensor patch_grid;  // [g, g, d_v]
  std::size_t object_class = 0;
  BBox bbox;
  std::string question;
  std::string answer;

  std::size_t grid() const { return patch_grid.shape()[0]; }
  std::size_t dim() const { return patch_grid.shape()[2]; }
  // Flattened token indices (row-major) covered by the bbox.
  std::vector<std::size_t> object_tokens() const {
    std::vector<std::size_t> out;
    for (std::size_t r = bbox.row0; r < bbox.row1; ++r)
      for (std::size_t c = bbox.col0; c < bbox.col1; ++c) out.push_back(r * grid() + c);
    return out;
  }
};

struct ClassTexts {
  std::vector<std::string> lexical_variants;  // first entry is the canonical name
  std::vector<std::string> attribute_phrases;

  // Distinct phrases in pool order.
  std::vector<std::string> phrases() const {
    std::vector<std::string> out;
    for (const auto* list : {&lexical_variants, &attribute_phrases})
      for (const auto& p : *list)
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    return out;
  }
};

// Read-only text descriptions per class.
class TextPool {
 public:
  TextPool() = default;
  explicit TextPool(std::vector<ClassTexts> classes) : classes_(std::move(classes)) {
    for (std::size_t c = 0; c < classes_.size(); ++c)
      if (classes_[c].lexical_variants.empty())
        throw ConfigError("class " + std::to_string(c) + " has no lexical variants");
  }

  static TextPool from_json(const json& j) {
    std::vector<ClassTexts> classes;
    for (const auto& c : j.at("classes")) {
      ClassTexts t;
      t.lexical_variants = c.at("lexical_variants").get<std::vector<std::string>>();
      if (c.contains("attribute_phrases"))
        t.attribute_phrases = c.at("attribute_phrases").get<std::vector<std::string>>();
      if (c.contains("name")) {
        const auto name = c.at("name").get<std::string>();
        if (t.lexical_variants.empty() || t.lexical_variants.front() != name)
          t.lexical_variants.insert(t.lexical_variants.begin(), name);
      }
      classes.push_back(std::move(t));
    }
    return TextPool(std::move(classes));
  }

  static TextPool load(const std::filesystem::path& path) {
    try {
      return from_json(json::parse(io::read_file(path)));
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }

  json to_json() const {
    json arr = json::array();
    for (const auto& c : classes_)
      arr.push_back({{"name", c.lexical_variants.front()},
                     {"lexical_variants", c.lexical_variants},
                     {"attribute_phrases", c.attribute_phrases}});
    return {{"classes", arr}};
  }

  // The first `n` classes.
  TextPool head(std::size_t n) const {
    if (n > classes_.size())
      throw ConfigError("text pool has " + std::to_string(classes_.size()) + " classes, " +
                        std::to_string(n) + " requested");
    return TextPool(std::vector<ClassTexts>(classes_.begin(), classes_.begin() + static_cast<long>(n)));
  }

  std::size_t size() const { return classes_.size(); }
  const ClassTexts& operator[](std::size_t c) const { return classes_.at(c); }
  const std::string& canonical_name(std::size_t c) const { return classes_.at(c).lexical_variants.front(); }

 private:
  std::vector<ClassTexts> classes_;
};

inline std::filesystem::path default_textpool_path() {
#ifdef RARELENS_DATA_DIR
  return std::filesystem::path(RARELENS_DATA_DIR) / "textpool.json";
#else
  return "data/textpool.json";
#endif
}

// Which classes are rare and how many training scenes each class gets.
struct ImbalanceProfile {
  std::size_t rare_classes = 0;  // the last `rare_classes` ids are rare
  std::size_t rare_count = 5;
  std::size_t common_count = 200;
  std::size_t test_per_class = 20;

  // Default: one third of the classes rare.
  static ImbalanceProfile standard(std::size_t num_classes) { return {num_classes / 3, 5, 200, 20}; }
  static ImbalanceProfile balanced(std::size_t per_class, std::size_t test_per_class) {
    return {0, per_class, per_class, test_per_class};
  }

  bool is_rare(std::size_t c, std::size_t num_classes) const { return c + rare_classes >= num_classes; }
  std::size_t count(std::size_t c, std::size_t num_classes) const {
    return is_rare(c, num_classes) ? rare_count : common_count;
  }
};

struct DatasetConfig {
  std::size_t num_classes = 12;
  std::size_t grid = 4;
  std::size_t d_v = 32;
  std::size_t d_t = 32;
  ImbalanceProfile profile = ImbalanceProfile::standard(12);
  double signal = 1.0;        // object patch = signal * signature + noise
  double noise = 0.1;         // per-coordinate stddev
  double max_signature_cosine = 0.3;
  bool identity_vision_transform = false;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  DatasetConfig config;
  std::vector<ClassSpec> classes;
  std::vector<std::size_t> train_counts;  // N_c
  std::vector<std::size_t> train_scenes;  // indices into Dataset::scenes
  std::vector<std::size_t> test_scenes;

  bool is_rare(std::size_t c) const { return config.profile.is_rare(c, classes.size()); }
};

inline const std::vector<std::string>& question_templates() {
  static const std::vector<std::string> q = {
      "what is the object inside the red rectangle ?",
      "please describe the object inside the red rectangle in the image .",
      "which object is in the highlighted region ?",
  };
  return q;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<SyntheticScene> scenes;
  TextPool pool;

  std::size_t num_classes() const { return manifest.classes.size(); }
  const std::string& class_name(std::size_t c) const { return manifest.classes.at(c).name; }
  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto& c : manifest.classes) out.push_back(c.name);
    return out;
  }
  std::vector<const SyntheticScene*> train() const { return pick(manifest.train_scenes); }
  std::vector<const SyntheticScene*> test() const { return pick(manifest.test_scenes); }

 private:
  std::vector<const SyntheticScene*> pick(const std::vector<std::size_t>& idx) const {
    std::vector<const SyntheticScene*> out;
    for (auto i : idx) out.push_back(&scenes[i]);
    return out;
  }
};

namespace detail {

inline Tensor random_unit(Rng& rng, std::size_t d) {
  Tensor v = rng.normal_tensor({d}, 1.0);
  const double n = norm(v.data());
  for (auto& x : v.data()) x /= n;
  return v;
}

inline std::string scene_name(std::size_t i) {
  std::ostringstream os;
  os << 's';
  os.width(5);
  os.fill('0');
  os << i;
  return os.str();
}

inline SyntheticScene make_scene(std::size_t index, const ClassSpec& cls, const DatasetConfig& cfg, Rng& rng) {
  const std::size_t g = cfg.grid, d = cfg.d_v;
  SyntheticScene s;
  s.scene_id = scene_name(index);
  s.object_class = cls.class_id;
  const std::size_t max_side = std::max<std::size_t>(1, g / 2);
  const std::size_t h = 1 + rng.index(max_side), w = 1 + rng.index(max_side);
  s.bbox.row0 = rng.index(g - h + 1);
  s.bbox.col0 = rng.index(g - w + 1);
  s.bbox.row1 = s.bbox.row0 + h;
  s.bbox.col1 = s.bbox.col0 + w;
  s.patch_grid = Tensor(Shape{g, g, d});
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c) {
      const bool inside = s.bbox.contains(r, c);
      for (std::size_t k = 0; k < d; ++k) {
        double v = rng.normal(0.0, cfg.noise);
        if (inside) v += cfg.signal * cls.signature[k];
        s.patch_grid[(r * g + c) * d + k] = static_cast<double>(static_cast<float>(v));
      }
    }
  s.question = question_templates()[rng.index(question_templates().size())];
  s.answer = cls.name;
  return s;
}

}  // namespace detail

// Builds the imbalanced benchmark. Deterministic for a fixed config.
inline Dataset generate_dataset(const DatasetConfig& cfg, const TextPool& full_pool) {
  if (cfg.num_classes < 2) throw ConfigError("need at least 2 classes");
  if (cfg.grid < 4) throw ConfigError("grid must be at least 4");
  if (cfg.d_v < 8) throw ConfigError("d_v must be at least 8");
  if (cfg.profile.rare_classes >= cfg.num_classes) throw ConfigError("at least one class must be common");
  Dataset ds;
  ds.pool = full_pool.head(cfg.num_classes);
  ds.manifest.config = cfg;

  Rng sig_rng(derive_seed(cfg.seed, "signatures"));
  std::vector<Tensor> sigs;
  std::size_t draws = 0;
  while (sigs.size() < cfg.num_classes) {
    if (draws++ >= 10 * cfg.num_classes)
      throw ConfigError("infeasible config: cannot place " + std::to_string(cfg.num_classes) +
                        " signatures with pairwise cosine <= " + std::to_string(cfg.max_signature_cosine) +
                        " in d_v=" + std::to_string(cfg.d_v));
    Tensor cand = round_to_f32(detail::random_unit(sig_rng, cfg.d_v));
    bool ok = true;
    for (const auto& s : sigs) ok = ok && cosine(s, cand) <= cfg.max_signature_cosine;
    if (ok) sigs.push_back(std::move(cand));
  }

  double total = 0.0;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) total += double(cfg.profile.count(c, cfg.num_classes));
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    const std::size_t n = cfg.profile.count(c, cfg.num_classes);
    ds.manifest.classes.push_back({c, ds.pool.canonical_name(c), sigs[c], double(n) / total});
    ds.manifest.train_counts.push_back(n);
  }

  // Interleave classes through a seeded permutation so scene ids carry no
  // class information.
  std::vector<std::size_t> train_labels, test_labels;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    train_labels.insert(train_labels.end(), ds.manifest.train_counts[c], c);
    test_labels.insert(test_labels.end(), cfg.profile.test_per_class, c);
  }
  Rng scene_rng(derive_seed(cfg.seed, "scenes"));
  scene_rng.shuffle(train_labels);
  scene_rng.shuffle(test_labels);
  for (auto c : train_labels) {
    ds.manifest.train_scenes.push_back(ds.scenes.size());
    ds.scenes.push_back(detail::make_scene(ds.scenes.size(), ds.manifest.classes[c], cfg, scene_rng));
  }
  for (auto c : test_labels) {
    ds.manifest.test_scenes.push_back(ds.scenes.size());
    ds.scenes.push_back(detail::make_scene(ds.scenes.size(), ds.manifest.classes[c], cfg, scene_rng));
  }
  return ds;
}

// Frozen surrogate vision foundation model: flatten the grid to M = g*g
// tokens and apply a fixed orthogonal transform.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  explicit VisionEncoder(Tensor transform) : transform_(std::move(transform)) {}

  static VisionEncoder from_seed(std::size_t d_v, std::uint64_t seed, bool identity = false) {
    if (identity) return VisionEncoder(Tensor::identity(d_v));
    // Modified Gram-Schmidt on a Gaussian matrix.
    Rng rng(derive_seed(seed, "vision-encoder"));
    Tensor q = rng.normal_tensor({d_v, d_v}, 1.0);
    for (std::size_t i = 0; i < d_v; ++i) {
      auto ri = q.row(i);
      for (std::size_t j = 0; j < i; ++j) {
        const double p = dot(ri, q.row(j));
        for (std::size_t k = 0; k < d_v; ++k) ri[k] -= p * q(j, k);
      }
      const double n = norm(ri);
      for (auto& v : ri) v /= n;
    }
    return VisionEncoder(std::move(q));
  }

  std::size_t dim() const { return transform_.rows(); }
  const Tensor& transform() const { return transform_; }

  Tensor encode_grid(const Tensor& grid) const {
    const std::size_t d = grid.shape().back();
    if (d != dim()) throw DimensionError("vision encoder expects d_v=" + std::to_string(dim()));
    const std::size_t m = grid.size() / d;
    return matmul(grid.reshaped({m, d}), transform_);
  }

  Tensor encode(const SyntheticScene& s) const { return encode_grid(s.patch_grid); }

 private:
  Tensor transform_;
};

// Mean of the encoded patch vectors inside the scene's bbox.
inline Tensor crop_and_pool(const VisionEncoder& enc, const SyntheticScene& s) {
  if (s.bbox.area() == 0) throw ContractError("degenerate bbox in scene " + s.scene_id);
  const Tensor tokens = enc.encode(s);
  const auto idx = s.object_tokens();
  Tensor out(Shape{tokens.cols()});
  for (auto i : idx)
    for (std::size_t k = 0; k < tokens.cols(); ++k) out[k] += tokens(i, k);
  for (auto& v : out.data()) v /= static_cast<double>(idx.size());
  return out;
}

inline std::vector<std::string> lowercase_words(const std::string& phrase) {
  std::vector<std::string> out;
  std::istringstream is(phrase);
  std::string w;
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    out.push_back(w);
  }
  return out;
}

// Frozen surrogate text encoder. Each word has a fixed row: a class-anchor
// component for every class whose pool uses the word, plus a seeded
// per-word perturbation. A phrase is the normalized mean of its word rows.
class TextEncoder {
 public:
  TextEncoder() = default;

  TextEncoder(const TextPool& pool, std::size_t d_t, std::uint64_t seed, double anchor_weight = 1.0,
              double word_noise = 0.6)
      : d_t_(d_t), seed_(seed), word_noise_(word_noise) {
    Rng rng(derive_seed(seed, "text-anchors"));
    std::vector<Tensor> anchors;
    for (std::size_t c = 0; c < pool.size(); ++c) anchors.push_back(detail::random_unit(rng, d_t));
    std::map<std::string, std::set<std::size_t>> owners;
    for (std::size_t c = 0; c < pool.size(); ++c)
      for (const auto& p : pool[c].phrases())
        for (const auto& w : lowercase_words(p)) owners[w].insert(c);
    for (const auto& [word, classes] : owners) {
      Tensor row = noise_row(word);
      for (auto c : classes)
        for (std::size_t k = 0; k < d_t; ++k)
          row[k] += anchor_weight * anchors[c][k] / static_cast<double>(classes.size());
      table_.emplace(word, std::move(row));
    }
  }

  std::size_t dim() const { return d_t_; }

  Tensor encode(const std::string& phrase) const {
    const auto words = lowercase_words(phrase);
    if (words.empty()) throw ContractError("cannot encode an empty phrase");
    Tensor out(Shape{d_t_});
    for (const auto& w : words) {
      const auto it = table_.find(w);
      const Tensor row = it != table_.end() ? it->second : noise_row(w);
      for (std::size_t k = 0; k < d_t_; ++k) out[k] += row[k];
    }
    const double n = norm(out.data());
    if (n == 0.0) throw DegenerateVectorError("phrase '" + phrase + "' encodes to zero");
    for (auto& v : out.data()) v /= n;
    return out;
  }

 private:
  Tensor noise_row(const std::string& word) const {
    Rng rng(fnv1a(word, seed_));
    return rng.normal_tensor({d_t_}, word_noise_ / std::sqrt(static_cast<double>(d_t_)));
  }

  std::size_t d_t_ = 0;
  std::uint64_t seed_ = 0;
  double word_noise_ = 0.6;
  std::map<std::string, Tensor> table_;
};

// Per-class quotas q_c proportional to 1/N_c summing to `budget`, rounded by
// largest remainder (ties to the lower class id). A class left at zero
// borrows one unit so every class keeps at least one description.
inline std::vector<std::size_t> resample_quotas(const std::vector<std::size_t>& counts, std::size_t budget) {
  const std::size_t C = counts.size();
  if (C == 0) throw ConfigError("no classes to resample");
  if (budget < C) throw ConfigError("text budget must be at least the number of classes");
  double total = 0.0;
  for (auto n : counts) {
    if (n == 0) throw ConfigError("class with zero visual samples");
    total += 1.0 / static_cast<double>(n);
  }
  std::vector<std::size_t> q(C);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double exact = static_cast<double>(budget) * (1.0 / static_cast<double>(counts[c])) / total;
    q[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += q[c];
    rem.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < budget; ++i, ++assigned) ++q[rem[i % C].second];
  for (std::size_t c = 0; c < C; ++c) {
    if (q[c] > 0) continue;
    // Donor: largest quota; among ties the most frequent class, which keeps
    // quotas monotone in 1/N_c.
    std::size_t donor = 0;
    for (std::size_t d = 1; d < C; ++d)
      if (q[d] > q[donor] || (q[d] == q[donor] && counts[d] > counts[donor])) donor = d;
    --q[donor];
    ++q[c];
  }
  return q;
}

struct TextSample {
  std::size_t class_id;
  std::string phrase;
  friend bool operator==(const TextSample&, const TextSample&) = default;
};

// Frequency-aware re-sampling of class descriptions: rare classes receive
// larger quotas and therefore more distinct phrases. Within a class, phrases
// are drawn without replacement in a seeded order, cycling once exhausted.
inline std::vector<TextSample> adaptive_resample(const TextPool& pool, const std::vector<std::size_t>& counts,
                                                 std::size_t budget, std::uint64_t seed) {
  if (pool.size() != counts.size()) throw ConfigError("pool/count class mismatch");
  const auto q = resample_quotas(counts, budget);
  Rng rng(derive_seed(seed, "resample"));
  std::vector<TextSample> out;
  for (std::size_t c = 0; c < pool.size(); ++c) {
    auto phrases = pool[c].phrases();
    if (phrases.empty()) throw ConfigError("empty text pool for class " + std::to_string(c));
    rng.shuffle(phrases);
    for (std::size_t i = 0; i < q[c]; ++i) out.push_back({c, phrases[i % phrases.size()]});
  }
  return out;
}

// ---- persistence: manifest.json, scenes/<id>.bin, textpool.json ----

inline json dataset_config_json(const DatasetConfig& c) {
  return {{"num_classes", c.num_classes},
          {"grid", c.grid},
          {"d_v", c.d_v},
          {"d_t", c.d_t},
          {"rare_classes", c.profile.rare_classes},
          {"rare_count", c.profile.rare_count},
          {"common_count", c.profile.common_count},
          {"test_per_class", c.profile.test_per_class},
          {"signal", c.signal},
          {"noise", c.noise},
          {"max_signature_cosine", c.max_signature_cosine},
          {"identity_vision_transform", c.identity_vision_transform},
          {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig c;
  c.num_classes = j.at("num_classes");
  c.grid = j.at("grid");
  c.d_v = j.at("d_v");
  c.d_t = j.at("d_t");
  c.profile.rare_classes = j.at("rare_classes");
  c.profile.rare_count = j.at("rare_count");
  c.profile.common_count = j.at("common_count");
  c.profile.test_per_class = j.at("test_per_class");
  c.signal = j.at("signal");
  c.noise = j.at("noise");
  c.max_signature_cosine = j.at("max_signature_cosine");
  c.identity_vision_transform = j.at("identity_vision_transform");
  c.seed = j.at("seed");
  return c;
}

inline std::string encode_scene(const SyntheticScene& s) {
  io::Writer w;
  w.magic("RLSC");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(s.grid()));
  w.u32(static_cast<std::uint32_t>(s.dim()));
  w.raw_f32(s.patch_grid);
  return w.finish();
}

inline Tensor decode_scene_grid(std::string bytes, const std::string& what) {
  io::Reader r(std::move(bytes), what, false);
  r.expect_magic("RLSC");
  if (r.u16() != 1) throw ChecksumError(what + ": unsupported scene version");
  const std::size_t g = r.u32(), d = r.u32();
  Tensor grid = r.raw_f32({g, g, d});
  r.expect_end();
  return grid;
}

inline json scene_record(const SyntheticScene& s) {
  return {{"id", s.scene_id},
          {"class", s.object_class},
          {"bbox", {s.bbox.row0, s.bbox.col0, s.bbox.row1, s.bbox.col1}},
          {"question", s.question},
          {"answer", s.answer}};
}

inline json manifest_json(const Dataset& ds) {
  json classes = json::array();
  for (const auto& c : ds.manifest.classes)
    classes.push_back({{"id", c.class_id},
                       {"name", c.name},
                       {"frequency_weight", c.frequency_weight},
                       {"rare", ds.manifest.is_rare(c.class_id)},
                       {"signature", c.signature.values()}});
  json train = json::array(), test = json::array();
  for (auto i : ds.manifest.train_scenes) train.push_back(scene_record(ds.scenes[i]));
  for (auto i : ds.manifest.test_scenes) test.push_back(scene_record(ds.scenes[i]));
  return {{"config", dataset_config_json(ds.manifest.config)},
          {"classes", classes},
          {"train_counts", ds.manifest.train_counts},
          {"train", train},
          {"test", test},
          {"seed", ds.manifest.config.seed}};
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  io::write_file(dir / "manifest.json", manifest_json(ds).dump(1));
  io::write_file(dir / "textpool.json", ds.pool.to_json().dump(1));
  for (const auto& s : ds.scenes) io::write_file(dir / "scenes" / (s.scene_id + ".bin"), encode_scene(s));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  json m;
  try {
    m = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw ChecksumError("manifest.json: " + std::string(e.what()));
  }
  ds.pool = TextPool::load(dir / "textpool.json");
  ds.manifest.config = dataset_config_from_json(m.at("config"));
  for (const auto& c : m.at("classes"))
    ds.manifest.classes.push_back({c.at("id"), c.at("name"), Tensor::vector(c.at("signature").get<std::vector<double>>()),
                                   c.at("frequency_weight")});
  ds.manifest.train_counts = m.at("train_counts").get<std::vector<std::size_t>>();
  auto read_split = [&](const json& arr, std::vector<std::size_t>& idx) {
    for (const auto& rec : arr) {
      SyntheticScene s;
      s.scene_id = rec.at("id");
      s.object_class = rec.at("class");
      const auto b = rec.at("bbox").get<std::vector<std::size_t>>();
      s.bbox = {b.at(0), b.at(1), b.at(2), b.at(3)};
      s.question = rec.at("question");
      s.answer = rec.at("answer");
      const auto path = dir / "scenes" / (s.scene_id + ".bin");
      s.patch_grid = decode_scene_grid(io::read_file(path), path.string());
      idx.push_back(ds.scenes.size());
      ds.scenes.push_back(std::move(s));
    }
  };
  read_split(m.at("train"), ds.manifest.train_scenes);
  read_split(m.at("test"), ds.manifest.test_scenes);
  return ds;
}

// Dataset plus its frozen encoders, all derived from the dataset seed.
struct World {
  Dataset data;
  VisionEncoder vision;
  TextEncoder text;

  static World build(Dataset ds) {
    World w;
    const auto& cfg = ds.manifest.config;
    w.vision = VisionEncoder::from_seed(cfg.d_v, cfg.seed, cfg.identity_vision_transform);
    w.text = TextEncoder(ds.pool, cfg.d_t, derive_seed(cfg.seed, "text-encoder"));
    w.data = std::move(ds);
    return w;
  }
};

}  // namespace rarelens

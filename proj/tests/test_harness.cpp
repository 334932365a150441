#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include <unistd.h>

#include "rarelens/harness.hpp"

using namespace rarelens;
namespace fs = std::filesystem;

// ---- config -------------------------------------------------------------------

TEST(Config, DefaultsRoundTripThroughJson) {
  const json j = config_to_json(ExperimentConfig{});
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
}

TEST(Config, ShippedDefaultFileMatchesTheBuiltInDefaults) {
  EXPECT_EQ(config_to_json(load_config(fs::path(RARELENS_SOURCE_DIR) / "configs" / "default.json")),
            config_to_json(ExperimentConfig{}));
}

TEST(Config, MissingKeysKeepDefaults) {
  const ExperimentConfig c = config_from_json(json::parse(R"({"adapter": {"lr": 0.001}})"));
  EXPECT_EQ(c.adapter.lr, 1e-3);
  EXPECT_EQ(c.adapter.epochs, 10u);
  EXPECT_EQ(c.data.num_classes, 12u);
  EXPECT_EQ(c.embedding.kappa, 0.95);
}

TEST(Config, UnknownKeysAreRejectedAtEveryLevel) {
  for (const char* text : {R"({"sed": 1})", R"({"fixture": {"layerz": 2}})", R"({"probe": {"scenes": 1, "x": 0}})",
                           R"({"inference": {"top_k": 3}})"})
    EXPECT_THROW(config_from_json(json::parse(text)), ConfigError) << text;
}

TEST(Config, WrongTypesAreRejected) {
  for (const char* text : {R"({"seed": "1"})", R"({"seed": -1})", R"({"fixture": {"epochs": 2.5}})",
                           R"({"data": {"noise": "high"}})", R"({"fixture": {"tied_head": 1}})",
                           R"({"sweep": {"k_values": [1, -2]}})", R"({"data": []})"})
    EXPECT_THROW(config_from_json(json::parse(text)), ConfigError) << text;
}

TEST(Config, InvalidValuesAreRejected) {
  for (const char* text : {R"({"inference": {"mode": "everything"}})", R"({"embedding": {"kappa": 1.5}})",
                           R"({"embedding": {"phase1_epochs": 30}})", R"({"adapter": {"heads": 3}})",
                           R"({"data": {"num_classes": 1}})", R"({"inference": {"k": 0}})",
                           R"({"sweep": {"arms": []}})"})
    EXPECT_THROW(config_from_json(json::parse(text)), ConfigError) << text;
}

TEST(Config, RareClassCountFollowsNumClasses) {
  EXPECT_EQ(config_from_json(json::parse(R"({"data": {"num_classes": 9}})")).data.profile.rare_classes, 3u);
  EXPECT_EQ(config_from_json(json::parse(R"({"data": {"num_classes": 9, "rare_classes": 1}})")).data.profile.rare_classes,
            1u);
}

TEST(Config, MalformedFileIsAConfigError) {
  const fs::path p = fs::temp_directory_path() / "rarelens_bad_config.json";
  io::write_file(p, "{ not json");
  EXPECT_THROW(load_config(p), ConfigError);
  EXPECT_THROW(load_config(p.string() + ".missing"), ConfigError);
}

// ---- aggregates ---------------------------------------------------------------

TEST(Median, OddEvenAndEmpty) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_EQ(median({7}), 7.0);
  EXPECT_EQ(median({}), 0.0);
}

TEST(ArmResult, AggregatesAreSampleWeightedMeansOfClassRows) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    ArmResult a;
    double num = 0, den = 0, rn = 0, rd = 0, cn = 0, cd = 0, tn = 0;
    for (std::size_t c = 0; c < 1 + rng.index(8); ++c) {
      ClassRow r{c, "c", rng.index(2) == 1, 1 + rng.index(30), 0, 0};
      r.correct = rng.index(r.n + 1);
      r.trusted = rng.index(r.n + 1);
      a.classes.push_back(r);
      // Per-class accuracy weighted by its sample count.
      const double acc = double(r.correct) / double(r.n);
      num += acc * double(r.n), den += double(r.n), tn += double(r.trusted);
      (r.rare ? rn : cn) += acc * double(r.n);
      (r.rare ? rd : cd) += double(r.n);
    }
    EXPECT_NEAR(a.accuracy(), num / den, 1e-12);
    EXPECT_NEAR(a.rare_accuracy(), rd ? rn / rd : 0.0, 1e-12);
    EXPECT_NEAR(a.common_accuracy(), cd ? cn / cd : 0.0, 1e-12);
    EXPECT_NEAR(a.trust_rate(), tn / den, 1e-12);
  }
}

// ---- PGM ------------------------------------------------------------------------

TEST(Pgm, RoundTripsRandomImages) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    plot::Gray16 img{1 + rng.index(9), 1 + rng.index(7), {}};
    for (std::size_t i = 0; i < img.width * img.height; ++i) img.pixels.push_back(std::uint16_t(rng.index(65536)));
    const plot::Gray16 back = plot::decode_pgm(plot::encode_pgm(img));
    EXPECT_EQ(back.width, img.width);
    EXPECT_EQ(back.height, img.height);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Pgm, HeaderAndByteOrder) {
  const std::string b = plot::encode_pgm({2, 1, {0x0102, 0xfffe}});
  EXPECT_EQ(b, std::string("P5\n2 1\n65535\n\x01\x02\xff\xfe", 17));
}

TEST(Pgm, TruncatedOrForeignDataIsRejected) {
  std::string b = plot::encode_pgm({2, 2, {1, 2, 3, 4}});
  EXPECT_THROW(plot::decode_pgm(b.substr(0, b.size() - 1)), ChecksumError);
  b[1] = '2';
  EXPECT_THROW(plot::decode_pgm(b), ChecksumError);
}

TEST(Pgm, QuantizeClampsToTheUnitInterval) {
  EXPECT_EQ(plot::quantize(-0.5), 0);
  EXPECT_EQ(plot::quantize(0.0), 0);
  EXPECT_EQ(plot::quantize(0.5), 32768);
  EXPECT_EQ(plot::quantize(1.0), 65535);
  EXPECT_EQ(plot::quantize(3.0), 65535);
}

// ---- parameter budget ---------------------------------------------------------

TEST(Params, DefaultGeometryStaysUnderTenPercent) {
  const ExperimentConfig cfg;
  const Dataset ds = generate_dataset(cfg.dataset(), TextPool::load(cfg.textpool_path()));
  VlmConfig vc = cfg.fixture.vlm;
  vc.vocab = build_tokenizer(ds).size();
  vc.d_v = cfg.data.d_v;
  const VLMParams vlm = init_vlm(vc, 1);
  const AdapterParams a = init_adapter(vc.dim, cfg.adapter.heads, 2);
  const ProjectionHeads h = init_heads(cfg.data.d_v, cfg.data.d_t, vc.dim, 3);
  ClassEmbeddingTable t;
  t.w = Tensor::zeros(cfg.data.num_classes, vc.dim);
  const ParamReport r = report_params(vlm, a, h, t);

  std::size_t vlm_sum = 0;
  VLMParams::visit([&](const std::string&, const Tensor& x) { vlm_sum += x.size(); }, vlm);
  EXPECT_EQ(r.vlm, vlm_sum);
  EXPECT_EQ(r.adapter, 4 * vc.dim * vc.dim);
  EXPECT_EQ(r.table, cfg.data.num_classes * vc.dim);
  EXPECT_TRUE(r.within_budget()) << r.ratio();
  EXPECT_NEAR(r.ratio(), double(r.adapter + r.heads + r.table) / double(r.vlm), 1e-15);
}

// ---- staged pipeline ------------------------------------------------------------

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 3;
  c.data.num_classes = 4;
  c.data.profile = {1, 2, 12, 3};
  c.fixture.vlm.layers = 1;
  c.fixture.vlm.heads = 2;
  c.fixture.vlm.dim = 16;
  c.fixture.vlm.ffn = 32;
  c.fixture.epochs = 2;
  c.fixture.gate_common = 0.0;  // mechanics only; quality is not the point here
  c.fixture.gate_rare = 1.0;
  c.embedding.epochs = 3;
  c.embedding.phase1_epochs = 1;
  c.embedding.batch = 16;
  c.embedding.text_budget = 8;
  c.embedding.gate_accuracy = 0.0;
  c.embedding.gate_rare_recall = 0.0;
  c.adapter.heads = 2;
  c.adapter.epochs = 1;
  c.sweep.k_values = {1, 2, 3};
  c.probe_scenes = 2;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  // ctest runs every case in its own process, possibly in parallel.
  const fs::path p = fs::temp_directory_path() / ("rarelens_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

std::string file(const fs::path& p) { return io::read_file(p); }

}  // namespace

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(fresh_dir("pipeline"));
    Pipeline p(tiny_config(), *dir_);
    report_ = new EvalReport(p.evaluate());
    executed_ = new std::vector<Stage>(p.executed());
  }
  static void TearDownTestSuite() {
    const std::string prefix = "rarelens_" + std::to_string(::getpid()) + "_";
    for (const auto& e : fs::directory_iterator(fs::temp_directory_path()))
      if (e.path().filename().string().starts_with(prefix)) fs::remove_all(e.path());
    delete dir_;
    delete report_;
    delete executed_;
  }
  // A private copy of the finished run for tests that modify files.
  static fs::path copy_run(const std::string& name) {
    const fs::path c = fresh_dir(name);
    fs::copy(*dir_, c, fs::copy_options::recursive);
    return c;
  }
  static fs::path* dir_;
  static EvalReport* report_;
  static std::vector<Stage>* executed_;
};

fs::path* PipelineTest::dir_ = nullptr;
EvalReport* PipelineTest::report_ = nullptr;
std::vector<Stage>* PipelineTest::executed_ = nullptr;

TEST_F(PipelineTest, FreshRunExecutesEveryStageAndWritesArtifacts) {
  EXPECT_EQ(*executed_, all_stages());
  for (const char* f : {"data/manifest.json", "data/textpool.json", "vlm.ckpt", "vocab.json", "fixture_log.csv",
                        "classes.ckpt", "embedding_log.csv", "adapter.ckpt", "adapter_log.csv", "report.json",
                        "params.csv", "pipeline.json", "config.json"})
    EXPECT_TRUE(fs::exists(*dir_ / f)) << f;
}

TEST_F(PipelineTest, ResumeSkipsCurrentStagesAndReproducesTheReport) {
  const fs::path c = copy_run("resume");
  Pipeline p(tiny_config(), c);
  const json again = report_json(p.evaluate());
  EXPECT_TRUE(p.executed().empty());
  EXPECT_EQ(again, report_json(*report_));
}

TEST_F(PipelineTest, MissingAdapterReRunsOnlyTheAdapterStage) {
  const fs::path c = copy_run("missing_adapter");
  fs::remove(c / "adapter.ckpt");
  Pipeline p(tiny_config(), c);
  p.evaluate();
  EXPECT_EQ(p.executed(), std::vector<Stage>{Stage::Adapter});
  EXPECT_EQ(file(c / "adapter.ckpt"), file(*dir_ / "adapter.ckpt"));
}

TEST_F(PipelineTest, ChangedSettingReRunsThatStageAndEverythingAfter) {
  ExperimentConfig cfg = tiny_config();
  cfg.embedding.lr = 2e-4;
  const fs::path c = copy_run("changed_embedding");
  Pipeline p(cfg, c);
  p.artifacts();
  EXPECT_EQ(p.executed(), (std::vector<Stage>{Stage::Embeddings, Stage::Adapter}));
  EXPECT_EQ(file(c / "vlm.ckpt"), file(*dir_ / "vlm.ckpt"));
  EXPECT_NE(file(c / "classes.ckpt"), file(*dir_ / "classes.ckpt"));
}

TEST_F(PipelineTest, InferenceSettingsDoNotInvalidateTraining) {
  ExperimentConfig cfg = tiny_config();
  cfg.inference.k = 1;
  cfg.sweep.k_values = {2};
  const fs::path c = copy_run("inference_only");
  Pipeline p(cfg, c);
  p.artifacts();
  EXPECT_TRUE(p.executed().empty());
}

TEST_F(PipelineTest, CorruptedCheckpointIsAChecksumError) {
  for (const char* f : {"vlm.ckpt", "classes.ckpt", "adapter.ckpt", "vocab.json"}) {
    const fs::path c = copy_run("corrupt");
    std::string b = file(c / f);
    b[b.size() / 2] ^= 0x01;
    io::write_file(c / f, b);
    Pipeline p(tiny_config(), c);
    EXPECT_THROW(p.artifacts(), ChecksumError) << f;
  }
}

TEST_F(PipelineTest, ForceReRunsAStageWithIdenticalOutput) {
  const fs::path c = copy_run("force");
  Pipeline p(tiny_config(), c);
  p.ensure(Stage::Embeddings, true);
  EXPECT_EQ(p.executed(), std::vector<Stage>{Stage::Embeddings});
  EXPECT_EQ(file(c / "classes.ckpt"), file(*dir_ / "classes.ckpt"));
}

TEST_F(PipelineTest, ReportIsInternallyConsistent) {
  const EvalReport& r = *report_;
  const ExperimentConfig cfg = tiny_config();
  const std::size_t per_class = cfg.data.profile.test_per_class, C = cfg.data.num_classes;
  ASSERT_EQ(r.arms.size(), all_modes().size());
  for (const auto& a : r.arms) {
    ASSERT_EQ(a.classes.size(), C);
    for (const auto& row : a.classes) {
      EXPECT_EQ(row.n, per_class);
      EXPECT_LE(row.correct, row.n);
      EXPECT_EQ(row.rare, row.class_id + cfg.data.profile.rare_classes >= C);
      if (!uses_hints(a.mode)) EXPECT_EQ(row.trusted, 0u);
    }
  }
  ASSERT_EQ(r.detection.all.size(), C);
  for (std::size_t k = 1; k < C; ++k) EXPECT_GE(r.detection.all[k], r.detection.all[k - 1]);
  EXPECT_EQ(r.detection.all.back(), 1.0);
  EXPECT_EQ(r.probe.scenes, C * per_class);
  const json j = json::parse(file(*dir_ / "report.json"));
  EXPECT_EQ(j, report_json(r));
  EXPECT_TRUE(j["arms"][0]["trust_rate"].is_null());
  EXPECT_EQ(j["checksums"].size(), 4u);
}

TEST_F(PipelineTest, SweepCoversEveryArmAndK) {
  const fs::path c = copy_run("sweep");
  Pipeline p(tiny_config(), c);
  const auto rows = p.sweep();
  const ExperimentConfig cfg = tiny_config();
  ASSERT_EQ(rows.size(), cfg.sweep.arms.size() * cfg.sweep.k_values.size());
  std::set<std::pair<std::string, std::size_t>> seen;
  for (const auto& r : rows) seen.insert({mode_name(r.mode), r.k});
  EXPECT_EQ(seen.size(), rows.size());
  // Arms that do not use detected hints give the same answers at every k.
  const std::size_t nk = cfg.sweep.k_values.size();
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].mode != Mode::HintsOnly && rows[i].mode != Mode::Full)
      EXPECT_EQ(rows[i].result.classes[0].correct, rows[i - i % nk].result.classes[0].correct);
  const std::string csv = file(c / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), std::ptrdiff_t(rows.size() + 1));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "arm,k,accuracy,rare_accuracy,common_accuracy,trust_rate,detection_accuracy");
  EXPECT_TRUE(fs::exists(c / "sweep_k.svg"));
  EXPECT_TRUE(fs::exists(c / "sweep_arms.svg"));
}

TEST_F(PipelineTest, ProbeFilesDecodeToTheLensGrid) {
  const fs::path c = copy_run("probe");
  Pipeline p(tiny_config(), c);
  const auto probes = p.probe();
  ASSERT_EQ(probes.size(), 2u);
  for (const auto& s : probes) {
    for (const char* v : {"baseline", "refined"}) {
      const auto img = plot::decode_pgm(file(c / "probe" / (s.scene_id + "_lens_" + v + ".pgm")));
      EXPECT_EQ(img.height, tiny_config().fixture.vlm.layers + 1);
      EXPECT_EQ(img.width, s.patches.size());
      const auto& cells = std::string(v) == "baseline" ? s.lens_baseline : s.lens_refined;
      for (std::size_t i = 0; i < cells.size(); ++i) EXPECT_EQ(img.pixels[i], plot::quantize(cells[i].target_prob));
    }
    EXPECT_TRUE(fs::exists(c / "probe" / (s.scene_id + "_attention.csv")));
  }
  EXPECT_THROW(p.probe({"no-such-scene"}), ConfigError);
}

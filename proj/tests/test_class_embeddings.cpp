#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "rarelens/class_embeddings.hpp"

using namespace rarelens;

using oracle::align_value;
using oracle::Batch;
using oracle::class_value;
using oracle::random_batch;

TEST(AlignLoss, MatchesLoopOracleOnRandomBatches) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + rng.index(5), t = c + rng.index(17 - c), n = 1 + rng.index(8);
    const Batch b = random_batch(rng, n, t, c, 6);
    for (double tau : {1.0, 0.3}) EXPECT_NEAR(align_value(b, tau), oracle::align(b.hv, b.lv, b.ht, b.lt, tau), 1e-10);
  }
}

TEST(ClassLoss, MatchesLoopOracleOnRandomBatches) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + rng.index(5), t = c + rng.index(17 - c), n = 1 + rng.index(8);
    const Batch b = random_batch(rng, n, t, c, 6);
    for (double tau : {1.0, 0.3})
      EXPECT_NEAR(class_value(b, tau), oracle::class_loss(b.hv, b.lv, b.ht, b.lt, b.w, tau), 1e-10);
  }
}

TEST(AlignLoss, SingleClassIsExactlyZero) {
  Rng rng(3);
  Batch b = random_batch(rng, 5, 7, 1, 4);
  EXPECT_EQ(align_value(b, 1.0), 0.0);
}

TEST(AlignLoss, EqualCosinesGiveLogOfPositiveShare) {
  // Identical text rows make every cosine in a row equal.
  Rng rng(4);
  const Tensor t = rng.normal_tensor({1, 4}, 1.0);
  Tensor ht(Shape{6, 4});
  for (std::size_t j = 0; j < 6; ++j) std::copy(t.data().begin(), t.data().end(), ht.row(j).begin());
  const std::vector<std::size_t> lt = {0, 0, 1, 2, 2, 2};
  GradTape tape;
  const double v =
      align_loss(tape.constant(rng.normal_tensor({2, 4}, 1.0)), {0, 2}, tape.constant(ht), lt).value().item();
  EXPECT_NEAR(v, 0.5 * (-std::log(2.0 / 6.0) - std::log(3.0 / 6.0)), 1e-12);
}

TEST(AlignLoss, VisualSampleWithoutPositiveIsRejected) {
  Rng rng(5);
  Batch b = random_batch(rng, 2, 3, 3, 4);
  b.lt = {0, 0, 1};
  b.lv = {2, 0};
  EXPECT_THROW(align_value(b, 1.0), ContractError);
}

TEST(ClassLoss, UniformCosinesGiveLogC) {
  Rng rng(6);
  for (std::size_t c : {2u, 3u, 5u}) {
    Batch b = random_batch(rng, 4, 6, c, 5);
    const Tensor row = rng.normal_tensor({1, 5}, 1.0);
    for (std::size_t k = 0; k < c; ++k) std::copy(row.data().begin(), row.data().end(), b.w.row(k).begin());
    EXPECT_NEAR(class_value(b, 1.0), std::log(double(c)), 1e-12);
  }
}

TEST(ClassLoss, SingleClassIsZero) {
  Rng rng(7);
  EXPECT_NEAR(class_value(random_batch(rng, 3, 4, 1, 5), 1.0), 0.0, 1e-15);
}

TEST(ClassLoss, ZeroPrototypeIsDegenerate) {
  Rng rng(8);
  Batch b = random_batch(rng, 3, 4, 2, 5);
  for (auto& v : b.w.row(1)) v = 0.0;
  EXPECT_THROW(class_value(b, 1.0), DegenerateVectorError);
}

TEST(Gradients, AlignLossThroughHeadsMatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    const Batch b = random_batch(rng, 4, 6, 3, 3);
    const Tensor zv = rng.normal_tensor({4, 5}, 1.0), zt = rng.normal_tensor({6, 4}, 1.0);
    const ProjectionHeads h = init_heads(5, 4, 3, seed);
    std::vector<Tensor> params;
    ProjectionHeads::visit([&](const std::string&, const Tensor& t) { params.push_back(t); }, h);
    const Objective f = [&](GradTape& tape, std::span<const Var> p) {
      const MlpWeights<Var> vis{p[0], p[1], p[2], p[3]}, text{p[4], p[5], p[6], p[7]};
      return align_loss(mlp(vis, tape.constant(zv)), b.lv, mlp(text, tape.constant(zt)), b.lt, 0.5);
    };
    EXPECT_LT(grad_check(f, params), 1e-4) << "seed " << seed;
  }
}

TEST(Gradients, ClassLossMatchesFiniteDifferences) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    const Batch b = random_batch(rng, 4, 5, 3, 4);
    const Objective f = [&](GradTape& tape, std::span<const Var> p) {
      return class_loss(p[0], b.lv, p[1], b.lt, tape.constant(b.w), 0.7);
    };
    EXPECT_LT(grad_check(f, {b.hv, b.ht}), 1e-4) << "seed " << seed;
  }
}

TEST(Gradients, PrototypesAsConstantsGetNoGradient) {
  Rng rng(9);
  const Batch b = random_batch(rng, 3, 4, 2, 4);
  GradTape tape;
  const Var hv = tape.parameter(b.hv), w = tape.constant(b.w);
  const auto g = tape.backward(class_loss(hv, b.lv, tape.constant(b.ht), b.lt, w));
  EXPECT_TRUE(g.has(hv));
  EXPECT_FALSE(g.has(w));
}

namespace {

ClassEmbeddingTable random_table(Rng& rng, std::size_t c, std::size_t d, double kappa) {
  ClassEmbeddingTable t;
  t.w = rng.normal_tensor({c, d}, 1.0);
  t.names.assign(c, "x");
  t.kappa = kappa;
  t.update_count.assign(c, 0);
  return t;
}

}  // namespace

TEST(Ema, KappaOneIsAFixpoint) {
  Rng rng(30);
  ClassEmbeddingTable t = random_table(rng, 4, 6, 1.0);
  const Tensor before = t.w;
  ema_update(t, rng.normal_tensor({4, 6}, 1.0), std::vector<char>(4, 1));
  EXPECT_EQ(t.w, before);
}

TEST(Ema, KappaZeroReplaces) {
  Rng rng(31);
  ClassEmbeddingTable t = random_table(rng, 4, 6, 0.0);
  const Tensor means = rng.normal_tensor({4, 6}, 1.0);
  ema_update(t, means, std::vector<char>(4, 1));
  EXPECT_EQ(t.w, means);
}

TEST(Ema, StaysOnTheSegmentForRandomUpdates) {
  Rng rng(32);
  for (int trial = 0; trial < 1000; ++trial) {
    ClassEmbeddingTable t = random_table(rng, 3, 5, rng.uniform());
    const Tensor a = t.w, b = rng.normal_tensor({3, 5}, 2.0);
    std::vector<char> present = {1, char(rng.index(2)), 1};
    ema_update(t, b, present);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 5; ++j) {
        if (!present[c]) {
          ASSERT_EQ(t.w(c, j), a(c, j));
          continue;
        }
        ASSERT_GE(t.w(c, j), std::min(a(c, j), b(c, j)));
        ASSERT_LE(t.w(c, j), std::max(a(c, j), b(c, j)));
      }
    EXPECT_EQ(t.update_count[1], std::size_t(present[1]));
  }
}

TEST(Ema, DefaultKappaMovesFivePercentTowardTheMean) {
  EXPECT_EQ(EmbeddingConfig{}.kappa, 0.95);
  ClassEmbeddingTable t;
  t.w = Tensor::zeros(1, 1);
  t.update_count = {0};
  t.names = {"a"};
  ema_update(t, Tensor::vector({1.0}).reshaped({1, 1}), {1});
  EXPECT_NEAR(t.w(0, 0), 0.05, 1e-15);
  t.kappa = 1.5;
  EXPECT_THROW(ema_update(t, Tensor::zeros(1, 1), {1}), ConfigError);
}

TEST(Init, PrototypesAreClassMeans) {
  Rng rng(40);
  const Tensor h = rng.normal_tensor({9, 3}, 1.0);
  const std::vector<std::size_t> labels = {0, 1, 2, 0, 1, 2, 0, 0, 1};
  const auto t = init_class_embeddings(h, labels, {"a", "b", "c"});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0.0, n = 0.0;
      for (std::size_t i = 0; i < 9; ++i)
        if (labels[i] == c) s += h(i, k), n += 1.0;
      EXPECT_NEAR(t.w(c, k), s / n, 1e-15);
    }
  EXPECT_EQ(t.kappa, 0.95);
}

TEST(Init, MissingClassIsACoverageError) {
  EXPECT_THROW(init_class_embeddings(Tensor::zeros(2, 3), {0, 0}, {"a", "b"}), CoverageError);
}

TEST(Init, AntipodalSamplesGiveAZeroRowThatIsPerturbed) {
  Tensor h(Shape{3, 2});
  h(0, 0) = 1.0, h(1, 0) = -1.0, h(2, 1) = 1.0;
  auto t = init_class_embeddings(h, {0, 0, 1}, {"a", "b"});
  EXPECT_EQ(norm(t.w.row(0)), 0.0);
  EXPECT_EQ(perturb_degenerate(t, 1), std::vector<std::size_t>{0});
  EXPECT_GT(norm(t.w.row(0)), 0.0);
  EXPECT_LT(norm(t.w.row(0)), 1e-4);
  EXPECT_EQ(t.w(1, 1), 1.0);
}

TEST(NearestPrototype, TiesGoToLowerId) {
  Tensor w(Shape{3, 2});
  w(0, 1) = 1.0, w(1, 0) = 1.0, w(2, 0) = 2.0;
  const std::vector<double> h = {1.0, 0.0};
  EXPECT_EQ(nearest_prototype(w, h), 1u);
}

namespace {

World two_class_world() {
  DatasetConfig dc;
  dc.num_classes = 2;
  dc.profile = {1, 5, 40, 10};
  dc.seed = 4;
  return World::build(generate_dataset(dc, TextPool::load(default_textpool_path())));
}

EmbeddingConfig toy_embedding_config() {
  EmbeddingConfig c;
  c.lr = 1e-3;
  c.text_budget = 16;
  c.batch = 16;
  return c;
}

}  // namespace

TEST(Training, TwoClassToyPassesTheGate) {
  const World w = two_class_world();
  const EmbeddingResult r = train_class_embeddings(w, 16, toy_embedding_config(), 1);
  EXPECT_GE(r.gate.accuracy, 0.95);
  EXPECT_EQ(r.log.size(), 20u);
  EXPECT_EQ(r.table.heads_checksum, heads_checksum(r.heads));
  for (auto n : r.table.update_count) EXPECT_EQ(n, 15u);
}

TEST(Training, PhaseObjectivesDoNotIncrease) {
  const World w = two_class_world();
  const auto cfg = toy_embedding_config();
  const EmbeddingResult r = train_class_embeddings(w, 16, cfg, 1);
  for (std::size_t e = 1; e < r.log.size(); ++e) {
    const auto &prev = r.log[e - 1], &cur = r.log[e];
    if (cur.phase != prev.phase) continue;
    const double before = prev.l_align + (cur.phase == 2 ? cfg.lambda * prev.l_class : 0.0);
    const double after = cur.l_align + (cur.phase == 2 ? cfg.lambda * cur.l_class : 0.0);
    EXPECT_LE(after, before + 1e-9) << "epoch " << e;
  }
}

TEST(Training, DeterministicPerSeed) {
  const World w = two_class_world();
  const auto a = train_class_embeddings(w, 16, toy_embedding_config(), 2);
  const auto b = train_class_embeddings(w, 16, toy_embedding_config(), 2);
  EXPECT_EQ(encode_classes(a.heads, a.table), encode_classes(b.heads, b.table));
  EXPECT_EQ(embedding_log_csv(a.log), embedding_log_csv(b.log));
}

TEST(Training, UnmetGateReportsConfusion) {
  auto cfg = toy_embedding_config();
  cfg.gate_accuracy = 1.01;
  try {
    train_class_embeddings(two_class_world(), 16, cfg, 1);
    FAIL();
  } catch (const GateError& e) {
    EXPECT_NE(std::string(e.what()).find("confusion"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripAndRejection) {
  const auto r = train_class_embeddings(two_class_world(), 16, toy_embedding_config(), 3);
  const std::string bytes = encode_classes(r.heads, r.table);
  const auto [h, t] = decode_classes(bytes);
  EXPECT_EQ(encode_classes(h, t), bytes);
  EXPECT_EQ(checksum(h, t), checksum(r.heads, r.table));

  std::string bad = bytes;
  bad[bad.size() / 3] ^= 1;
  EXPECT_THROW(decode_classes(bad), ChecksumError);

  ProjectionHeads other = r.heads;
  other.vis.b1[0] += 1.0;
  EXPECT_THROW(decode_classes(encode_classes(other, r.table)), ChecksumError);
}

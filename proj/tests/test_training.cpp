#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "sitn/training.hpp"

using namespace sitn;
using namespace sitn::train;

namespace {

data::SyntheticDataset small_data(int users = 60) {
  data::SyntheticConfig c;
  c.num_users = users;
  c.num_groups = 3;
  c.source_items_per_group = 6;
  c.target_items_per_group = 5;
  c.source_len_min = 3;
  c.source_len_max = 6;
  c.target_len_min = 2;
  c.target_len_max = 4;
  return data::generate_synthetic(c);
}

ModelConfig small_model() {
  ModelConfig m;
  m.dim = 4;
  m.heads = 2;
  m.clusters = {3, 2};
  m.top_k = 2;
  m.no_mg_clusters = 4;
  m.ctr_hidden = {5};
  return m;
}

TrainConfig small_train() {
  TrainConfig t;
  t.pretrain_epochs = 2;
  t.finetune_epochs = 2;
  t.batch_size = 8;
  t.finetune_batch_size = 16;
  t.lr_pretrain = 1e-2;
  t.lr_finetune = 1e-2;
  t.temperature = 0.5;
  return t;
}

// Adds noise to every non-embedding parameter so the
// probes exercise non-trivial regions.
void perturb(SitnModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 0.6);
  for (auto& [name, p] : m.all_parameters()) {
    if (name.find("emb") != std::string::npos) continue;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += d(rng);
  }
}

}  // namespace

TEST(Model, SameSeedSameInitialisation) {
  const auto s = small_data();
  const auto a = build_model(s.dataset, small_model(), small_train());
  const auto b = build_model(s.dataset, small_model(), small_train());
  EXPECT_TRUE(snapshot(a.all_parameters()) == snapshot(b.all_parameters()));
}

TEST(Model, MultiGranularityFlagControlsSpaces) {
  const auto s = small_data();
  auto tc = small_train();
  EXPECT_EQ(build_model(s.dataset, small_model(), tc).spaces.size(), 2u);
  tc.use_mg = false;
  const auto m = build_model(s.dataset, small_model(), tc);
  ASSERT_EQ(m.spaces.size(), 1u);
  EXPECT_EQ(m.spaces[0].num_clusters(), 4);
}

TEST(Model, PaddingRowsStartAtZero) {
  const auto s = small_data();
  const auto m = build_model(s.dataset, small_model(), small_train());
  EXPECT_TRUE(m.source.item_emb->value.row(0).isZero(0.0));
  EXPECT_TRUE(m.target.item_emb->value.row(0).isZero(0.0));
}

TEST(Pretrain, DeterministicCheckpoint) {
  const auto s = small_data();
  auto run = [&] {
    auto m = build_model(s.dataset, small_model(), small_train());
    return pretrain(s.dataset, m, small_train(), "h").checkpoint;
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(a == b);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  EXPECT_EQ(a.stage, "pretrain");
  EXPECT_EQ(a.config_hash, "h");
}

TEST(Pretrain, LossDecreasesAndPaddingStaysZero) {
  const auto s = small_data(120);
  auto tc = small_train();
  tc.pretrain_epochs = 8;
  auto m = build_model(s.dataset, small_model(), tc);
  const auto r = pretrain(s.dataset, m, tc);
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  ASSERT_GE(r.history.size(), 16u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 5; ++i) first += r.history[i].loss;
  for (std::size_t i = r.history.size() - 5; i < r.history.size(); ++i) last += r.history[i].loss;
  EXPECT_LT(last, first);
  EXPECT_TRUE(m.source.item_emb->value.row(0).isZero(0.0));
  EXPECT_TRUE(m.target.item_emb->value.row(0).isZero(0.0));
  for (const auto& h : r.history) EXPECT_NEAR(h.loss, h.i2i + h.i2c, 1e-9 * std::max(1.0, h.loss));
}

TEST(Pretrain, NoStepsWhenBothTermsDisabled) {
  const auto s = small_data();
  auto tc = small_train();
  tc.use_i2i = false;
  tc.use_i2c = false;
  auto m = build_model(s.dataset, small_model(), tc);
  const auto before = snapshot(m.all_parameters());
  const auto r = pretrain(s.dataset, m, tc);
  EXPECT_TRUE(r.history.empty());
  EXPECT_TRUE(snapshot(m.all_parameters()) == before);
}

TEST(Pretrain, StepCapIsHonoured) {
  const auto s = small_data();
  auto tc = small_train();
  tc.max_pretrain_steps = 3;
  auto m = build_model(s.dataset, small_model(), tc);
  EXPECT_EQ(pretrain(s.dataset, m, tc).history.size(), 3u);
}

TEST(Pretrain, NonFiniteStateAbortsWithLastGoodCheckpoint) {
  const auto s = small_data();
  auto m = build_model(s.dataset, small_model(), small_train());
  m.spaces[0].source_clusters->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto r = pretrain(s.dataset, m, small_train());
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.abort_reason.empty());
  EXPECT_TRUE(r.history.empty());
}

TEST(Pretrain, ClusterMatricesOnlyTrainWithI2C) {
  const auto s = small_data();
  auto tc = small_train();
  tc.use_i2c = false;
  auto m = build_model(s.dataset, small_model(), tc);
  const Matrix c0 = m.spaces[0].source_clusters->value;
  pretrain(s.dataset, m, tc);
  EXPECT_EQ(m.spaces[0].source_clusters->value, c0);
  tc.use_i2c = true;
  auto m2 = build_model(s.dataset, small_model(), tc);
  pretrain(s.dataset, m2, tc);
  EXPECT_NE(m2.spaces[0].source_clusters->value, c0);
}

TEST(Stage1, GradientsMatchFiniteDifferences) {
  const auto s = small_data();
  auto tc = small_train();
  auto m = build_model(s.dataset, small_model(), tc);
  perturb(m, 5);
  std::vector<data::ClickSequence> src, tgt;
  for (std::size_t i = 0; i < 4; ++i) {
    src.push_back(s.dataset.users[i].source);
    tgt.push_back(s.dataset.users[i].target);
  }
  const auto params = stage1_parameters(m, tc);
  for (const auto& [name, r] : oracle::gradient_check(params, [&] { return stage1_loss(m, src, tgt, tc).total; }, 20, 7))
    EXPECT_LE(r.max_rel_error, 1e-4) << name << ": " << r.worst;
}

TEST(Stage2, GradientsMatchFiniteDifferences) {
  const auto s = small_data();
  auto m = build_model(s.dataset, small_model(), small_train());
  perturb(m, 6);
  const auto split = data::build_stage2_examples(s.dataset, 2, 0.0, 3);
  std::vector<const data::CdrExample*> batch;
  for (std::size_t i = 0; i < 6; ++i) batch.push_back(&split.train[i]);
  const auto params = stage2_parameters(m, small_train());
  for (const auto& [name, r] : oracle::gradient_check(params, [&] { return stage2_loss(m, batch); }, 20, 8))
    EXPECT_LE(r.max_rel_error, 1e-4) << name << ": " << r.worst;
}

TEST(Stage2, BceLossValues) {
  EXPECT_NEAR(bce_loss(1, 0.5), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(0, 0.25), -std::log(0.75), 1e-12);
  EXPECT_NEAR(bce_loss(1, 0.0), -std::log(1e-7), 1e-9);
  EXPECT_NEAR(bce_loss(0, 1.0), -std::log(1e-7), 1e-6);
  EXPECT_THROW(bce_loss(2, 0.5), DataError);
}

TEST(Stage2, LogitLossMatchesPerExampleProbabilities) {
  const auto s = small_data();
  auto m = build_model(s.dataset, small_model(), small_train());
  perturb(m, 9);
  const auto split = data::build_stage2_examples(s.dataset, 3, 0.0, 4);
  std::vector<const data::CdrExample*> batch;
  double want = 0.0;
  for (std::size_t i = 0; i < 12; ++i) {
    batch.push_back(&split.train[i]);
    want += bce_loss(split.train[i].label, predict_ctr(m, split.train[i]));
  }
  EXPECT_NEAR(ag::scalar(stage2_loss(m, batch)), want, 1e-9);
}

TEST(Finetune, FreezeKeepsEncodersFixed) {
  const auto s = small_data();
  auto tc = small_train();
  tc.freeze_encoders = true;
  auto m = build_model(s.dataset, small_model(), tc);
  const auto enc_before = snapshot(m.encoder_parameters());
  const auto head_before = snapshot(m.head_parameters());
  const auto split = data::build_stage2_examples(s.dataset, 2, 0.2, 1);
  finetune(split.train, m, tc);
  EXPECT_TRUE(snapshot(m.encoder_parameters()) == enc_before);
  EXPECT_FALSE(snapshot(m.head_parameters()) == head_before);
}

TEST(Finetune, StartsFromPretrainedEncodersAndIsDeterministic) {
  const auto s = small_data();
  const auto split = data::build_stage2_examples(s.dataset, 2, 0.2, 1);
  auto m = build_model(s.dataset, small_model(), small_train());
  const auto pre = pretrain(s.dataset, m, small_train()).checkpoint;
  SitnModel out;
  const auto a = finetune(split.train, &pre, s.dataset, small_model(), small_train(), &out);
  const auto b = finetune(split.train, &pre, s.dataset, small_model(), small_train());
  EXPECT_TRUE(a.checkpoint == b.checkpoint);
  EXPECT_EQ(a.checkpoint.stage, "finetune");
  // interest spaces are not touched by fine-tuning
  EXPECT_EQ(out.spaces[0].source_clusters->value, build_model(s.dataset, small_model(), small_train()).spaces[0].source_clusters->value);
}

TEST(Finetune, MismatchedCheckpointIsShapeError) {
  const auto s = small_data();
  const auto split = data::build_stage2_examples(s.dataset, 2, 0.2, 1);
  auto wide = small_model();
  wide.dim = 6;
  auto m = build_model(s.dataset, wide, small_train());
  const auto ckpt = to_checkpoint(m, "pretrain", 0, "");
  EXPECT_THROW(finetune(split.train, &ckpt, s.dataset, small_model(), small_train()), ShapeError);
}

TEST(Finetune, PredictionsAreProbabilities) {
  const auto s = small_data();
  const auto split = data::build_stage2_examples(s.dataset, 2, 0.3, 1);
  auto m = build_model(s.dataset, small_model(), small_train());
  finetune(split.train, m, small_train());
  for (double p : predict_all(m, split.test, 7)) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
  EXPECT_EQ(predict_all(m, split.test, 7).size(), split.test.size());
}

TEST(Config, ValidationRejectsBadValues) {
  auto tc = small_train();
  tc.temperature = 0.0;
  EXPECT_THROW(validate(tc), ConfigError);
  auto mc = small_model();
  mc.clusters = {};
  EXPECT_THROW(validate(mc), ConfigError);
  mc = small_model();
  mc.fusion_activation = "relu6";
  EXPECT_THROW(validate(mc), ConfigError);
}

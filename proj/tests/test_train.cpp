#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"

using namespace c3;

namespace {

const InteractionDataset& small() {
  static const InteractionDataset ds = fixtures::split_synthetic(60, 80, 24, 3);
  return ds;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig c;
  c.seed = 11;
  c.epochs = epochs;
  c.n_eval_neg = 50;
  return c;
}

std::string log_text(const TrainLog& log) {
  std::string s;
  for (const auto& e : log.epochs) s += to_json(e, false).dump() + "\n";
  return s;
}

}  // namespace

TEST(Train, OneEpochReducesLoss) {
  const auto ds = leave_one_out_split(generate_synthetic(SyntheticConfig{}).data, 7);
  TrainConfig cfg;
  cfg.seed = 7;
  cfg.epochs = 1;
  cfg.validate_users = false;
  const auto r = train(ds, cfg);
  const auto& b = r.log.batch_losses;
  const std::size_t w = b.size() / 4;
  ASSERT_GE(w, 3u);
  const double first = std::accumulate(b.begin(), b.begin() + w, 0.0) / static_cast<double>(w);
  const double last = std::accumulate(b.end() - w, b.end(), 0.0) / static_cast<double>(w);
  EXPECT_LT(last, first);
}

TEST(Train, SameSeedGivesIdenticalLogAndWeights) {
  const auto a = train(small(), quick());
  const auto b = train(small(), quick());
  EXPECT_EQ(log_text(a.log), log_text(b.log));
  EXPECT_EQ(a.log.batch_losses, b.log.batch_losses);
  EXPECT_TRUE(a.best.parameters_equal(b.best));
  EXPECT_TRUE(a.last.parameters_equal(b.last));
  TrainConfig other = quick();
  other.seed = 12;
  EXPECT_FALSE(train(small(), other).last.parameters_equal(a.last));
}

TEST(Train, NoContrastiveKeepsContrastiveTermAtZero) {
  TrainConfig cfg = quick();
  cfg.no_contrastive = true;
  const auto r = train(small(), cfg);
  for (const auto& e : r.log.epochs) {
    EXPECT_EQ(e.group_loss.l_cont, 0.0);
    EXPECT_EQ(e.user_loss.l_cont, 0.0);
  }
  const auto with = train(small(), quick());
  double cont = 0.0;
  for (const auto& e : with.log.epochs) cont += e.group_loss.l_cont;
  EXPECT_GT(cont, 0.0);
}

TEST(Train, NoMarginUsesPointwiseTermsOnly) {
  TrainConfig cfg = quick(1);
  cfg.no_margin = true;
  cfg.no_contrastive = true;
  const auto r = train(small(), cfg);
  const auto& g = r.log.epochs[0].group_loss;
  EXPECT_NEAR(g.l_main, g.l_pos + g.l_neg, 1e-12);
  EXPECT_EQ(cfg.effective_alpha(), 1.0);
}

TEST(Train, EpochLogsAndEarlyStopping) {
  TrainConfig cfg = quick(30);
  cfg.early_stop_patience = 2;
  const auto r = train(small(), cfg);
  ASSERT_FALSE(r.log.epochs.empty());
  EXPECT_LE(r.log.epochs.size(), r.log.best_epoch + 2);
  std::size_t bests = 0;
  for (const auto& e : r.log.epochs) {
    EXPECT_GT(e.group_batches, 0u);
    EXPECT_GT(e.user_batches, 0u);
    EXPECT_GE(e.val_group_hr10, 0.0);
    EXPECT_LE(e.val_group_hr10, 1.0);
    bests += e.best;
  }
  EXPECT_GE(bests, 1u);
  EXPECT_EQ(r.log.epochs[r.log.best_epoch - 1].val_group_hr10, r.log.best_val_group_hr10);
}

TEST(Trainer, PaddingRowNeverReceivesGradient) {
  TrainConfig cfg = quick();
  Trainer t(small(), cfg);
  BatchConfig bc = t.batch_config();
  bc.batch_size = 16;
  for (const auto& b : make_batches(small(), Task::group, bc, 3)) {
    t.step(b, false);
    const auto pad = t.model().user_emb.grad_row(t.model().padding_id());
    for (double g : pad) EXPECT_EQ(g, 0.0);
    t.model().zero_grad();
  }
}

TEST(Trainer, ZeroLearningRateLeavesWeightsUnchanged) {
  TrainConfig cfg = quick();
  cfg.lr = 0.0;
  Trainer t(small(), cfg);
  const C3Model before = t.model();
  for (const auto& b : make_batches(small(), Task::group, t.batch_config(), 1)) t.step(b);
  EXPECT_TRUE(t.model().parameters_equal(before));
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.loss.beta = 0.075;
  c.epochs = 17;
  c.no_margin = true;
  TrainConfig back;
  apply_json(back, to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(apply_json(back, nlohmann::json{{"epochs", "many"}}), ConfigError);
  TrainConfig bad;
  bad.model.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.task_mix = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  const auto& keys = train_config_keys();
  EXPECT_NE(std::find(keys.begin(), keys.end(), "mask_ratio"), keys.end());
}

TEST(Grid, ExpansionCardinality) {
  EXPECT_EQ(expand_grid(TrainConfig{}, GridSpec{}).size(), 64u);
  GridSpec g{{3, 5}, {0.2}, {0.05, 0.1}};
  const auto cands = expand_grid(TrainConfig{}, g);
  ASSERT_EQ(cands.size(), 4u);
  EXPECT_EQ(cands[3].loss.aug_threshold, 5u);
  EXPECT_EQ(cands[3].loss.beta, 0.1);
}

TEST(Grid, SingletonReturnsThatConfig) {
  TrainConfig base = quick(1);
  GridSpec g{{5}, {0.6}, {0.025}};
  const auto r = hyper_grid(small(), base, g);
  ASSERT_EQ(r.table.size(), 1u);
  EXPECT_EQ(r.best_index, 0u);
  EXPECT_EQ(r.best.loss.aug_threshold, 5u);
  EXPECT_EQ(r.best.loss.mask_ratio, 0.6);
  EXPECT_EQ(r.best.loss.beta, 0.025);
}

TEST(Grid, SabotagedCandidateLoses) {
  const auto ds = fixtures::split_synthetic(200, 300, 80, 7);
  TrainConfig good = quick(3), bad = quick(3);
  good.validate_users = bad.validate_users = false;
  bad.lr = 0.0;
  const auto r = hyper_grid(ds, {bad, good});
  ASSERT_EQ(r.table.size(), 2u);
  EXPECT_EQ(r.best_index, 1u);
  EXPECT_GT(r.table[1].val_group_hr10, r.table[0].val_group_hr10);
  EXPECT_THROW(hyper_grid(small(), std::vector<TrainConfig>{}), ConfigError);
}

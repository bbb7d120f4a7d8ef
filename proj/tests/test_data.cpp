#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"

using namespace c3;
using fixtures::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

InteractionDataset tiny_with_positives(std::size_t items, std::vector<std::size_t> positives) {
  InteractionDataset ds;
  ds.num_users = 1;
  ds.num_items = items;
  ds.num_groups = 1;
  ds.group_members = {{0}};
  ds.user_items = {positives};
  ds.group_items = {positives};
  return ds;
}

}  // namespace

TEST(Load, MinimalCorpus) {
  TempDir dir("load-min");
  write_file(dir.path / "group_members.tsv", "0\t0,1\n");
  write_file(dir.path / "user_item.tsv", "");
  write_file(dir.path / "group_item.tsv", "0\t0\n");
  const auto ds = load_dataset(dir.path);
  EXPECT_EQ(ds.num_groups, 1u);
  EXPECT_EQ(ds.num_users, 2u);
  EXPECT_EQ(ds.group_items[0].size(), 1u);
  EXPECT_EQ(ds.group_members[0], (std::vector<std::size_t>{0, 1}));
}

TEST(Load, SaveLoadRoundTripOfSyntheticData) {
  SyntheticConfig sc;
  sc.num_users = 50;
  sc.num_items = 100;
  sc.num_groups = 20;
  const auto ds = generate_synthetic(sc).data;
  TempDir dir("roundtrip");
  save_dataset(ds, dir.path);
  EXPECT_EQ(load_dataset(dir.path), ds);
}

TEST(Load, DuplicateInteractionLinesAreMerged) {
  TempDir dir("dedup");
  write_file(dir.path / "group_members.tsv", "0\t0,1\n1\t1,2\n");
  write_file(dir.path / "user_item.tsv", "0\t3\n0\t3\n");
  write_file(dir.path / "group_item.tsv", "0\t4\n0\t4\n1\t4\n");
  const auto ds = load_dataset(dir.path);
  EXPECT_EQ(ds.group_items[0].size(), 1u);
  EXPECT_EQ(ds.user_items[0].size(), 1u);
}

TEST(Load, FirstSeenCompactionWithoutStats) {
  TempDir dir("compact");
  write_file(dir.path / "group_members.tsv", "17\t40,12\n");
  write_file(dir.path / "user_item.tsv", "12\t900\n");
  write_file(dir.path / "group_item.tsv", "17\t5\n");
  const auto ds = load_dataset(dir.path);
  EXPECT_EQ(ds.num_users, 2u);
  EXPECT_EQ(ds.num_items, 2u);
  EXPECT_EQ(ds.group_members[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(ds.user_items[1], (std::vector<std::size_t>{0}));
  EXPECT_EQ(ds.group_items[0], (std::vector<std::size_t>{1}));
}

TEST(Load, MalformedInputIsADataError) {
  const std::vector<std::array<std::string, 3>> cases{
      {"0\t0,x\n", "", "0\t1\n"},         // non-numeric member
      {"0 0,1\n", "", "0\t1\n"},          // missing tab
      {"0\t0\n", "0\t1\t2\n", "0\t1\n"},  // three fields
      {"0\t0\n", "", "3\t1\n"},           // group without member line
      {"0\t0\n0\t1\n", "", "0\t1\n"},     // duplicated group line
      {"0\t-1\n", "", "0\t1\n"},          // negative id
  };
  for (const auto& [members, users, groups] : cases) {
    TempDir dir("malformed");
    write_file(dir.path / "group_members.tsv", members);
    write_file(dir.path / "user_item.tsv", users);
    write_file(dir.path / "group_item.tsv", groups);
    EXPECT_THROW(load_dataset(dir.path), DataError) << members << "|" << users << "|" << groups;
  }
}

TEST(Load, MissingFileAndOutOfRangeIdWithStats) {
  TempDir dir("missing");
  write_file(dir.path / "group_members.tsv", "0\t0\n");
  EXPECT_THROW(load_dataset(dir.path), DataError);
  write_file(dir.path / "user_item.tsv", "0\t9\n");
  write_file(dir.path / "group_item.tsv", "0\t1\n");
  write_file(dir.path / "stats.json", R"({"num_users":1,"num_items":5,"num_groups":1})");
  EXPECT_THROW(load_dataset(dir.path), DataError);
}

TEST(Split, ThreePositivesGiveOneOfEach) {
  const auto ds = leave_one_out_split(tiny_with_positives(10, {2, 5, 7}), 1);
  const auto& s = ds.group_splits[0];
  ASSERT_TRUE(s.test && s.validation);
  EXPECT_EQ(s.train.size(), 1u);
  EXPECT_FALSE(s.train_only);
  std::set<std::size_t> all{*s.test, *s.validation, s.train[0]};
  EXPECT_EQ(all, (std::set<std::size_t>{2, 5, 7}));
}

TEST(Split, TwoPositivesAreTrainOnly) {
  const auto ds = leave_one_out_split(tiny_with_positives(10, {2, 5}), 1);
  const auto& s = ds.user_splits[0];
  EXPECT_TRUE(s.train_only);
  EXPECT_EQ(s.train, (std::vector<std::size_t>{2, 5}));
  EXPECT_FALSE(s.test.has_value());
  EXPECT_FALSE(s.validation.has_value());
}

TEST(Split, DeterministicAndDisjoint) {
  const auto raw = generate_synthetic(SyntheticConfig{}).data;
  const auto a = leave_one_out_split(raw, 9), b = leave_one_out_split(raw, 9);
  EXPECT_EQ(a, b);
  for (std::size_t g = 0; g < a.num_groups; ++g) {
    const auto& s = a.group_splits[g];
    if (s.train_only) continue;
    std::multiset<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(*s.test);
    all.insert(*s.validation);
    EXPECT_EQ(std::vector<std::size_t>(all.begin(), all.end()), a.group_items[g]);
  }
}

TEST(Negatives, ForcedOutcome) {
  const auto ds = tiny_with_positives(5, {0, 1, 2, 3});
  EXPECT_EQ(sample_negatives(ds, Task::group, 0, 1, 3), (std::vector<std::size_t>{4}));
  EXPECT_THROW(sample_negatives(ds, Task::group, 0, 2, 3), SamplingError);
}

TEST(Negatives, NeverPositiveNeverRepeatedAndReproducible) {
  const auto ds = fixtures::split_synthetic(50, 100, 20);
  Rng rng(12);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto g = static_cast<std::size_t>(rng.below(ds.num_groups));
    const auto neg = sample_negatives(ds, Task::group, g, 1 + rng.below(20), rng);
    std::set<std::size_t> unique(neg.begin(), neg.end());
    ASSERT_EQ(unique.size(), neg.size());
    for (const auto i : neg) ASSERT_FALSE(ds.is_positive(Task::group, g, i));
  }
  EXPECT_EQ(sample_negatives(ds, Task::user, 3, 30, 5), sample_negatives(ds, Task::user, 3, 30, 5));
  // the dense path (more than a quarter of the catalog) obeys the same rules
  const auto many = sample_negatives(ds, Task::user, 3, ds.num_items - ds.user_items[3].size(), 5);
  EXPECT_EQ(std::set<std::size_t>(many.begin(), many.end()).size(), many.size());
}

TEST(Views, MaskCounts) {
  EXPECT_EQ(view_mask_count(5, 0.4), 2u);
  EXPECT_EQ(view_mask_count(4, 0.2), 1u);
  EXPECT_EQ(view_mask_count(5, 0.8), 4u);
  EXPECT_EQ(view_mask_count(3, 0.99), 2u);
}

TEST(Batches, LayoutViewsAndThresholdGuard) {
  auto ds = fixtures::split_synthetic(50, 100, 20);
  BatchConfig cfg;
  cfg.batch_size = 8;
  cfg.aug_threshold = 3;
  cfg.mask_ratio = 0.4;
  const auto batches = make_batches(ds, Task::group, cfg, 1);
  std::size_t positives = 0;
  for (const auto& b : batches) {
    ASSERT_EQ(b.size() % 5, 0u);
    for (std::size_t r = 0; r < b.size(); ++r) {
      const std::size_t g = b.group_ids[r];
      EXPECT_EQ(b.labels[r], r % 5 == 0 ? 1 : 0);
      EXPECT_EQ(ds.is_positive(Task::group, g, b.item_ids[r]), r % 5 == 0);
      const auto& members = ds.group_members[g];
      for (std::size_t j = 0; j < b.max_members; ++j) {
        EXPECT_EQ(b.mask(r)[j], j < members.size());
        EXPECT_EQ(b.members(r)[j], j < members.size() ? members[j] : ds.padding_id());
      }
      positives += b.labels[r];
    }
    for (const auto& v : b.aug_views) {
      const std::size_t size = ds.group_members[b.group_ids[v.row]].size();
      EXPECT_GE(size, 3u);
      EXPECT_EQ(b.labels[v.row], 1);
      const auto kept = [](const std::vector<std::uint8_t>& m) { return std::count(m.begin(), m.end(), 1); };
      EXPECT_EQ(static_cast<std::size_t>(kept(v.mask_a)), size - view_mask_count(size, 0.4));
      EXPECT_EQ(static_cast<std::size_t>(kept(v.mask_b)), size - view_mask_count(size, 0.4));
    }
  }
  std::size_t train_total = 0;
  for (const auto& s : ds.group_splits) train_total += s.train.size();
  EXPECT_EQ(positives, train_total);
}

TEST(Batches, GroupsOfTwoGetNoViewsAtThresholdThree) {
  InteractionDataset ds;
  ds.num_users = 4;
  ds.num_items = 20;
  ds.num_groups = 2;
  ds.group_members = {{0, 1}, {2, 3}};
  ds.user_items = {{1, 2, 3}, {1, 2, 3}, {4, 5, 6}, {4, 5, 6}};
  ds.group_items = {{1, 2, 3, 4}, {4, 5, 6, 7}};
  ds = leave_one_out_split(ds, 0);
  const auto batches = make_batches(ds, Task::group, BatchConfig{}, 0);
  for (const auto& b : batches) EXPECT_TRUE(b.aug_views.empty());
}

TEST(Synthetic, DisjointClustersKeepGroupsInside) {
  SyntheticConfig sc;
  sc.cross_affinity = 0.0;
  const auto s = generate_synthetic(sc);
  for (std::size_t g = 0; g < sc.num_groups; ++g) {
    for (const auto u : s.data.group_members[g]) EXPECT_EQ(s.user_cluster[u], s.group_cluster[g]);
    for (const auto i : s.data.group_items[g]) EXPECT_EQ(s.item_cluster[i], s.group_cluster[g]);
  }
}

TEST(Synthetic, AverageGroupSizeNearConfiguredMean) {
  for (std::uint64_t seed : {1, 2, 3}) {
    SyntheticConfig sc;
    sc.seed = seed;
    const auto stats = compute_stats(generate_synthetic(sc).data);
    EXPECT_NEAR(stats.avg_group_size, sc.mean_group_size(), 0.5);
    for (const auto& m : generate_synthetic(sc).data.group_members) {
      EXPECT_GE(m.size(), 2u);
      EXPECT_LE(m.size(), 5u);
    }
  }
}

TEST(Synthetic, SameSeedSameData) {
  EXPECT_EQ(generate_synthetic(SyntheticConfig{}).data, generate_synthetic(SyntheticConfig{}).data);
  SyntheticConfig other;
  other.seed = 8;
  EXPECT_NE(generate_synthetic(other).data, generate_synthetic(SyntheticConfig{}).data);
}

TEST(Synthetic, RejectsSingleCluster) {
  SyntheticConfig sc;
  sc.clusters = 1;
  EXPECT_THROW(generate_synthetic(sc), ConfigError);
}

TEST(Stats, CountsMatchTables) {
  const auto ds = generate_synthetic(SyntheticConfig{}).data;
  const auto s = compute_stats(ds);
  std::size_t ui = 0, gi = 0;
  for (const auto& v : ds.user_items) ui += v.size();
  for (const auto& v : ds.group_items) gi += v.size();
  EXPECT_EQ(s.user_item_interactions, ui);
  EXPECT_EQ(s.group_item_interactions, gi);
  EXPECT_EQ(s.num_users, 200u);
  EXPECT_EQ(s.num_items, 300u);
  EXPECT_EQ(s.num_groups, 80u);
}

#pragma once

// Interaction datasets for group recommendation: TSV ingestion, leave-one-out
// splitting, negative sampling, padded training batches with masking views,
// and a planted-cluster synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "c3/error.hpp"
#include "c3/random.hpp"
#include "json.hpp"

namespace c3 {

enum class Task { user, group };

inline const char* task_name(Task t) { return t == Task::user ? "user" : "group"; }

struct EntitySplit {
  std::vector<std::size_t> train;
  std::optional<std::size_t> validation;
  std::optional<std::size_t> test;
  /// Fewer than three positives: trained on, never ranked.
  bool train_only = false;

  bool operator==(const EntitySplit&) const = default;
};

struct InteractionDataset {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t num_groups = 0;
  std::vector<std::vector<std::size_t>> group_members;
  std::vector<std::vector<std::size_t>> user_items;   // sorted, unique
  std::vector<std::vector<std::size_t>> group_items;  // sorted, unique
  std::vector<EntitySplit> user_splits;               // empty until split
  std::vector<EntitySplit> group_splits;

  bool operator==(const InteractionDataset&) const = default;

  bool has_splits() const {
    return user_splits.size() == num_users && group_splits.size() == num_groups;
  }

  /// Padding member id; the user-embedding table has one extra row for it.
  std::size_t padding_id() const { return num_users; }

  std::size_t entity_count(Task t) const { return t == Task::user ? num_users : num_groups; }

  const std::vector<std::size_t>& positives(Task t, std::size_t e) const {
    return t == Task::user ? user_items.at(e) : group_items.at(e);
  }

  const EntitySplit& split(Task t, std::size_t e) const {
    return t == Task::user ? user_splits.at(e) : group_splits.at(e);
  }

  /// Members fed to the encoder: the group's users, or the single user itself.
  std::vector<std::size_t> members(Task t, std::size_t e) const {
    if (t == Task::user) return {e};
    return group_members.at(e);
  }

  bool is_positive(Task t, std::size_t e, std::size_t item) const {
    const auto& p = positives(t, e);
    return std::binary_search(p.begin(), p.end(), item);
  }

  void validate() const {
    if (group_members.size() != num_groups || group_items.size() != num_groups || user_items.size() != num_users)
      throw DataError("dataset tables disagree with entity counts");
    for (std::size_t g = 0; g < num_groups; ++g) {
      if (group_members[g].empty()) throw DataError("group " + std::to_string(g) + " has no members");
      for (const auto u : group_members[g])
        if (u >= num_users) throw DataError("group " + std::to_string(g) + " member id out of range");
    }
    auto check_items = [&](const std::vector<std::vector<std::size_t>>& sets, const char* what) {
      for (const auto& s : sets) {
        for (std::size_t i = 0; i < s.size(); ++i) {
          if (s[i] >= num_items) throw DataError(std::string(what) + ": item id out of range");
          if (i > 0 && s[i - 1] >= s[i]) throw DataError(std::string(what) + ": positive set not sorted/unique");
        }
      }
    };
    check_items(user_items, "user_items");
    check_items(group_items, "group_items");
  }
};

// ---------------------------------------------------------------------------
// statistics

struct DatasetStats {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t num_groups = 0;
  std::size_t user_item_interactions = 0;
  std::size_t group_item_interactions = 0;
  double avg_group_size = 0.0;

  bool operator==(const DatasetStats&) const = default;
};

inline DatasetStats compute_stats(const InteractionDataset& ds) {
  DatasetStats s;
  s.num_users = ds.num_users;
  s.num_items = ds.num_items;
  s.num_groups = ds.num_groups;
  for (const auto& v : ds.user_items) s.user_item_interactions += v.size();
  for (const auto& v : ds.group_items) s.group_item_interactions += v.size();
  std::size_t members = 0;
  for (const auto& g : ds.group_members) members += g.size();
  s.avg_group_size = ds.num_groups ? static_cast<double>(members) / static_cast<double>(ds.num_groups) : 0.0;
  return s;
}

inline nlohmann::json to_json(const DatasetStats& s) {
  return {{"num_users", s.num_users},
          {"num_items", s.num_items},
          {"num_groups", s.num_groups},
          {"user_item_interactions", s.user_item_interactions},
          {"group_item_interactions", s.group_item_interactions},
          {"avg_group_size", s.avg_group_size}};
}

// ---------------------------------------------------------------------------
// file I/O

namespace detail {

inline std::size_t parse_id(const std::string& tok, const std::string& where) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw DataError(where + ": malformed id '" + tok + "'");
  try {
    return static_cast<std::size_t>(std::stoull(tok));
  } catch (const std::exception&) {
    throw DataError(where + ": id out of range '" + tok + "'");
  }
}

/// Maps raw file ids to dense indices. In dense mode raw ids are kept and
/// bounds-checked; otherwise ids are compacted in first-seen order.
class IdMap {
 public:
  IdMap(std::optional<std::size_t> dense_count, std::string what) : dense_(dense_count), what_(std::move(what)) {}

  std::size_t intern(std::size_t raw, const std::string& where) {
    if (dense_) {
      if (raw >= *dense_) throw DataError(where + ": " + what_ + " id " + std::to_string(raw) + " out of range");
      return raw;
    }
    const auto [it, inserted] = map_.try_emplace(raw, map_.size());
    return it->second;
  }

  std::optional<std::size_t> find(std::size_t raw) const {
    if (dense_) return raw < *dense_ ? std::optional<std::size_t>(raw) : std::nullopt;
    const auto it = map_.find(raw);
    return it == map_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
  }

  std::size_t size() const { return dense_ ? *dense_ : map_.size(); }

 private:
  std::optional<std::size_t> dense_;
  std::string what_;
  std::unordered_map<std::size_t, std::size_t> map_;
};

struct TsvLine {
  std::size_t number;
  std::string key;
  std::string value;
};

inline std::vector<TsvLine> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<TsvLine> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string where = path.filename().string() + ":" + std::to_string(number);
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw DataError(where + ": expected exactly two tab-separated fields");
    out.push_back({number, line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline void sort_unique(std::vector<std::size_t>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace detail

/// Reads `group_members.tsv`, `user_item.tsv` and `group_item.tsv` from `dir`.
/// When `stats.json` is present its counts fix the id ranges and file ids are
/// used verbatim; otherwise ids are compacted in first-seen order (groups and
/// users from group_members.tsv first, then user_item.tsv, then group_item.tsv).
inline InteractionDataset load_dataset(const std::filesystem::path& dir) {
  for (const char* f : {"group_members.tsv", "user_item.tsv", "group_item.tsv"})
    if (!std::filesystem::exists(dir / f)) throw DataError("missing file " + (dir / f).string());

  std::optional<std::size_t> users_n, items_n, groups_n;
  if (std::filesystem::exists(dir / "stats.json")) {
    std::ifstream in(dir / "stats.json");
    nlohmann::json j;
    try {
      in >> j;
      users_n = j.at("num_users").get<std::size_t>();
      items_n = j.at("num_items").get<std::size_t>();
      groups_n = j.at("num_groups").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("stats.json: ") + e.what());
    }
  }
  detail::IdMap users(users_n, "user"), items(items_n, "item"), groups(groups_n, "group");

  InteractionDataset ds;
  std::vector<std::vector<std::size_t>> members;
  std::vector<bool> seen_group;
  for (const auto& line : detail::read_tsv(dir / "group_members.tsv")) {
    const std::string where = "group_members.tsv:" + std::to_string(line.number);
    const std::size_t g = groups.intern(detail::parse_id(line.key, where), where);
    if (g >= members.size()) {
      members.resize(g + 1);
      seen_group.resize(g + 1, false);
    }
    if (seen_group[g]) throw DataError(where + ": duplicate group line");
    seen_group[g] = true;
    if (line.value.empty()) throw DataError(where + ": empty group");
    std::size_t start = 0;
    while (start <= line.value.size()) {
      auto comma = line.value.find(',', start);
      if (comma == std::string::npos) comma = line.value.size();
      const std::size_t u = users.intern(detail::parse_id(line.value.substr(start, comma - start), where), where);
      if (std::find(members[g].begin(), members[g].end(), u) == members[g].end()) members[g].push_back(u);
      start = comma + 1;
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> ui, gi;
  for (const auto& line : detail::read_tsv(dir / "user_item.tsv")) {
    const std::string where = "user_item.tsv:" + std::to_string(line.number);
    const std::size_t u = users.intern(detail::parse_id(line.key, where), where);
    ui.emplace_back(u, items.intern(detail::parse_id(line.value, where), where));
  }
  for (const auto& line : detail::read_tsv(dir / "group_item.tsv")) {
    const std::string where = "group_item.tsv:" + std::to_string(line.number);
    const auto g = groups.find(detail::parse_id(line.key, where));
    if (!g) throw DataError(where + ": group id " + line.key + " has no member line");
    gi.emplace_back(*g, items.intern(detail::parse_id(line.value, where), where));
  }

  ds.num_users = users.size();
  ds.num_items = items.size();
  ds.num_groups = groups.size();
  members.resize(ds.num_groups);
  for (std::size_t g = 0; g < ds.num_groups; ++g)
    if (members[g].empty()) throw DataError("group " + std::to_string(g) + " is empty or has no member line");
  ds.group_members = std::move(members);
  ds.user_items.assign(ds.num_users, {});
  ds.group_items.assign(ds.num_groups, {});
  for (const auto& [u, i] : ui) ds.user_items[u].push_back(i);
  for (const auto& [g, i] : gi) ds.group_items[g].push_back(i);
  for (auto& v : ds.user_items) detail::sort_unique(v);
  for (auto& v : ds.group_items) detail::sort_unique(v);
  ds.validate();
  return ds;
}

/// Writes the three TSV files plus `stats.json`. Ids are written as dense indices.
inline void save_dataset(const InteractionDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("group_members.tsv");
    for (std::size_t g = 0; g < ds.num_groups; ++g) {
      out << g << '\t';
      for (std::size_t j = 0; j < ds.group_members[g].size(); ++j) out << (j ? "," : "") << ds.group_members[g][j];
      out << '\n';
    }
  }
  auto write_pairs = [&](const char* name, const std::vector<std::vector<std::size_t>>& sets) {
    auto out = open(name);
    for (std::size_t e = 0; e < sets.size(); ++e)
      for (const auto i : sets[e]) out << e << '\t' << i << '\n';
  };
  write_pairs("user_item.tsv", ds.user_items);
  write_pairs("group_item.tsv", ds.group_items);
  auto out = open("stats.json");
  out << to_json(compute_stats(ds)).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// splitting

/// Leave-one-out per entity: one random positive to test, one to validation,
/// the rest to train. Entities with fewer than three positives are flagged
/// train-only and keep every positive in train.
inline InteractionDataset leave_one_out_split(InteractionDataset ds, std::uint64_t seed) {
  auto split_one = [&](const std::vector<std::size_t>& positives, Task task, std::size_t e) {
    EntitySplit s;
    if (positives.size() < 3) {
      s.train = positives;
      s.train_only = true;
      return s;
    }
    std::vector<std::size_t> shuffled = positives;
    Rng rng(seed, task == Task::user ? "split/user" : "split/group", e);
    rng.shuffle(shuffled);
    s.test = shuffled[0];
    s.validation = shuffled[1];
    s.train.assign(shuffled.begin() + 2, shuffled.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
  };
  ds.user_splits.clear();
  ds.group_splits.clear();
  for (std::size_t u = 0; u < ds.num_users; ++u) ds.user_splits.push_back(split_one(ds.user_items[u], Task::user, u));
  for (std::size_t g = 0; g < ds.num_groups; ++g)
    ds.group_splits.push_back(split_one(ds.group_items[g], Task::group, g));
  return ds;
}

// ---------------------------------------------------------------------------
// negative sampling

/// Uniform sample without replacement from the items that are not positives
/// (train, validation or test) of the entity.
inline std::vector<std::size_t> sample_negatives(const InteractionDataset& ds, Task task, std::size_t entity,
                                                 std::size_t n_neg, Rng& rng) {
  const auto& pos = ds.positives(task, entity);
  const std::size_t candidates = ds.num_items - pos.size();
  if (n_neg > candidates)
    throw SamplingError("requested " + std::to_string(n_neg) + " negatives but only " + std::to_string(candidates) +
                        " candidates exist");
  std::vector<std::size_t> out;
  out.reserve(n_neg);
  if (candidates >= 4 * n_neg) {
    std::vector<std::size_t> chosen;
    while (out.size() < n_neg) {
      const auto item = static_cast<std::size_t>(rng.below(ds.num_items));
      if (std::binary_search(pos.begin(), pos.end(), item)) continue;
      if (std::find(out.begin(), out.end(), item) != out.end()) continue;
      out.push_back(item);
    }
    return out;
  }
  std::vector<std::size_t> pool;
  pool.reserve(candidates);
  for (std::size_t i = 0; i < ds.num_items; ++i)
    if (!std::binary_search(pos.begin(), pos.end(), i)) pool.push_back(i);
  for (std::size_t k = 0; k < n_neg; ++k) {
    const auto j = k + static_cast<std::size_t>(rng.below(pool.size() - k));
    std::swap(pool[k], pool[j]);
    out.push_back(pool[k]);
  }
  return out;
}

inline std::vector<std::size_t> sample_negatives(const InteractionDataset& ds, Task task, std::size_t entity,
                                                 std::size_t n_neg, std::uint64_t seed) {
  Rng rng(seed, task == Task::user ? "negatives/user" : "negatives/group", entity);
  return sample_negatives(ds, task, entity, n_neg, rng);
}

// ---------------------------------------------------------------------------
// batching

/// Number of members removed by a training view: floor(r·|g|), raised to one
/// when the floor is zero, and capped so that one member always remains.
inline std::size_t view_mask_count(std::size_t group_size, double ratio) {
  if (group_size < 2) return 0;
  auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(group_size) + 1e-9));
  n = std::max<std::size_t>(n, 1);
  return std::min(n, group_size - 1);
}

struct BatchConfig {
  std::size_t batch_size = 64;       // positive examples per batch
  std::size_t neg_per_pos = 4;
  bool augment = true;               // generate masking views for eligible group positives
  std::size_t aug_threshold = 3;     // minimum group size that receives views
  double mask_ratio = 0.8;
};

/// Two member masks (over the padded row) of one positive group example.
struct AugmentedView {
  std::size_t row = 0;
  std::vector<std::uint8_t> mask_a;
  std::vector<std::uint8_t> mask_b;
};

/// Rows are laid out per positive: the positive row, then its negatives.
struct TrainBatch {
  Task task = Task::group;
  std::size_t max_members = 0;             // Lmax
  std::vector<std::size_t> member_ids;     // rows × Lmax, padded with the padding id
  std::vector<std::uint8_t> member_mask;   // rows × Lmax
  std::vector<std::size_t> item_ids;
  std::vector<std::uint8_t> labels;        // 1 = positive
  std::vector<std::size_t> group_ids;      // entity (user or group) id per row
  std::vector<AugmentedView> aug_views;

  std::size_t size() const { return item_ids.size(); }
  std::span<const std::size_t> members(std::size_t r) const { return {member_ids.data() + r * max_members, max_members}; }
  std::span<const std::uint8_t> mask(std::size_t r) const { return {member_mask.data() + r * max_members, max_members}; }
};

namespace detail {

inline std::vector<std::uint8_t> random_view_mask(std::span<const std::uint8_t> base, std::size_t group_size,
                                                  std::size_t remove, Rng& rng) {
  std::vector<std::uint8_t> mask(base.begin(), base.end());
  std::vector<std::size_t> positions(group_size);
  for (std::size_t j = 0; j < group_size; ++j) positions[j] = j;
  for (std::size_t k = 0; k < remove; ++k) {
    const auto j = k + static_cast<std::size_t>(rng.below(group_size - k));
    std::swap(positions[k], positions[j]);
    mask[positions[k]] = 0;
  }
  return mask;
}

}  // namespace detail

/// All training positives of `task`, shuffled and chunked; each positive is
/// followed by `neg_per_pos` freshly sampled negatives for the same entity.
inline std::vector<TrainBatch> make_batches(const InteractionDataset& ds, Task task, const BatchConfig& cfg,
                                            std::uint64_t seed) {
  if (!ds.has_splits()) throw StateError("make_batches: dataset has no split");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> examples;
  for (std::size_t e = 0; e < ds.entity_count(task); ++e)
    for (const auto item : ds.split(task, e).train) examples.emplace_back(e, item);
  Rng rng(seed, task == Task::user ? "batches/user" : "batches/group");
  rng.shuffle(examples);

  std::vector<TrainBatch> batches;
  for (std::size_t start = 0; start < examples.size(); start += cfg.batch_size) {
    const std::size_t stop = std::min(examples.size(), start + cfg.batch_size);
    TrainBatch b;
    b.task = task;
    for (std::size_t k = start; k < stop; ++k)
      b.max_members = std::max(b.max_members, ds.members(task, examples[k].first).size());
    const std::size_t rows = (stop - start) * (1 + cfg.neg_per_pos);
    b.member_ids.assign(rows * b.max_members, ds.padding_id());
    b.member_mask.assign(rows * b.max_members, 0);
    std::size_t row = 0;
    auto emit = [&](std::size_t entity, const std::vector<std::size_t>& members, std::size_t item, bool positive) {
      for (std::size_t j = 0; j < members.size(); ++j) {
        b.member_ids[row * b.max_members + j] = members[j];
        b.member_mask[row * b.max_members + j] = 1;
      }
      b.item_ids.push_back(item);
      b.labels.push_back(positive ? 1 : 0);
      b.group_ids.push_back(entity);
      return row++;
    };
    for (std::size_t k = start; k < stop; ++k) {
      const auto [entity, item] = examples[k];
      const auto members = ds.members(task, entity);
      const std::size_t pos_row = emit(entity, members, item, true);
      for (const auto neg : sample_negatives(ds, task, entity, cfg.neg_per_pos, rng)) emit(entity, members, neg, false);
      if (task == Task::group && cfg.augment && members.size() >= cfg.aug_threshold) {
        const std::size_t remove = view_mask_count(members.size(), cfg.mask_ratio);
        AugmentedView v;
        v.row = pos_row;
        v.mask_a = detail::random_view_mask(b.mask(pos_row), members.size(), remove, rng);
        v.mask_b = detail::random_view_mask(b.mask(pos_row), members.size(), remove, rng);
        b.aug_views.push_back(std::move(v));
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// synthetic data

struct SyntheticConfig {
  std::size_t num_users = 200;
  std::size_t num_items = 300;
  std::size_t num_groups = 80;
  std::size_t clusters = 2;
  std::uint64_t seed = 7;
  /// Probability mass a draw puts outside the entity's own cluster.
  double cross_affinity = 0.05;
  /// Zipf exponent of within-cluster item popularity.
  double popularity_skew = 0.3;
  /// Extra weight of an item per unit fraction of group members who interacted with it.
  double consensus_weight = 30.0;
  std::size_t user_positives_min = 8;
  std::size_t user_positives_max = 20;
  std::size_t group_positives_min = 10;
  std::size_t group_positives_max = 20;
  std::size_t group_size_min = 2;
  std::size_t group_size_max = 5;

  double mean_group_size() const { return 0.5 * static_cast<double>(group_size_min + group_size_max); }
};

struct SyntheticDataset {
  InteractionDataset data;
  std::vector<std::size_t> user_cluster;
  std::vector<std::size_t> item_cluster;
  std::vector<std::size_t> group_cluster;
};

/// Planted-cluster generator. Users and items are split evenly across
/// clusters; each entity draws its positives mostly from its own cluster,
/// weighted by a Zipf popularity. Groups are formed mostly within one cluster
/// and prefer items their members interacted with.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  const std::size_t C = cfg.clusters;
  if (C < 2) throw ConfigError("generate_synthetic: need at least 2 planted clusters");
  if (cfg.num_items < C || cfg.num_users < C) throw ConfigError("generate_synthetic: fewer users/items than clusters");
  if (cfg.group_size_min < 1 || cfg.group_size_min > cfg.group_size_max)
    throw ConfigError("generate_synthetic: invalid group size range");
  if (cfg.num_users / C < cfg.group_size_max)
    throw ConfigError("generate_synthetic: clusters too small for the maximum group size");
  if (cfg.user_positives_min > cfg.user_positives_max || cfg.group_positives_min > cfg.group_positives_max)
    throw ConfigError("generate_synthetic: invalid positive-count range");
  if (cfg.cross_affinity < 0.0 || cfg.cross_affinity > 1.0) throw ConfigError("cross_affinity must lie in [0,1]");

  Rng rng(cfg.seed, "synthetic");
  SyntheticDataset out;
  auto balanced = [&](std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i % C;
    rng.shuffle(v);
    return v;
  };
  out.user_cluster = balanced(cfg.num_users);
  out.item_cluster = balanced(cfg.num_items);

  std::vector<double> popularity(cfg.num_items);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::size_t> items;
    for (std::size_t i = 0; i < cfg.num_items; ++i)
      if (out.item_cluster[i] == c) items.push_back(i);
    rng.shuffle(items);
    for (std::size_t r = 0; r < items.size(); ++r)
      popularity[items[r]] = 1.0 / std::pow(static_cast<double>(r + 1), cfg.popularity_skew);
  }

  auto cluster_weights = [&](std::size_t c) {
    std::vector<double> w(cfg.num_items);
    const double outside = C > 1 ? cfg.cross_affinity / static_cast<double>(C - 1) : 0.0;
    for (std::size_t i = 0; i < cfg.num_items; ++i)
      w[i] = popularity[i] * (out.item_cluster[i] == c ? 1.0 - cfg.cross_affinity : outside);
    return w;
  };
  auto draw_without_replacement = [&](std::vector<double> w, std::size_t n) {
    const auto available = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double x) { return x > 0; }));
    n = std::min(n, available);
    std::vector<std::size_t> picked;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = rng.weighted(w);
      picked.push_back(i);
      w[i] = 0.0;
    }
    std::sort(picked.begin(), picked.end());
    return picked;
  };

  InteractionDataset& ds = out.data;
  ds.num_users = cfg.num_users;
  ds.num_items = cfg.num_items;
  ds.num_groups = cfg.num_groups;
  ds.user_items.resize(cfg.num_users);
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    const auto n = static_cast<std::size_t>(rng.between(cfg.user_positives_min, cfg.user_positives_max));
    ds.user_items[u] = draw_without_replacement(cluster_weights(out.user_cluster[u]), n);
  }

  std::vector<std::vector<std::size_t>> users_by_cluster(C);
  for (std::size_t u = 0; u < cfg.num_users; ++u) users_by_cluster[out.user_cluster[u]].push_back(u);

  ds.group_members.resize(cfg.num_groups);
  ds.group_items.resize(cfg.num_groups);
  out.group_cluster.resize(cfg.num_groups);
  for (std::size_t g = 0; g < cfg.num_groups; ++g) {
    const auto c = static_cast<std::size_t>(rng.below(C));
    out.group_cluster[g] = c;
    const auto size = static_cast<std::size_t>(rng.between(cfg.group_size_min, cfg.group_size_max));
    auto& members = ds.group_members[g];
    while (members.size() < size) {
      std::size_t source = c;
      if (rng.bernoulli(cfg.cross_affinity)) source = (c + 1 + rng.below(C - 1)) % C;
      const auto& pool = users_by_cluster[source];
      const std::size_t u = pool[rng.below(pool.size())];
      if (std::find(members.begin(), members.end(), u) == members.end()) members.push_back(u);
    }
    std::vector<double> w = cluster_weights(c);
    std::vector<double> share(cfg.num_items, 0.0);
    for (const auto u : members)
      for (const auto i : ds.user_items[u]) share[i] += 1.0 / static_cast<double>(size);
    for (std::size_t i = 0; i < cfg.num_items; ++i) w[i] *= 1.0 + cfg.consensus_weight * share[i];
    const auto n = static_cast<std::size_t>(rng.between(cfg.group_positives_min, cfg.group_positives_max));
    ds.group_items[g] = draw_without_replacement(std::move(w), n);
  }
  ds.validate();
  return out;
}

}  // namespace c3

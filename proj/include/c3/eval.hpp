#pragma once

// Leave-one-out ranking evaluation (HR@K, NDCG@K), group-size breakdowns, a
// popularity baseline, and the consensus-robustness harness that measures how
// far a group representation drifts when members are masked out.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "c3/data.hpp"
#include "c3/error.hpp"
#include "c3/model.hpp"
#include "c3/random.hpp"
#include "json.hpp"

namespace c3 {

/// One scoring request. Model scorers read `members`/`mask`; baselines may
/// use `task`/`entity` instead.
struct Query {
  Task task;
  std::size_t entity;
  std::span<const std::size_t> members;
  std::span<const std::uint8_t> mask;
  std::size_t item;
};

template <class S>
concept Scorer = requires(const S& s, const Query& q) {
  { s(q) } -> std::convertible_to<double>;
};

struct ModelScorer {
  const C3Model* model;
  double operator()(const Query& q) const { return score(*model, q.members, q.mask, q.item); }
  std::vector<double> score_many(const Query& q, std::span<const std::size_t> items) const {
    return score_items(*model, q.members, q.mask, items);
  }
};

/// Scorers that can score one query against many items at once.
template <typename S>
concept BatchScorer = Scorer<S> && requires(const S& s, const Query& q, std::span<const std::size_t> items) {
  { s.score_many(q, items) } -> std::convertible_to<std::vector<double>>;
};

/// Scores items by how often they appear in the task's training positives.
struct PopularityScorer {
  std::vector<double> user_counts;
  std::vector<double> group_counts;
  double operator()(const Query& q) const {
    return q.task == Task::user ? user_counts[q.item] : group_counts[q.item];
  }
};

inline PopularityScorer popularity_baseline(const InteractionDataset& ds) {
  if (!ds.has_splits()) throw StateError("popularity_baseline: dataset has no split");
  PopularityScorer p{std::vector<double>(ds.num_items, 0.0), std::vector<double>(ds.num_items, 0.0)};
  for (const auto& s : ds.user_splits)
    for (const auto i : s.train) p.user_counts[i] += 1.0;
  for (const auto& s : ds.group_splits)
    for (const auto i : s.train) p.group_counts[i] += 1.0;
  return p;
}

/// Deterministic pseudo-random scores, uniform in [0,1) per (task, entity, item).
struct RandomScorer {
  std::uint64_t seed = 0;
  double operator()(const Query& q) const {
    const std::uint64_t h =
        derive_seed(seed, q.task == Task::user ? "random/user" : "random/group", q.entity * 1000003ULL + q.item);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }
};

// ---------------------------------------------------------------------------
// metrics

inline double hr_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (k < 1) throw ConfigError("hr_at_k: K must be >= 1");
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto r : ranks) {
    if (r < 1) throw ConfigError("ranks are 1-based");
    hits += r <= k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

/// With one relevant item the ideal DCG is 1, so each entity contributes 1/log₂(rank+1) inside the cut-off.
inline double ndcg_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (k < 1) throw ConfigError("ndcg_at_k: K must be >= 1");
  if (ranks.empty()) return 0.0;
  double sum = 0.0;
  for (const auto r : ranks) {
    if (r < 1) throw ConfigError("ranks are 1-based");
    if (r <= k) sum += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return sum / static_cast<double>(ranks.size());
}

// ---------------------------------------------------------------------------
// ranking

enum class Target { validation, test };

inline std::uint64_t eval_stream_seed(std::uint64_t seed, Task task, std::size_t entity) {
  return derive_seed(seed, task == Task::user ? "eval/user" : "eval/group", entity);
}

/// Rank (1-based) of `target_item` against `n_eval_neg` sampled negatives,
/// by descending score with ties broken by ascending item id.
template <Scorer S>
std::size_t rank_item(const S& scorer, const InteractionDataset& ds, Task task, std::size_t entity,
                      std::span<const std::size_t> members, std::span<const std::uint8_t> mask,
                      std::size_t target_item, std::size_t n_eval_neg, std::uint64_t seed) {
  Rng rng(eval_stream_seed(seed, task, entity));
  const auto negatives = sample_negatives(ds, task, entity, n_eval_neg, rng);
  std::vector<double> scores;
  if constexpr (BatchScorer<S>) {
    std::vector<std::size_t> items{target_item};
    items.insert(items.end(), negatives.begin(), negatives.end());
    scores = scorer.score_many(Query{task, entity, members, mask, target_item}, items);
  } else {
    scores.push_back(scorer(Query{task, entity, members, mask, target_item}));
    for (const auto n : negatives) scores.push_back(scorer(Query{task, entity, members, mask, n}));
  }
  const double target = scores[0];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < negatives.size(); ++j) {
    const double s = scores[j + 1];
    if (s > target || (s == target && negatives[j] < target_item)) ++rank;
  }
  return rank;
}

template <Scorer S>
std::size_t rank_entity(const S& scorer, const InteractionDataset& ds, Task task, std::size_t entity,
                        std::size_t n_eval_neg, std::uint64_t seed, Target target = Target::test) {
  const EntitySplit& sp = ds.split(task, entity);
  const auto& item = target == Target::test ? sp.test : sp.validation;
  if (!item) throw StateError("rank_entity: entity has no held-out item");
  const auto members = ds.members(task, entity);
  const std::vector<std::uint8_t> mask(members.size(), 1);
  return rank_item(scorer, ds, task, entity, members, mask, *item, n_eval_neg, seed);
}

// ---------------------------------------------------------------------------
// reports

inline constexpr std::array<std::size_t, 3> kHitCutoffs{1, 5, 10};
inline constexpr std::array<std::size_t, 2> kNdcgCutoffs{5, 10};

struct TaskMetrics {
  std::size_t n_evaluated = 0;
  std::array<double, 3> hr{};    // @1, @5, @10
  std::array<double, 2> ndcg{};  // @5, @10

  double hr_at(std::size_t k) const {
    for (std::size_t i = 0; i < kHitCutoffs.size(); ++i)
      if (kHitCutoffs[i] == k) return hr[i];
    throw ConfigError("no HR@" + std::to_string(k) + " in report");
  }
  double ndcg_at(std::size_t k) const {
    for (std::size_t i = 0; i < kNdcgCutoffs.size(); ++i)
      if (kNdcgCutoffs[i] == k) return ndcg[i];
    throw ConfigError("no NDCG@" + std::to_string(k) + " in report");
  }
};

inline TaskMetrics metrics_from_ranks(std::span<const std::size_t> ranks) {
  TaskMetrics m;
  m.n_evaluated = ranks.size();
  for (std::size_t i = 0; i < kHitCutoffs.size(); ++i) m.hr[i] = hr_at_k(ranks, kHitCutoffs[i]);
  for (std::size_t i = 0; i < kNdcgCutoffs.size(); ++i) m.ndcg[i] = ndcg_at_k(ranks, kNdcgCutoffs[i]);
  return m;
}

struct SizeBucket {
  const char* label;
  std::size_t min_size;
  std::size_t max_size;  // inclusive
};

inline constexpr std::array<SizeBucket, 3> kSizeBuckets{{{"2-5", 2, 5}, {"6-9", 6, 9}, {"10+", 10, SIZE_MAX}}};

struct EvalReport {
  TaskMetrics user;
  TaskMetrics group;
  std::array<TaskMetrics, 3> group_by_size;  // aligned with kSizeBuckets
  std::uint64_t seed = 0;
  std::size_t n_eval_neg = 0;
};

struct EvalConfig {
  std::size_t n_eval_neg = 100;
  std::uint64_t seed = 0;
  Target target = Target::test;
  bool users = true;
  bool groups = true;
};

/// Ranks of every entity of `task` that has a held-out item.
template <Scorer S>
std::vector<std::pair<std::size_t, std::size_t>> rank_all(const S& scorer, const InteractionDataset& ds, Task task,
                                                          const EvalConfig& cfg) {
  std::vector<std::pair<std::size_t, std::size_t>> out;  // (entity, rank)
  for (std::size_t e = 0; e < ds.entity_count(task); ++e) {
    const EntitySplit& sp = ds.split(task, e);
    if (sp.train_only || !(cfg.target == Target::test ? sp.test : sp.validation)) continue;
    out.emplace_back(e, rank_entity(scorer, ds, task, e, cfg.n_eval_neg, cfg.seed, cfg.target));
  }
  return out;
}

template <Scorer S>
EvalReport evaluate(const S& scorer, const InteractionDataset& ds, const EvalConfig& cfg) {
  if (!ds.has_splits()) throw StateError("evaluate: dataset has no split");
  EvalReport rep;
  rep.seed = cfg.seed;
  rep.n_eval_neg = cfg.n_eval_neg;
  auto ranks_only = [](const std::vector<std::pair<std::size_t, std::size_t>>& v) {
    std::vector<std::size_t> r;
    for (const auto& [e, rank] : v) r.push_back(rank);
    return r;
  };
  if (cfg.users) rep.user = metrics_from_ranks(ranks_only(rank_all(scorer, ds, Task::user, cfg)));
  if (cfg.groups) {
    const auto ranked = rank_all(scorer, ds, Task::group, cfg);
    rep.group = metrics_from_ranks(ranks_only(ranked));
    for (std::size_t b = 0; b < kSizeBuckets.size(); ++b) {
      std::vector<std::size_t> r;
      for (const auto& [g, rank] : ranked) {
        const auto size = ds.group_members[g].size();
        if (size >= kSizeBuckets[b].min_size && size <= kSizeBuckets[b].max_size) r.push_back(rank);
      }
      rep.group_by_size[b] = metrics_from_ranks(r);
    }
  }
  return rep;
}

inline nlohmann::json to_json(const TaskMetrics& m) {
  nlohmann::json j{{"n_evaluated", m.n_evaluated}};
  for (std::size_t i = 0; i < kHitCutoffs.size(); ++i) j["HR@" + std::to_string(kHitCutoffs[i])] = m.hr[i];
  for (std::size_t i = 0; i < kNdcgCutoffs.size(); ++i) j["NDCG@" + std::to_string(kNdcgCutoffs[i])] = m.ndcg[i];
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json buckets = nlohmann::json::object();
  for (std::size_t b = 0; b < kSizeBuckets.size(); ++b) buckets[kSizeBuckets[b].label] = to_json(r.group_by_size[b]);
  return {{"user", to_json(r.user)},
          {"group", to_json(r.group)},
          {"group_by_size", buckets},
          {"seed", r.seed},
          {"n_eval_neg", r.n_eval_neg}};
}

inline void print_table(std::ostream& os, const EvalReport& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %6s %8s %8s %8s %8s %8s\n", "task", "n", "HR@1", "HR@5", "HR@10", "NDCG@5",
                "NDCG@10");
  os << line;
  auto row = [&](const std::string& name, const TaskMetrics& m) {
    std::snprintf(line, sizeof line, "%-12s %6zu %8.4f %8.4f %8.4f %8.4f %8.4f\n", name.c_str(), m.n_evaluated, m.hr[0],
                  m.hr[1], m.hr[2], m.ndcg[0], m.ndcg[1]);
    os << line;
  };
  row("user", r.user);
  row("group", r.group);
  for (std::size_t b = 0; b < kSizeBuckets.size(); ++b)
    if (r.group_by_size[b].n_evaluated) row(std::string("group ") + kSizeBuckets[b].label, r.group_by_size[b]);
}

// ---------------------------------------------------------------------------
// consensus robustness

/// Members removed when probing robustness: floor(r·|g|), keeping at least one.
inline std::size_t drift_mask_count(std::size_t group_size, double ratio) {
  if (group_size == 0) return 0;
  const auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(group_size) + 1e-9));
  return std::min(n, group_size - 1);
}

/// Item token used when extracting a group's representation: the held-out
/// test item, else its first training positive.
inline std::optional<std::size_t> anchor_item(const InteractionDataset& ds, std::size_t g) {
  if (ds.has_splits()) {
    const auto& sp = ds.group_splits[g];
    if (sp.test) return sp.test;
    if (!sp.train.empty()) return sp.train.front();
    return std::nullopt;
  }
  if (ds.group_items[g].empty()) return std::nullopt;
  return ds.group_items[g].front();
}

inline std::vector<std::uint8_t> random_member_mask(std::size_t size, std::size_t remove, Rng& rng) {
  std::vector<std::uint8_t> mask(size, 1);
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  for (std::size_t k = 0; k < remove; ++k) {
    const auto j = k + static_cast<std::size_t>(rng.below(size - k));
    std::swap(idx[k], idx[j]);
    mask[idx[k]] = 0;
  }
  return mask;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

struct DriftEntry {
  std::size_t group = 0;
  std::size_t trial = 0;
  std::size_t removed = 0;
  double cosine = 1.0;
  std::size_t rank_original = 0;
  std::size_t rank_masked = 0;
};

struct DriftReport {
  double mask_ratio = 0.0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::vector<DriftEntry> entries;
  double mean_cosine = 0.0;
  double median_cosine = 0.0;
  double min_cosine = 0.0;
  double max_cosine = 0.0;
  double mean_rank_change = 0.0;  // masked − original
};

struct DriftConfig {
  double mask_ratio = 0.8;
  std::size_t trials = 1;
  std::uint64_t seed = 0;
  std::size_t n_eval_neg = 100;
  bool ranks = true;
};

/// For every group of size ≥ 2 with an anchor item: mask floor(r·|g|) random
/// members per trial and compare the masked representation (and the anchor's
/// rank) with the unmasked one.
inline DriftReport consensus_drift(const C3Model& model, const InteractionDataset& ds, const DriftConfig& cfg) {
  DriftReport rep;
  rep.mask_ratio = cfg.mask_ratio;
  rep.trials = cfg.trials;
  rep.seed = cfg.seed;
  const ModelScorer scorer{&model};
  for (std::size_t g = 0; g < ds.num_groups; ++g) {
    const auto& members = ds.group_members[g];
    const auto item = anchor_item(ds, g);
    if (members.size() < 2 || !item) continue;
    const std::vector<std::uint8_t> full(members.size(), 1);
    const Tensor h_full = group_representation(model, members, full, *item);
    std::size_t rank_full = 0;
    if (cfg.ranks) rank_full = rank_item(scorer, ds, Task::group, g, members, full, *item, cfg.n_eval_neg, cfg.seed);
    Rng rng(cfg.seed, "drift", g);
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      DriftEntry e;
      e.group = g;
      e.trial = t;
      e.removed = drift_mask_count(members.size(), cfg.mask_ratio);
      const auto mask = random_member_mask(members.size(), e.removed, rng);
      const Tensor h_masked = group_representation(model, members, mask, *item);
      e.cosine = cosine(h_full.data, h_masked.data);
      e.rank_original = rank_full;
      if (cfg.ranks) e.rank_masked = rank_item(scorer, ds, Task::group, g, members, mask, *item, cfg.n_eval_neg, cfg.seed);
      rep.entries.push_back(e);
    }
  }
  if (!rep.entries.empty()) {
    std::vector<double> c;
    double rank_change = 0.0;
    for (const auto& e : rep.entries) {
      c.push_back(e.cosine);
      rank_change += static_cast<double>(e.rank_masked) - static_cast<double>(e.rank_original);
    }
    std::sort(c.begin(), c.end());
    double sum = 0.0;
    for (const double x : c) sum += x;
    const auto n = c.size();
    rep.mean_cosine = sum / static_cast<double>(n);
    rep.median_cosine = n % 2 ? c[n / 2] : 0.5 * (c[n / 2 - 1] + c[n / 2]);
    rep.min_cosine = c.front();
    rep.max_cosine = c.back();
    rep.mean_rank_change = rank_change / static_cast<double>(n);
  }
  return rep;
}

inline nlohmann::json to_json(const DriftReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"group", e.group},
                       {"trial", e.trial},
                       {"removed", e.removed},
                       {"cosine", e.cosine},
                       {"rank_original", e.rank_original},
                       {"rank_masked", e.rank_masked}});
  return {{"mask_ratio", r.mask_ratio},
          {"trials", r.trials},
          {"seed", r.seed},
          {"n_groups", r.trials ? r.entries.size() / r.trials : 0},
          {"mean_cosine", r.mean_cosine},
          {"median_cosine", r.median_cosine},
          {"min_cosine", r.min_cosine},
          {"max_cosine", r.max_cosine},
          {"mean_rank_change", r.mean_rank_change},
          {"entries", entries}};
}

// ---------------------------------------------------------------------------
// embedding export

inline std::string embedding_csv_header(std::size_t dim) {
  std::string h = "group_id,variant";
  for (std::size_t c = 0; c < dim; ++c) h += ",dim_" + std::to_string(c);
  return h;
}

struct ExportConfig {
  double mask_ratio = 0.8;
  std::size_t masked_variants = 1;
  std::uint64_t seed = 0;
};

/// Writes one `original` row and `masked_variants` `masked` rows per group
/// that has an anchor item. Values use 17 significant digits. Returns the
/// number of data rows written.
inline std::size_t export_embeddings(const C3Model& model, const InteractionDataset& ds,
                                     const std::filesystem::path& path, const ExportConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << embedding_csv_header(model.config.dim) << '\n';
  std::size_t rows = 0;
  char buf[40];
  auto write_row = [&](std::size_t g, const char* variant, const Tensor& h) {
    out << g << ',' << variant;
    for (const double x : h.data) {
      std::snprintf(buf, sizeof buf, ",%.17g", x);
      out << buf;
    }
    out << '\n';
    ++rows;
  };
  for (std::size_t g = 0; g < ds.num_groups; ++g) {
    const auto& members = ds.group_members[g];
    const auto item = anchor_item(ds, g);
    if (!item) continue;
    const std::vector<std::uint8_t> full(members.size(), 1);
    write_row(g, "original", group_representation(model, members, full, *item));
    Rng rng(cfg.seed, "export", g);
    for (std::size_t v = 0; v < cfg.masked_variants; ++v) {
      const auto mask = random_member_mask(members.size(), drift_mask_count(members.size(), cfg.mask_ratio), rng);
      write_row(g, "masked", group_representation(model, members, mask, *item));
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
  return rows;
}

}  // namespace c3

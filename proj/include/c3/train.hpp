#pragma once

// Training loop: alternating user-task and group-task batches, recommendation
// loss on every scored row, InfoNCE over masked views of eligible group
// positives, Adam on every parameter, early stopping on validation group HR@10.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "c3/data.hpp"
#include "c3/error.hpp"
#include "c3/eval.hpp"
#include "c3/loss.hpp"
#include "c3/model.hpp"
#include "c3/numcore.hpp"
#include "json.hpp"

namespace c3 {

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t train_neg_per_pos = 4;
  std::size_t early_stop_patience = 10;
  /// Fraction of batches drawn from the user task.
  double task_mix = 0.5;
  bool no_margin = false;
  bool no_contrastive = false;
  std::size_t n_eval_neg = 100;
  /// Also rank users on the validation split every epoch (logging only).
  bool validate_users = true;

  double effective_alpha() const { return no_margin ? 1.0 : loss.alpha; }
  double effective_beta() const { return no_contrastive ? 0.0 : loss.beta; }

  LossConfig effective_loss() const {
    LossConfig l = loss;
    l.alpha = effective_alpha();
    l.beta = effective_beta();
    return l;
  }

  void validate() const {
    model.validate();
    loss.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (effective_beta() > 0.0 && batch_size < 2) throw ConfigError("batch_size must be >= 2 with contrastive loss");
    if (!(task_mix >= 0.0 && task_mix < 1.0)) throw ConfigError("task_mix must lie in [0,1)");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (epochs == 0) throw ConfigError("epochs must be positive");
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  LossReport user_loss;   // per-batch means
  LossReport group_loss;
  std::size_t user_batches = 0;
  std::size_t group_batches = 0;
  std::size_t degenerate_contrastive_batches = 0;
  double val_user_hr10 = 0.0;
  double val_user_ndcg10 = 0.0;
  double val_group_hr10 = 0.0;
  double val_group_ndcg10 = 0.0;
  double wall_seconds = 0.0;
  bool best = false;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_group_hr10 = -1.0;
  /// Per-batch l_total in training order (both tasks), for dynamics checks.
  std::vector<double> batch_losses;
};

struct TrainResult {
  C3Model best;
  C3Model last;
  TrainLog log;
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const LossReport& r) {
  return {{"l_pos", r.l_pos},   {"l_neg", r.l_neg},   {"l_margin", r.l_margin}, {"l_main", r.l_main},
          {"l_cont", r.l_cont}, {"l_total", r.l_total}, {"n_pos", r.n_pos},     {"n_neg", r.n_neg},
          {"n_pairs", r.n_pairs}};
}

/// One JSON-lines record. Wall time is optional so that logs can be compared bit-for-bit.
inline nlohmann::json to_json(const EpochLog& e, bool with_wall_time = true) {
  nlohmann::json j{{"epoch", e.epoch},
                   {"user_loss", to_json(e.user_loss)},
                   {"group_loss", to_json(e.group_loss)},
                   {"user_batches", e.user_batches},
                   {"group_batches", e.group_batches},
                   {"degenerate_contrastive_batches", e.degenerate_contrastive_batches},
                   {"val_user_hr10", e.val_user_hr10},
                   {"val_user_ndcg10", e.val_user_ndcg10},
                   {"val_group_hr10", e.val_group_hr10},
                   {"val_group_ndcg10", e.val_group_ndcg10},
                   {"best", e.best}};
  if (with_wall_time) j["wall_seconds"] = e.wall_seconds;
  return j;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"dim", c.model.dim},
          {"layers", c.model.layers},
          {"heads", c.model.heads},
          {"ff_dim", c.model.ff()},
          {"dropout", c.model.dropout},
          {"contrastive_pool_includes_item", c.model.contrastive_pool_includes_item},
          {"alpha", c.loss.alpha},
          {"delta", c.loss.delta},
          {"epsilon", c.loss.epsilon},
          {"tau", c.loss.tau},
          {"beta", c.loss.beta},
          {"mask_ratio", c.loss.mask_ratio},
          {"aug_threshold", c.loss.aug_threshold},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"seed", c.seed},
          {"train_neg_per_pos", c.train_neg_per_pos},
          {"early_stop_patience", c.early_stop_patience},
          {"task_mix", c.task_mix},
          {"no_margin", c.no_margin},
          {"no_contrastive", c.no_contrastive},
          {"n_eval_neg", c.n_eval_neg},
          {"validate_users", c.validate_users}};
}

/// Keys understood by apply_json; every TrainConfig field has one.
inline const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    const nlohmann::json defaults = to_json(TrainConfig{});
    for (const auto& [key, v] : defaults.items()) k.push_back(key);
    return k;
  }();
  return keys;
}

/// Overwrites the fields present in a flat JSON object; other keys are ignored.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  auto set = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      try {
        field = j.at(key).get<std::decay_t<decltype(field)>>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
      }
    }
  };
  set("dim", c.model.dim);
  set("layers", c.model.layers);
  set("heads", c.model.heads);
  set("ff_dim", c.model.ff_dim);
  set("dropout", c.model.dropout);
  set("contrastive_pool_includes_item", c.model.contrastive_pool_includes_item);
  set("alpha", c.loss.alpha);
  set("delta", c.loss.delta);
  set("epsilon", c.loss.epsilon);
  set("tau", c.loss.tau);
  set("beta", c.loss.beta);
  set("mask_ratio", c.loss.mask_ratio);
  set("aug_threshold", c.loss.aug_threshold);
  set("epochs", c.epochs);
  set("batch_size", c.batch_size);
  set("lr", c.lr);
  set("seed", c.seed);
  set("train_neg_per_pos", c.train_neg_per_pos);
  set("early_stop_patience", c.early_stop_patience);
  set("task_mix", c.task_mix);
  set("no_margin", c.no_margin);
  set("no_contrastive", c.no_contrastive);
  set("n_eval_neg", c.n_eval_neg);
  set("validate_users", c.validate_users);
}

// ---------------------------------------------------------------------------
// one optimisation step

namespace detail {

inline std::string diagnose(const TrainBatch& batch, const std::vector<double>& values, const LossReport& rep) {
  std::ostringstream os;
  os << "non-finite loss in " << task_name(batch.task) << " batch: l_pos=" << rep.l_pos << " l_neg=" << rep.l_neg
     << " l_margin=" << rep.l_margin << " l_cont=" << rep.l_cont << "\nrows (entity, item, label, score):";
  for (std::size_t r = 0; r < batch.size(); ++r)
    os << "\n  " << batch.group_ids[r] << ' ' << batch.item_ids[r] << ' ' << int(batch.labels[r]) << ' ' << values[r];
  return os.str();
}

}  // namespace detail

/// Total loss of one batch: scores → L_main over all rows, plus β·InfoNCE over
/// the augmented views of group batches. With `backward`, gradients are
/// accumulated into the model. Masked members are dropped before the encoder,
/// which is equivalent to attending with −∞ logits on them. `relu_pattern`,
/// when given, receives the sign pattern of every ReLU input.
inline LossReport batch_objective(C3Model& model, const TrainBatch& batch, const LossConfig& loss_cfg, Rng* rng,
                                  bool backward, bool* degenerate_contrastive = nullptr,
                                  std::vector<std::uint8_t>* relu_pattern = nullptr) {
  const std::size_t rows = batch.size();
  std::vector<ExampleInput> inputs;
  inputs.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) inputs.push_back({batch.members(r), batch.mask(r), batch.item_ids[r]});
  ForwardTrace trace = forward_batch(model, inputs, rng, true);
  const Scores scores = pool_and_score_all(model, trace);
  const std::vector<double>& values = scores.values;
  RecommendationLoss rec = recommendation_loss(values, batch.labels, batch.group_ids, loss_cfg);
  LossReport rep = rec.report;

  std::optional<ForwardTrace> view_trace;
  InfoNceResult nce;
  const Pooling pooling = contrastive_pooling(model);
  if (loss_cfg.beta > 0.0 && batch.task == Task::group && !batch.aug_views.empty()) {
    std::vector<ExampleInput> view_inputs;
    for (const AugmentedView& v : batch.aug_views)
      for (const auto* mask : {&v.mask_a, &v.mask_b})
        view_inputs.push_back({batch.members(v.row), *mask, batch.item_ids[v.row]});
    view_trace = forward_batch(model, view_inputs, rng, true);
    nce = info_nce(pool_segments(*view_trace, pooling), loss_cfg.tau);
    if (nce.degenerate && degenerate_contrastive) *degenerate_contrastive = true;
    rep.l_cont = nce.loss;
  }
  rep.l_total = total_loss(rep.l_main, rep.l_cont, loss_cfg.beta);
  if (!std::isfinite(rep.l_total)) throw NumericalError(detail::diagnose(batch, values, rep));
  if (relu_pattern) {
    append_relu_pattern(trace, *relu_pattern);
    if (view_trace) append_relu_pattern(*view_trace, *relu_pattern);
  }
  if (!backward) return rep;

  score_backward(model, trace, scores, rec.d_scores);
  encoder_backward(model, trace);
  if (view_trace && !nce.degenerate) {
    for (double& x : nce.grad.data) x *= loss_cfg.beta;
    pool_backward(*view_trace, pooling, nce.grad);
    encoder_backward(model, *view_trace);
  }
  return rep;
}

class Trainer {
 public:
  Trainer(const InteractionDataset& ds, const TrainConfig& cfg)
      : ds_(ds),
        cfg_(cfg),
        loss_cfg_(cfg.effective_loss()),
        model_(cfg.model, ds.num_users, ds.num_items, derive_seed(cfg.seed, "init")),
        dropout_rng_(cfg.seed, "dropout") {
    cfg.validate();
    if (!ds.has_splits()) throw StateError("train: dataset has no split");
    for (Tensor* p : model_.parameters()) adam_.push_back(make_adam_state(*p, cfg.lr));
  }

  C3Model& model() { return model_; }
  const C3Model& model() const { return model_; }

  BatchConfig batch_config() const {
    BatchConfig b;
    b.batch_size = cfg_.batch_size;
    b.neg_per_pos = cfg_.train_neg_per_pos;
    b.augment = loss_cfg_.beta > 0.0;
    b.aug_threshold = loss_cfg_.aug_threshold;
    b.mask_ratio = loss_cfg_.mask_ratio;
    return b;
  }

  /// Forward, loss, backward and (optionally) the Adam update for one batch.
  /// Gradients are left in the parameters when `update` is false.
  LossReport step(const TrainBatch& batch, bool update = true, bool* degenerate_contrastive = nullptr) {
    Rng* rng = model_.config.dropout > 0.0 ? &dropout_rng_ : nullptr;
    const LossReport rep = batch_objective(model_, batch, loss_cfg_, rng, true, degenerate_contrastive);
    const auto pad = model_.user_emb.grad_row(model_.padding_id());
    if (std::any_of(pad.begin(), pad.end(), [](double x) { return x != 0.0; }))
      throw StateError("padding embedding received a gradient");
    if (update) {
      const auto params = model_.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (const double g : params[i]->grad) require_finite(g, "parameter gradient");
        adam_step(*params[i], adam_[i]);
      }
    }
    return rep;
  }

 private:
  const InteractionDataset& ds_;
  TrainConfig cfg_;
  LossConfig loss_cfg_;
  C3Model model_;
  std::vector<AdamState> adam_;
  Rng dropout_rng_;
};

namespace detail {

inline void accumulate(LossReport& acc, const LossReport& r) {
  acc.l_pos += r.l_pos;
  acc.l_neg += r.l_neg;
  acc.l_margin += r.l_margin;
  acc.l_main += r.l_main;
  acc.l_cont += r.l_cont;
  acc.l_total += r.l_total;
  acc.n_pos += r.n_pos;
  acc.n_neg += r.n_neg;
  acc.n_pairs += r.n_pairs;
}

inline void average(LossReport& acc, std::size_t batches) {
  if (batches == 0) return;
  const double n = static_cast<double>(batches);
  acc.l_pos /= n;
  acc.l_neg /= n;
  acc.l_margin /= n;
  acc.l_main /= n;
  acc.l_cont /= n;
  acc.l_total /= n;
}

}  // namespace detail

/// Callback invoked after every epoch (e.g. to stream the JSON-lines log).
using EpochCallback = std::function<void(const EpochLog&)>;

inline TrainResult train(const InteractionDataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  Trainer trainer(ds, cfg);
  const BatchConfig bcfg = trainer.batch_config();
  TrainResult result;
  result.best = trainer.model();
  std::size_t since_best = 0;

  std::vector<TrainBatch> user_batches;
  std::size_t user_cursor = 0, user_round = 0;
  auto next_user_batch = [&]() -> const TrainBatch* {
    if (user_cursor >= user_batches.size()) {
      user_batches = make_batches(ds, Task::user, bcfg, derive_seed(cfg.seed, "user-round", ++user_round));
      user_cursor = 0;
      if (user_batches.empty()) return nullptr;
    }
    return &user_batches[user_cursor++];
  };

  EvalConfig vcfg;
  vcfg.n_eval_neg = cfg.n_eval_neg;
  vcfg.seed = derive_seed(cfg.seed, "validation");
  vcfg.target = Target::validation;
  vcfg.users = cfg.validate_users;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto group_batches = make_batches(ds, Task::group, bcfg, derive_seed(cfg.seed, "group-epoch", epoch));
    std::size_t n_user = 0;
    if (cfg.task_mix > 0.0) {
      n_user = group_batches.empty()
                   ? std::max<std::size_t>(1, (ds.num_users * 8) / cfg.batch_size)
                   : static_cast<std::size_t>(std::llround(static_cast<double>(group_batches.size()) * cfg.task_mix /
                                                           (1.0 - cfg.task_mix)));
    }
    EpochLog log;
    log.epoch = epoch;
    // Interleave so the user share of steps taken so far tracks task_mix.
    std::size_t gi = 0, ui = 0;
    const std::size_t total = group_batches.size() + n_user;
    for (std::size_t s = 0; s < total; ++s) {
      const bool take_user =
          ui < n_user && (gi >= group_batches.size() || static_cast<double>(ui) * static_cast<double>(total) <=
                                                            static_cast<double>(s) * static_cast<double>(n_user));
      bool degenerate = false;
      if (take_user) {
        ++ui;
        const TrainBatch* b = next_user_batch();
        if (!b) continue;
        const LossReport r = trainer.step(*b, true, &degenerate);
        detail::accumulate(log.user_loss, r);
        ++log.user_batches;
        result.log.batch_losses.push_back(r.l_total);
      } else {
        const LossReport r = trainer.step(group_batches[gi++], true, &degenerate);
        detail::accumulate(log.group_loss, r);
        ++log.group_batches;
        result.log.batch_losses.push_back(r.l_total);
      }
      if (degenerate) ++log.degenerate_contrastive_batches;
    }
    detail::average(log.user_loss, log.user_batches);
    detail::average(log.group_loss, log.group_batches);

    const EvalReport val = evaluate(ModelScorer{&trainer.model()}, ds, vcfg);
    log.val_user_hr10 = val.user.hr_at(10);
    log.val_user_ndcg10 = val.user.ndcg_at(10);
    log.val_group_hr10 = val.group.hr_at(10);
    log.val_group_ndcg10 = val.group.ndcg_at(10);
    if (log.val_group_hr10 > result.log.best_val_group_hr10) {
      result.log.best_val_group_hr10 = log.val_group_hr10;
      result.log.best_epoch = epoch;
      result.best = trainer.model();
      log.best = true;
      since_best = 0;
    } else {
      ++since_best;
    }
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience) break;
  }
  result.last = trainer.model();
  return result;
}

// ---------------------------------------------------------------------------
// hyperparameter grid

struct GridSpec {
  std::vector<std::size_t> thresholds{3, 5, 7, 9};
  std::vector<double> mask_ratios{0.2, 0.4, 0.6, 0.8};
  std::vector<double> betas{0.025, 0.05, 0.075, 0.1};
};

inline std::vector<TrainConfig> expand_grid(const TrainConfig& base, const GridSpec& grid) {
  std::vector<TrainConfig> out;
  for (const auto t : grid.thresholds)
    for (const auto r : grid.mask_ratios)
      for (const auto b : grid.betas) {
        TrainConfig c = base;
        c.loss.aug_threshold = t;
        c.loss.mask_ratio = r;
        c.loss.beta = b;
        out.push_back(c);
      }
  return out;
}

struct GridRow {
  TrainConfig config;
  double val_group_hr10 = 0.0;
  std::size_t best_epoch = 0;
};

struct GridResult {
  TrainConfig best;
  std::size_t best_index = 0;
  std::vector<GridRow> table;
};

/// Trains every candidate and keeps the one with the highest validation group
/// HR@10 (first wins on ties).
inline GridResult hyper_grid(const InteractionDataset& ds, const std::vector<TrainConfig>& candidates) {
  if (candidates.empty()) throw ConfigError("hyper_grid: empty grid");
  GridResult out;
  double best = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TrainResult r = train(ds, candidates[i]);
    out.table.push_back({candidates[i], r.log.best_val_group_hr10, r.log.best_epoch});
    if (r.log.best_val_group_hr10 > best) {
      best = r.log.best_val_group_hr10;
      out.best = candidates[i];
      out.best_index = i;
    }
  }
  return out;
}

inline GridResult hyper_grid(const InteractionDataset& ds, const TrainConfig& base, const GridSpec& grid) {
  return hyper_grid(ds, expand_grid(base, grid));
}

}  // namespace c3

// c3: command-line driver for the group recommender.
//
//   c3 synth --users 200 --items 300 --groups 80 --seed 7 -o data/
//   c3 train -c run.json [--no-margin] [--no-contrastive] ...
//   c3 eval | robustness | export-embeddings | grid -c run.json
//
// Every option has a key in the flat JSON config (dashes become underscores);
// flags given on the command line override the file.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "c3/c3.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Options outside TrainConfig, with their defaults.
json run_defaults() {
  return {{"data", ""},
          {"out", "run"},
          {"checkpoint", ""},
          {"target", "test"},
          {"scorer", "model"},
          {"drift_mask_ratio", 0.8},
          {"drift_trials", 1},
          {"drift_ranks", true},
          {"masked_variants", 1},
          {"grid_thresholds", json::array({3, 5, 7, 9})},
          {"grid_mask_ratios", json::array({0.2, 0.4, 0.6, 0.8})},
          {"grid_betas", json::array({0.025, 0.05, 0.075, 0.1})},
          {"users", 200},
          {"items", 300},
          {"groups", 80},
          {"clusters", 2},
          {"group_size_min", 2},
          {"group_size_max", 5}};
}

json all_defaults() {
  json j = c3::to_json(c3::TrainConfig{});
  j["ff_dim"] = 0;  // 0 means 4·dim
  const json run = run_defaults();
  for (const auto& [k, v] : run.items()) j[k] = v;
  return j;
}

std::string flag_name(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return "--" + key;
}

/// Command-line values collected as text and converted to the default's JSON type.
struct Overrides {
  std::map<std::string, std::string> text;
  std::map<std::string, bool> flags;
};

json convert(const std::string& key, const std::string& text, const json& like) {
  try {
    if (like.is_string()) return text;
    if (like.is_array()) {
      json arr = json::array();
      std::stringstream ss(text);
      std::string tok;
      while (std::getline(ss, tok, ',')) arr.push_back(json::parse(tok));
      return arr;
    }
    json v = json::parse(text);
    if (like.is_number_unsigned() && !(v.is_number_unsigned()))
      throw c3::ConfigError("option " + flag_name(key) + " expects a non-negative integer, got '" + text + "'");
    if (like.is_number_float() && !v.is_number()) throw c3::ConfigError("option " + flag_name(key) + " expects a number");
    if (like.is_boolean() && !v.is_boolean()) throw c3::ConfigError("option " + flag_name(key) + " expects true/false");
    return v;
  } catch (const json::parse_error&) {
    throw c3::ConfigError("option " + flag_name(key) + " cannot parse '" + text + "'");
  }
}

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  Overrides over;
  std::vector<std::string> keys;
};

void add_options(Command& cmd, const std::vector<std::string>& keys) {
  const json defaults = all_defaults();
  cmd.keys = keys;
  for (const auto& key : keys) {
    const json& d = defaults.at(key);
    std::string names = flag_name(key);
    if (key == "out") names = "-o," + names;
    if (d.is_boolean()) {
      cmd.app->add_flag_function(
          names, [&cmd, key](std::int64_t n) { cmd.over.flags[key] = n > 0; }, "(default " + d.dump() + ")");
    } else {
      cmd.app->add_option(names, cmd.over.text[key], "(default " + d.dump() + ")");
    }
  }
}

/// Defaults, then the config file, then command-line overrides.
json resolve(const Command& cmd) {
  json cfg = all_defaults();
  if (!cmd.config_path.empty()) {
    std::ifstream in(cmd.config_path);
    if (!in) throw c3::DataError("cannot read config " + cmd.config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw c3::ConfigError("config " + cmd.config_path + ": " + e.what());
    }
    if (!file.is_object()) throw c3::ConfigError("config must be one flat JSON object");
    for (const auto& [k, v] : file.items()) {
      if (!cfg.contains(k)) throw c3::ConfigError("unknown config key '" + k + "'");
      cfg[k] = v;
    }
  }
  for (const auto& [k, text] : cmd.over.text)
    if (!text.empty()) cfg[k] = convert(k, text, cfg[k]);
  for (const auto& [k, v] : cmd.over.flags) cfg[k] = v;
  return cfg;
}

c3::TrainConfig train_config(const json& cfg) {
  c3::TrainConfig tc;
  c3::apply_json(tc, cfg);
  tc.validate();
  return tc;
}

fs::path out_dir(const json& cfg) {
  fs::path out = cfg.at("out").get<std::string>();
  fs::create_directories(out);
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream o(path);
  if (!o) throw c3::DataError("cannot write " + path.string());
  o << j.dump(2) << '\n';
}

/// Loads the dataset and applies the leave-one-out split driven by `seed`.
c3::InteractionDataset load_split(const json& cfg) {
  const auto dir = cfg.at("data").get<std::string>();
  if (dir.empty()) throw c3::ConfigError("no dataset given (--data or \"data\")");
  return c3::leave_one_out_split(c3::load_dataset(dir), cfg.at("seed").get<std::uint64_t>());
}

c3::C3Model load_model(const json& cfg, const c3::InteractionDataset& ds) {
  fs::path ckpt = cfg.at("checkpoint").get<std::string>();
  if (ckpt.empty()) ckpt = fs::path(cfg.at("out").get<std::string>()) / "best.ckpt";
  c3::C3Model m = c3::load_checkpoint(ckpt);
  if (m.num_users != ds.num_users || m.num_items != ds.num_items)
    throw c3::DataError("checkpoint " + ckpt.string() + " was trained on a dataset of a different shape");
  return m;
}

c3::Target parse_target(const json& cfg) {
  const auto t = cfg.at("target").get<std::string>();
  if (t == "test") return c3::Target::test;
  if (t == "validation") return c3::Target::validation;
  throw c3::ConfigError("target must be 'test' or 'validation'");
}

// ---------------------------------------------------------------------------
// subcommands

int run_synth(const json& cfg) {
  c3::SyntheticConfig sc;
  sc.num_users = cfg.at("users").get<std::size_t>();
  sc.num_items = cfg.at("items").get<std::size_t>();
  sc.num_groups = cfg.at("groups").get<std::size_t>();
  sc.clusters = cfg.at("clusters").get<std::size_t>();
  sc.group_size_min = cfg.at("group_size_min").get<std::size_t>();
  sc.group_size_max = cfg.at("group_size_max").get<std::size_t>();
  sc.seed = cfg.at("seed").get<std::uint64_t>();
  const auto syn = c3::generate_synthetic(sc);
  const fs::path out = out_dir(cfg);
  c3::save_dataset(syn.data, out);
  std::cout << c3::to_json(c3::compute_stats(syn.data)).dump(2) << '\n';
  return kOk;
}

int run_train(const json& cfg) {
  const c3::TrainConfig tc = train_config(cfg);
  const auto ds = load_split(cfg);
  const fs::path out = out_dir(cfg);
  write_json(out / "config.echo.json", cfg);
  std::ofstream log(out / "log.jsonl");
  if (!log) throw c3::DataError("cannot write " + (out / "log.jsonl").string());
  const auto result = c3::train(ds, tc, [&](const c3::EpochLog& e) {
    log << c3::to_json(e).dump() << '\n';
    log.flush();
    std::fprintf(stderr, "epoch %3zu  group loss %.4f  user loss %.4f  val group HR@10 %.4f%s\n", e.epoch,
                 e.group_loss.l_total, e.user_loss.l_total, e.val_group_hr10, e.best ? "  *" : "");
  });
  c3::save_checkpoint(result.best, out / "best.ckpt");
  c3::save_checkpoint(result.last, out / "last.ckpt");

  c3::EvalConfig ec;
  ec.n_eval_neg = tc.n_eval_neg;
  ec.seed = tc.seed;
  const auto rep = c3::evaluate(c3::ModelScorer{&result.best}, ds, ec);
  write_json(out / "eval.json", c3::to_json(rep));
  std::cout << "best epoch " << result.log.best_epoch << " of " << result.log.epochs.size() << '\n';
  c3::print_table(std::cout, rep);
  return kOk;
}

int run_eval(const json& cfg) {
  const c3::TrainConfig tc = train_config(cfg);
  const auto ds = load_split(cfg);
  const fs::path out = out_dir(cfg);
  c3::EvalConfig ec;
  ec.n_eval_neg = tc.n_eval_neg;
  ec.seed = tc.seed;
  ec.target = parse_target(cfg);
  const auto kind = cfg.at("scorer").get<std::string>();
  c3::EvalReport rep;
  if (kind == "model") {
    const c3::C3Model m = load_model(cfg, ds);
    rep = c3::evaluate(c3::ModelScorer{&m}, ds, ec);
  } else if (kind == "popularity") {
    rep = c3::evaluate(c3::popularity_baseline(ds), ds, ec);
  } else if (kind == "random") {
    rep = c3::evaluate(c3::RandomScorer{tc.seed}, ds, ec);
  } else {
    throw c3::ConfigError("scorer must be model, popularity or random");
  }
  write_json(out / "eval.json", c3::to_json(rep));
  c3::print_table(std::cout, rep);
  return kOk;
}

int run_robustness(const json& cfg) {
  const c3::TrainConfig tc = train_config(cfg);
  const auto ds = load_split(cfg);
  const fs::path out = out_dir(cfg);
  const c3::C3Model m = load_model(cfg, ds);
  c3::DriftConfig dc;
  dc.mask_ratio = cfg.at("drift_mask_ratio").get<double>();
  dc.trials = cfg.at("drift_trials").get<std::size_t>();
  dc.ranks = cfg.at("drift_ranks").get<bool>();
  dc.n_eval_neg = tc.n_eval_neg;
  dc.seed = tc.seed;
  if (!(dc.mask_ratio >= 0.0 && dc.mask_ratio < 1.0)) throw c3::ConfigError("drift_mask_ratio must lie in [0,1)");
  if (dc.trials == 0) throw c3::ConfigError("drift_trials must be positive");
  const auto rep = c3::consensus_drift(m, ds, dc);
  write_json(out / "drift.json", c3::to_json(rep));
  std::printf("groups %zu  mean cosine %.4f  median %.4f  min %.4f  max %.4f  mean rank change %+.3f\n",
              rep.entries.size() / dc.trials, rep.mean_cosine, rep.median_cosine, rep.min_cosine, rep.max_cosine,
              rep.mean_rank_change);
  return kOk;
}

int run_export(const json& cfg) {
  const c3::TrainConfig tc = train_config(cfg);
  const auto ds = load_split(cfg);
  const fs::path out = out_dir(cfg);
  const c3::C3Model m = load_model(cfg, ds);
  c3::ExportConfig ec;
  ec.mask_ratio = cfg.at("drift_mask_ratio").get<double>();
  ec.masked_variants = cfg.at("masked_variants").get<std::size_t>();
  ec.seed = tc.seed;
  const auto rows = c3::export_embeddings(m, ds, out / "embeddings.csv", ec);
  std::printf("wrote %zu rows to %s\n", rows, (out / "embeddings.csv").string().c_str());
  return kOk;
}

int run_grid(const json& cfg) {
  const c3::TrainConfig tc = train_config(cfg);
  const auto ds = load_split(cfg);
  const fs::path out = out_dir(cfg);
  c3::GridSpec spec;
  spec.thresholds = cfg.at("grid_thresholds").get<std::vector<std::size_t>>();
  spec.mask_ratios = cfg.at("grid_mask_ratios").get<std::vector<double>>();
  spec.betas = cfg.at("grid_betas").get<std::vector<double>>();
  const auto configs = c3::expand_grid(tc, spec);
  if (configs.empty()) throw c3::ConfigError("grid is empty");
  for (const auto& c : configs) c.validate();
  const auto res = c3::hyper_grid(ds, configs);
  json rows = json::array();
  std::printf("%9s %10s %7s %12s %10s\n", "threshold", "mask_ratio", "beta", "val HR@10", "best epoch");
  for (std::size_t i = 0; i < res.table.size(); ++i) {
    const auto& r = res.table[i];
    std::printf("%9zu %10.3f %7.3f %12.4f %10zu%s\n", r.config.loss.aug_threshold, r.config.loss.mask_ratio,
                r.config.loss.beta, r.val_group_hr10, r.best_epoch, i == res.best_index ? "  *" : "");
    rows.push_back({{"aug_threshold", r.config.loss.aug_threshold},
                    {"mask_ratio", r.config.loss.mask_ratio},
                    {"beta", r.config.loss.beta},
                    {"val_group_hr10", r.val_group_hr10},
                    {"best_epoch", r.best_epoch}});
  }
  write_json(out / "grid.json", {{"rows", rows}, {"best_index", res.best_index}, {"best", c3::to_json(res.best)}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Traces are large and short-lived; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  CLI::App app{"c3: transformer group recommender with margin and contrastive objectives"};
  app.require_subcommand(1);

  std::vector<std::string> train_keys = c3::train_config_keys();
  const std::vector<std::string> run_keys{"data", "out"};
  auto join = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };

  std::map<std::string, Command> cmds;
  auto add = [&](const std::string& name, const std::string& help, const std::vector<std::string>& keys) {
    Command& c = cmds[name];
    c.app = app.add_subcommand(name, help);
    c.app->add_option("-c,--config", c.config_path, "flat JSON config; command-line flags override it");
    add_options(c, keys);
  };
  add("synth", "generate a planted-cluster synthetic dataset",
      {"users", "items", "groups", "clusters", "group_size_min", "group_size_max", "seed", "out"});
  add("train", "split, train, checkpoint and evaluate", join(train_keys, run_keys));
  add("eval", "evaluate a checkpoint (or a baseline) on the held-out items",
      join(train_keys, {"data", "out", "checkpoint", "target", "scorer"}));
  add("robustness", "representation drift under random member masking",
      join(train_keys, {"data", "out", "checkpoint", "drift_mask_ratio", "drift_trials", "drift_ranks"}));
  add("export-embeddings", "write original and masked group representations as CSV",
      join(train_keys, {"data", "out", "checkpoint", "drift_mask_ratio", "masked_variants"}));
  add("grid", "train over threshold x mask ratio x beta and select by validation HR@10",
      join(train_keys, {"data", "out", "grid_thresholds", "grid_mask_ratios", "grid_betas"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    for (auto& [name, cmd] : cmds) {
      if (!cmd.app->parsed()) continue;
      const json cfg = resolve(cmd);
      if (name == "synth") return run_synth(cfg);
      if (name == "train") return run_train(cfg);
      if (name == "eval") return run_eval(cfg);
      if (name == "robustness") return run_robustness(cfg);
      if (name == "export-embeddings") return run_export(cfg);
      if (name == "grid") return run_grid(cfg);
    }
  } catch (const c3::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const c3::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

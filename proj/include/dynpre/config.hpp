#pragma once

// Run configuration as JSON. Every field has a default; a config file only
// needs the keys it overrides. Unknown keys are rejected so typos surface.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dynpre/downstream.hpp"
#include "dynpre/eval.hpp"
#include "dynpre/pretrain.hpp"
#include "dynpre/simgen.hpp"

namespace dynpre {

struct RunConfig {
  std::uint64_t master_seed = 0;
  sim::SimDatasetSpec sim;
  PretrainConfig pretrain;
  DownstreamConfig downstream;
  GridSpec grid;

  /// Downstream defaults for ingested (real-shape) data: plateau scheduling and up to
  /// 3000 epochs; batch size is capped by the training-set size at run time.
  static DownstreamConfig real_downstream() {
    DownstreamConfig d;
    d.batch_size = 32;
    d.max_epochs = 3000;
    d.plateau = true;
    return d;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

template <class V>
void get_if(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json regimes = nlohmann::json::array();
  for (Regime r : c.grid.regimes) regimes.push_back(regime_name(r));
  const auto& s = c.sim;
  const auto& p = c.pretrain;
  const auto& d = c.downstream;
  return {
      {"master_seed", c.master_seed},
      {"sim",
       {{"n_nodes", s.n_nodes},
        {"n_pretrain_series", s.n_pretrain_series},
        {"pretrain_length", s.pretrain_length},
        {"pretrain_split", s.pretrain_split},
        {"n_graphs", s.n_graphs},
        {"series_per_graph", s.series_per_graph},
        {"downstream_length", s.downstream_length},
        {"downstream_split", s.downstream_split},
        {"noise_std", s.noise_std},
        {"spectral_target", s.spectral_target},
        {"density", s.density},
        {"burn_in", s.burn_in},
        {"window_length", s.window_length}}},
      {"pretrain",
       {{"batch_size", p.batch_size},
        {"lr", p.lr},
        {"epochs", p.epochs},
        {"steps_per_epoch", p.steps_per_epoch},
        {"val_batches", p.val_batches}}},
      {"downstream",
       {{"batch_size", d.batch_size},
        {"lr", d.lr},
        {"max_epochs", d.max_epochs},
        {"patience", d.patience},
        {"clip_norm", d.clip_norm},
        {"scheduler", d.plateau ? "plateau" : "none"},
        {"plateau_factor", d.plateau_config.factor},
        {"plateau_patience", d.plateau_config.patience},
        {"min_lr", d.plateau_config.min_lr},
        {"gain", d.gain},
        {"window_length", d.rule.window_length},
        {"overlap", d.rule.overlap},
        {"eval_chunk", d.eval_chunk}}},
      {"grid",
       {{"regimes", regimes},
        {"n_train", c.grid.n_train},
        {"trials", c.grid.trials},
        {"gain_sweep", c.grid.gain_sweep}}},
  };
}

/// Applies the keys present in `j` on top of `base`.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  using detail::get_if;
  detail::check_keys(j, {"master_seed", "sim", "pretrain", "downstream", "grid"}, "config");
  get_if(j, "master_seed", base.master_seed);
  if (j.contains("sim")) {
    const auto& s = j.at("sim");
    detail::check_keys(s,
                       {"n_nodes", "n_pretrain_series", "pretrain_length", "pretrain_split", "n_graphs",
                        "series_per_graph", "downstream_length", "downstream_split", "noise_std", "spectral_target",
                        "density", "burn_in", "window_length"},
                       "config.sim");
    auto& o = base.sim;
    get_if(s, "n_nodes", o.n_nodes);
    get_if(s, "n_pretrain_series", o.n_pretrain_series);
    get_if(s, "pretrain_length", o.pretrain_length);
    get_if(s, "pretrain_split", o.pretrain_split);
    get_if(s, "n_graphs", o.n_graphs);
    get_if(s, "series_per_graph", o.series_per_graph);
    get_if(s, "downstream_length", o.downstream_length);
    get_if(s, "downstream_split", o.downstream_split);
    get_if(s, "noise_std", o.noise_std);
    get_if(s, "spectral_target", o.spectral_target);
    get_if(s, "density", o.density);
    get_if(s, "burn_in", o.burn_in);
    get_if(s, "window_length", o.window_length);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    detail::check_keys(p, {"batch_size", "lr", "epochs", "steps_per_epoch", "val_batches"}, "config.pretrain");
    auto& o = base.pretrain;
    get_if(p, "batch_size", o.batch_size);
    get_if(p, "lr", o.lr);
    get_if(p, "epochs", o.epochs);
    get_if(p, "steps_per_epoch", o.steps_per_epoch);
    get_if(p, "val_batches", o.val_batches);
  }
  if (j.contains("downstream")) {
    const auto& d = j.at("downstream");
    detail::check_keys(d,
                       {"batch_size", "lr", "max_epochs", "patience", "clip_norm", "scheduler", "plateau_factor",
                        "plateau_patience", "min_lr", "gain", "window_length", "overlap", "eval_chunk"},
                       "config.downstream");
    auto& o = base.downstream;
    get_if(d, "batch_size", o.batch_size);
    get_if(d, "lr", o.lr);
    get_if(d, "max_epochs", o.max_epochs);
    get_if(d, "patience", o.patience);
    get_if(d, "clip_norm", o.clip_norm);
    if (d.contains("scheduler")) {
      const auto s = d.at("scheduler").get<std::string>();
      if (s != "none" && s != "plateau") throw std::invalid_argument("config.downstream.scheduler: none or plateau");
      o.plateau = s == "plateau";
    }
    get_if(d, "plateau_factor", o.plateau_config.factor);
    get_if(d, "plateau_patience", o.plateau_config.patience);
    get_if(d, "min_lr", o.plateau_config.min_lr);
    get_if(d, "gain", o.gain);
    get_if(d, "window_length", o.rule.window_length);
    get_if(d, "overlap", o.rule.overlap);
    get_if(d, "eval_chunk", o.eval_chunk);
    if (!(o.rule.overlap >= 0.0 && o.rule.overlap < 1.0)) throw std::invalid_argument("config: overlap in [0, 1)");
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    detail::check_keys(g, {"regimes", "n_train", "trials", "gain_sweep"}, "config.grid");
    if (g.contains("regimes")) {
      base.grid.regimes.clear();
      for (const auto& r : g.at("regimes")) base.grid.regimes.push_back(parse_regime(r.get<std::string>()));
    }
    get_if(g, "n_train", base.grid.n_train);
    get_if(g, "trials", base.grid.trials);
    get_if(g, "gain_sweep", base.grid.gain_sweep);
  }
  base.sim.master_seed = base.master_seed;
  base.sim.validate();
  base.grid.validate();
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// DYNPRE_SEED, when set, replaces the master seed.
inline std::uint64_t seed_override(std::uint64_t seed) {
  if (const char* env = std::getenv("DYNPRE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("DYNPRE_SEED is not an unsigned integer: ") + env);
    }
  }
  return seed;
}

}  // namespace dynpre

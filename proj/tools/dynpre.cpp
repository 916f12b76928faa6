// dynpre: simulate data, pretrain encoders, train downstream classifiers, report.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <malloc.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dynpre/config.hpp"
#include "dynpre/gradcheck.hpp"
#include "dynpre/io.hpp"

namespace fs = std::filesystem;
using namespace dynpre;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Training allocates and frees many large temporaries per step; keep them in the heap.
void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
}

void print_config(const std::string& command, const nlohmann::json& resolved) {
  std::cerr << "[" << command << "] resolved config " << resolved.dump() << "\n";
}

RunConfig resolve(const std::string& config_path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (seed) cfg.master_seed = *seed;
  cfg.master_seed = seed_override(cfg.master_seed);
  cfg.sim.master_seed = cfg.master_seed;
  return cfg;
}

fs::path dataset_file(const fs::path& data, const char* default_name) {
  return fs::is_directory(data) ? data / default_name : data;
}

EncoderConfig encoder_for(const std::string& variant, std::size_t channels) {
  return parse_variant(variant) == EncoderVariant::sim ? EncoderConfig::sim(channels) : EncoderConfig::real(channels);
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config, kind, out;
  std::optional<std::uint64_t> seed;
};

int run_simulate(const SimulateArgs& a) {
  const RunConfig cfg = resolve(a.config, a.seed);
  auto resolved = to_json(cfg);
  resolved["kind"] = a.kind;
  resolved["out"] = a.out;
  print_config("simulate", resolved);
  fs::create_directories(a.out);
  if (a.kind == "pretrain") {
    const auto set = sim::build_pretrain_set(cfg.sim);
    io::save_dataset(fs::path(a.out) / "pretrain_train.tsd", set.train);
    io::save_dataset(fs::path(a.out) / "pretrain_val.tsd", set.val);
    io::save_dataset(fs::path(a.out) / "pretrain_test.tsd", set.test);
    std::cout << "wrote " << set.train.size() << " series: train " << set.train.timepoints << ", val "
              << set.val.timepoints << ", test " << set.test.timepoints << " time points\n";
  } else {
    const auto data = sim::build_downstream_set(cfg.sim);
    io::save_dataset(fs::path(a.out) / "downstream.tsd", data);
    std::cout << "wrote " << data.size() << " subjects (" << data.indices(Split::train).size() << "/"
              << data.indices(Split::val).size() << "/" << data.indices(Split::test).size() << ")\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::string method, data, out, config, log, variant = "sim";
  std::optional<std::size_t> epochs, steps, batch;
  std::optional<std::uint64_t> seed;
};

int run_pretrain(const PretrainArgs& a) {
  RunConfig cfg = resolve(a.config, a.seed);
  if (a.epochs) cfg.pretrain.epochs = *a.epochs;
  if (a.steps) cfg.pretrain.steps_per_epoch = *a.steps;
  if (a.batch) cfg.pretrain.batch_size = *a.batch;
  const auto method = parse_method(a.method);
  const auto train = io::load_dataset(fs::path(a.data) / "pretrain_train.tsd");
  const auto val = io::load_dataset(fs::path(a.data) / "pretrain_val.tsd");
  const auto enc_cfg = encoder_for(a.variant, train.channels);
  if (method == PretrainMethod::ae && enc_cfg.variant != EncoderVariant::sim) {
    throw UsageError("the autoencoder baseline needs --variant sim");
  }
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  nlohmann::json resolved = to_json(cfg);
  resolved["method"] = a.method;
  resolved["encoder"] = enc_cfg.to_json();
  resolved["data"] = a.data;
  resolved["out"] = a.out;
  resolved["log"] = log_path;
  print_config("pretrain", resolved);

  std::cout << "epoch,loss,val_loss,metric\n";
  const auto result = pretrain(method, enc_cfg, train, val, cfg.pretrain, cfg.master_seed, [](const EpochLog& e) {
    std::cout << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.metric << std::endl;
  });
  io::save_encoder(a.out, enc_cfg, result.encoder, method_name(method));
  io::write_text(log_path, io::pretrain_log_csv(result.log));

  const fs::path test_path = fs::path(a.data) / "pretrain_test.tsd";
  if (fs::exists(test_path)) {
    const auto test = io::load_dataset(test_path);
    Rng rng(derive_seed(cfg.master_seed, {label_tag("pretrain-test")}));
    std::vector<PairBatch<float>> batches;
    for (std::size_t i = 0; i < cfg.pretrain.val_batches; ++i)
      batches.push_back(sample_pair_batch(test, cfg.pretrain.batch_size, enc_cfg.window_length, rng));
    const auto [loss, metric] =
        evaluate_pretraining(method, enc_cfg, result.encoder, result.critic, result.decoder, batches);
    std::cout << "held-out " << (method == PretrainMethod::stdim ? "contrastive accuracy " : "reconstruction mse ")
              << metric << " (loss " << loss << ", best epoch " << result.best_epoch << ")\n";
  }
  if (result.diverged) {
    std::cerr << result.message << "; kept the checkpoint of epoch " << result.best_epoch << "\n";
    return 2;
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string mode, ckpt, data, out, config, variant = "sim";
  std::vector<std::size_t> n_train;
  std::optional<double> gain;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trials, max_epochs, patience;
  bool sweep = false, probe = false;
};

int run_train(const TrainArgs& a) {
  const Regime regime = parse_regime(a.mode);
  if (regime != Regime::npt && a.ckpt.empty()) {
    throw UsageError(std::string("--mode ") + a.mode + " needs --ckpt <encoder checkpoint>");
  }
  RunConfig cfg = resolve(a.config, a.seed);
  if (a.gain) cfg.downstream.gain = *a.gain;
  if (a.max_epochs) cfg.downstream.max_epochs = *a.max_epochs;
  if (a.patience) cfg.downstream.patience = *a.patience;
  const std::size_t trials = a.trials.value_or(1);
  if (trials < 1) throw UsageError("--trials must be >= 1");
  std::vector<std::size_t> n_train = a.n_train;
  if (n_train.empty()) throw UsageError("--n-train is required");

  const auto data = io::load_dataset(dataset_file(a.data, "downstream.tsd"));
  std::optional<io::LoadedEncoder> pretrained;
  EncoderConfig enc_cfg;
  if (regime != Regime::npt) {
    pretrained = io::load_encoder(a.ckpt);
    enc_cfg = pretrained->config;
  } else {
    enc_cfg = encoder_for(a.variant, data.channels);
  }
  const std::string pretrain_label = pretrained ? pretrained->method : "none";

  nlohmann::json resolved = to_json(cfg);
  resolved["mode"] = regime_name(regime);
  resolved["ckpt"] = a.ckpt;
  resolved["pretrain"] = pretrain_label;
  resolved["encoder"] = enc_cfg.to_json();
  resolved["n_train"] = n_train;
  resolved["trials"] = trials;
  resolved["gain_sweep"] = a.sweep;
  resolved["data"] = a.data;
  resolved["out"] = a.out;
  print_config("train", resolved);

  GridInputs inputs{&data, enc_cfg, pretrained ? &pretrained->params : nullptr, pretrain_label, cfg.downstream};
  const auto runner = make_trial_runner(inputs);

  if (a.probe) {
    ParamStore<float> enc;
    if (pretrained) {
      enc = pretrained->params;
    } else {
      Rng init_rng(derive_seed(cfg.master_seed, {label_tag("probe-encoder")}));
      enc = build_encoder<float>(enc_cfg, init_rng);
    }
    for (std::size_t n : n_train) {
      Rng sample(derive_seed(cfg.master_seed, {label_tag("probe-sample"), n}));
      const auto ids = sample_training_subjects(data, n, sample);
      const auto r = linear_probe(enc_cfg, enc, data, ids, data.indices(Split::test), cfg.downstream.rule,
                                  cfg.master_seed);
      std::cout << nlohmann::json{{"probe", true},          {"n_train", n},
                                  {"train_windows", r.train_windows}, {"test_windows", r.test_windows},
                                  {"train_accuracy", r.train_accuracy}, {"test_accuracy", r.test_accuracy},
                                  {"test_auc", r.test_auc}}
                       .dump()
                << "\n";
    }
    return 0;
  }

  double gain = cfg.downstream.gain;
  if (a.sweep) {
    const std::uint64_t sweep_seed = derive_seed(cfg.master_seed, {label_tag("gain-sweep")});
    const auto sweep = gain_sweep([&](double g, std::size_t e) {
      return runner(make_job(sweep_seed, pretrain_label, regime, n_train.front(), e, g)).val_auc;
    });
    gain = sweep.best_gain;
    for (std::size_t i = 0; i < sweep.gains.size(); ++i)
      std::cerr << "gain " << sweep.gains[i] << " median val auc " << sweep.median_val_auc[i] << "\n";
    std::cerr << "selected gain " << gain << " after " << sweep.runs << " runs\n";
  }

  GridSpec grid;
  grid.regimes = {regime};
  grid.n_train = n_train;
  grid.trials = trials;
  grid.pretrain = pretrain_label;
  run_grid(grid, runner, cfg.master_seed, {{regime, gain}}, [&](const TrialResult& r) {
    io::append_results(a.out, {r});
    std::cout << io::to_json(r).dump() << std::endl;
  });
  return 0;
}

// ---------------------------------------------------------------------------

int run_report(const std::string& in, const std::string& out) {
  print_config("report", {{"in", in}, {"out", out}});
  const auto rows = io::read_results(in);
  if (rows.empty()) throw std::runtime_error(in + " holds no results");
  const auto csv = io::summary_csv(summarize(rows));
  io::write_text(out, csv);
  std::cout << csv;
  return 0;
}

int run_gradcheck(std::uint64_t seed, std::size_t shapes, double tol) {
  seed = seed_override(seed);
  print_config("gradcheck", {{"seed", seed}, {"shapes", shapes}, {"tol", tol}, {"h", 1e-4}});
  bool ok = true;
  std::string current;
  double worst = 0.0;
  bool case_ok = true;
  auto flush = [&]() {
    if (!current.empty()) std::cout << (case_ok ? "PASS " : "FAIL ") << current << " max_rel_error=" << worst << "\n";
  };
  for (const auto& c : run_gradcheck_suite(seed, shapes, 1e-4, tol)) {
    if (c.name != current) {
      flush();
      current = c.name;
      worst = 0.0;
      case_ok = true;
    }
    worst = std::max(worst, c.report.max_rel_error);
    case_ok = case_ok && c.report.passed;
    ok = ok && c.report.passed;
  }
  flush();
  return ok ? 0 : 2;
}

int run_import(const std::string& dir, const std::string& labels, const std::string& out) {
  print_config("import", {{"dir", dir}, {"labels", labels}, {"out", out}});
  const auto data = io::import_csv(dir, labels);
  io::save_dataset(out, data);
  std::cout << "imported " << data.size() << " subjects of " << data.channels << "x" << data.timepoints << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Self-supervised dynamics pretraining for time-series classification"};
  app.require_subcommand(1);

  SimulateArgs sim_args;
  auto* simulate = app.add_subcommand("simulate", "Generate VAR/SVAR datasets");
  simulate->add_option("--config", sim_args.config, "JSON run config (defaults when omitted)")->check(CLI::ExistingFile);
  simulate->add_option("--kind", sim_args.kind, "pretrain or downstream")
      ->required()
      ->check(CLI::IsMember({"pretrain", "downstream"}));
  simulate->add_option("--out", sim_args.out, "Output directory")->required();
  simulate->add_option("--seed", sim_args.seed, "Master seed (DYNPRE_SEED overrides)");

  PretrainArgs pre_args;
  auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder with ST-DIM or an autoencoder");
  pre->add_option("--method", pre_args.method, "stdim or ae")->required()->check(CLI::IsMember({"stdim", "ae"}));
  pre->add_option("--data", pre_args.data, "Directory with pretrain_{train,val,test}.tsd")
      ->required()
      ->check(CLI::ExistingDirectory);
  pre->add_option("--out", pre_args.out, "Output checkpoint path")->required();
  pre->add_option("--epochs", pre_args.epochs, "Number of epochs");
  pre->add_option("--steps", pre_args.steps, "Optimizer steps per epoch");
  pre->add_option("--batch", pre_args.batch, "Pairs per batch");
  pre->add_option("--seed", pre_args.seed, "Master seed (DYNPRE_SEED overrides)");
  pre->add_option("--config", pre_args.config, "JSON run config")->check(CLI::ExistingFile);
  pre->add_option("--log", pre_args.log, "Metric log CSV (default <out>.log.csv)");
  pre->add_option("--variant", pre_args.variant, "Encoder variant: sim or real")
      ->check(CLI::IsMember({"sim", "real"}));

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train downstream classifiers and append trial results");
  train->add_option("--mode", train_args.mode, "fpt, ufpt or npt")->required()->check(CLI::IsMember({"fpt", "ufpt", "npt"}));
  train->add_option("--ckpt", train_args.ckpt, "Pretrained encoder checkpoint (fpt/ufpt)")->check(CLI::ExistingFile);
  train->add_option("--data", train_args.data, "downstream.tsd or a directory holding it")
      ->required()
      ->check(CLI::ExistingPath);
  train->add_option("--n-train", train_args.n_train, "Training subjects per class (one or more)")->required();
  train->add_option("--gain", train_args.gain, "Xavier gain for the head");
  train->add_option("--seed", train_args.seed, "Master seed (DYNPRE_SEED overrides)");
  train->add_option("--out", train_args.out, "Results JSONL (appended)")->required();
  train->add_option("--trials", train_args.trials, "Trials per n-train value (default 1)");
  train->add_option("--max-epochs", train_args.max_epochs, "Epoch cap");
  train->add_option("--patience", train_args.patience, "Stop after this many epochs without a better validation AUC");
  train->add_option("--config", train_args.config, "JSON run config")->check(CLI::ExistingFile);
  train->add_option("--variant", train_args.variant, "Encoder variant for npt: sim or real")
      ->check(CLI::IsMember({"sim", "real"}));
  train->add_flag("--gain-sweep", train_args.sweep, "Pick the gain by a 20 x 10 validation sweep first");
  train->add_flag("--probe", train_args.probe, "Window-level linear probe on frozen latents instead of training");

  std::string report_in, report_out;
  auto* report = app.add_subcommand("report", "Summarize a results table per regime and n_train");
  report->add_option("--in", report_in, "Results JSONL")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "Summary CSV")->required();

  std::uint64_t gc_seed = 0;
  std::size_t gc_shapes = 5;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", gc_seed, "Seed for shapes and values");
  gradcheck->add_option("--shapes", gc_shapes, "Random shapes per op")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", gc_tol, "Relative error tolerance");

  std::string imp_dir, imp_labels, imp_out;
  auto* import = app.add_subcommand("import", "Build a dataset container from per-subject CSV files");
  import->add_option("--dir", imp_dir, "Directory of CSV files (rows = channels)")->required()->check(CLI::ExistingDirectory);
  import->add_option("--labels", imp_labels, "Lines of stem,label[,split]")->check(CLI::ExistingFile);
  import->add_option("--out", imp_out, "Output .tsd path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*simulate) return run_simulate(sim_args);
    if (*pre) return run_pretrain(pre_args);
    if (*train) return run_train(train_args);
    if (*report) return run_report(report_in, report_out);
    if (*gradcheck) return run_gradcheck(gc_seed, gc_shapes, gc_tol);
    if (*import) return run_import(imp_dir, imp_labels, imp_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

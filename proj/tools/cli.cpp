#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "detkit/config.hpp"
#include "detkit/engine.hpp"
#include "detkit/evalbench.hpp"
#include "detkit/experiment.hpp"

namespace detkit::cli {

namespace fs = std::filesystem;
using config::ConfigTree;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool is_usage_kind(const std::string& kind) {
  static const std::set<std::string> kinds = {"BadKeyPath",       "ParseError",     "FileMissing",  "EvaluationError",
                                              "EmptyConfig",      "TargetNotFound", "ConstructorError",
                                              "BadTrainConfig",   "BadArgument",    "Unserializable"};
  return kinds.count(kind) > 0;
}

ConfigTree load(const std::string& path, const std::vector<std::string>& overrides, std::optional<int64_t> seed) {
  ConfigTree cfg = config::apply_overrides(config::load_config(path), overrides);
  if (seed) cfg = cfg.with("train.seed", config::Value(*seed));
  return cfg;
}

fs::path output_root() {
  const char* env = std::getenv("DETKIT_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("output");
}

fs::path run_dir(const std::string& name) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  fs::path base = output_root() / name / stamp;
  fs::path dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  fs::create_directories(dir);
  return dir;
}

std::string run_name(const std::string& config_path) { return fs::path(config_path).stem().string(); }

std::string metrics_line(const evalbench::ApMetrics& m) {
  auto cell = [](double v) { return v < 0 ? std::string("n/a") : fmt::format("{:.1f}", v * 100); };
  return fmt::format("AP {} | AP50 {} | AP75 {} | APs {} | APm {} | APl {}", cell(m.ap), cell(m.ap50), cell(m.ap75),
                     cell(m.ap_small), cell(m.ap_medium), cell(m.ap_large));
}

// Trains `cfg` from scratch; returns the trainer's final model.
std::shared_ptr<model::Detector> train_quiet(const ConfigTree& cfg, std::ostream& err) {
  experiment::Experiment e = experiment::build_experiment(cfg);
  engine::Trainer tr(e.model, e.train_loader, e.train, [&](const std::string& m) { err << m << '\n'; });
  tr.run();
  return e.model;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<int64_t> seed;
  std::string output;
  std::string resume;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const ConfigTree cfg = load(a.config, a.overrides, a.seed);
  const fs::path dir = a.output.empty() ? run_dir(run_name(a.config)) : fs::path(a.output);
  fs::create_directories(dir);
  config::dump_config(cfg, dir / "config.cfg");

  experiment::Experiment e = experiment::build_experiment(cfg);
  engine::Trainer tr(e.model, e.train_loader, e.train, [&](const std::string& m) { err << m << '\n'; });
  if (!a.resume.empty()) tr.resume(a.resume);
  engine::TrainLog log(dir / "log.jsonl", !a.resume.empty());
  const auto& tc = tr.config();
  tr.run(std::nullopt, [&](const engine::StepReport& r) {
    const int64_t done = r.iteration + 1;
    if (done % std::max<int64_t>(1, tc.log_period) == 0 || done == tc.max_iter) {
      engine::StepReport rec = r;
      rec.iteration = done;
      log.write(rec, tc.encdec_lr * r.lr_factor);
      out << fmt::format("iter {:>6}/{}  loss {:.4f}  lr {:.3g}\n", done, tc.max_iter, r.loss, tc.encdec_lr * r.lr_factor);
    }
    if (tc.checkpoint_period > 0 && done % tc.checkpoint_period == 0 && done != tc.max_iter)
      tr.save(dir / fmt::format("model_{:07d}.ckpt", done));
  });
  tr.save(dir / "model_final.ckpt");
  if (tr.ema()) engine::save_checkpoint(tr.ema_state(), dir / "model_ema.ckpt");
  out << "wrote " << (dir / "model_final.ckpt").string() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::vector<std::string> overrides;
  std::optional<double> nms_threshold;
  bool no_nms = false;
  std::string output;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
  const ConfigTree cfg = load(a.config, a.overrides, std::nullopt);
  auto model = experiment::build_model(cfg);
  const engine::TrainState st = engine::load_checkpoint(a.checkpoint);
  engine::load_weights(*model, st.params, st.buffers);
  const experiment::Split test = experiment::split_from(cfg, "test");
  model::PostprocessOptions post = experiment::postprocess_from(cfg.find("postprocess"));
  if (a.nms_threshold) {
    post.use_nms = true;
    post.nms_threshold = *a.nms_threshold;
  }
  if (a.no_nms) post.use_nms = false;
  const auto res = experiment::evaluate(*model, *test.dataset, test.augment, post);
  out << metrics_line(res.metrics) << '\n';
  out << (post.use_nms ? fmt::format("nms: {:.2f}", post.nms_threshold) : std::string("nms: off")) << '\n';
  const fs::path dir = a.output.empty() ? run_dir(run_name(a.config) + "-eval") : fs::path(a.output);
  fs::create_directories(dir);
  std::ofstream f(dir / "results.json");
  f << evalbench::results_json(res.predictions, test.dataset->category_ids);
  out << "wrote " << (dir / "results.json").string() << '\n';
  return kOk;
}

std::vector<Tensor> test_images(const experiment::Split& test, size_t limit) {
  std::vector<Tensor> imgs;
  std::mt19937_64 unused(0);
  data::AugmentOptions aug = test.augment;
  aug.train = false;
  for (const auto& s : test.dataset->samples) {
    if (imgs.size() >= limit) break;
    const data::Batch b = data::collate_batch({data::apply_augment(s, aug, unused)}, 1);
    imgs.push_back(b.images.reshaped({3, b.images.dim(2), b.images.dim(3)}));
  }
  return imgs;
}

struct BenchArgs {
  std::vector<std::string> configs;
  std::vector<std::string> checkpoints;
  std::string out_path;
  int warmup = 50;
  int timed = 200;
  size_t flops_images = 16;
};

int cmd_benchmark(const BenchArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.checkpoints.empty() && a.checkpoints.size() != a.configs.size())
    throw UsageError("--checkpoints needs one entry per config");
  std::vector<evalbench::BenchmarkRecord> rows;
  for (size_t i = 0; i < a.configs.size(); ++i) {
    evalbench::BenchmarkRecord r;
    r.model_name = run_name(a.configs[i]);
    try {
      const ConfigTree cfg = load(a.configs[i], {}, std::nullopt);
      auto model = experiment::build_model(cfg);
      const auto train = experiment::train_config_from(cfg.at("train"));
      const experiment::Split split = experiment::split_from(cfg, "train");
      const experiment::Split test = experiment::split_from(cfg, "test");
      r.epochs = static_cast<double>(train.max_iter * split.batch_size) /
                 static_cast<double>(split.dataset->samples.size());
      r.params = evalbench::count_parameters(*model).total;
      const auto imgs = test_images(test, a.flops_images);
      const auto fl = evalbench::estimate_flops(*model, imgs);
      r.gflops_mean = fl.mean / 1e9;
      r.gflops_std = fl.std / 1e9;
      r.fps = evalbench::measure_fps(*model, imgs.front().dim(1), imgs.front().dim(2), a.warmup, a.timed).fps;
      r.peak_memory = engine::peak_memory_bytes();
      if (!a.checkpoints.empty() && !a.checkpoints[i].empty()) {
        const auto st = engine::load_checkpoint(a.checkpoints[i]);
        engine::load_weights(*model, st.params, st.buffers);
        r.ap = experiment::evaluate(*model, *test.dataset, test.augment,
                                    experiment::postprocess_from(cfg.find("postprocess")))
                   .metrics;
      }
    } catch (const std::exception& e) {
      r = evalbench::BenchmarkRecord{};
      r.model_name = run_name(a.configs[i]);
      r.error = e.what();
      err << "benchmark " << a.configs[i] << ": " << e.what() << '\n';
    }
    rows.push_back(std::move(r));
  }
  const std::string md = evalbench::emit_report(rows, evalbench::ReportFormat::kMarkdown);
  out << md;
  if (!a.out_path.empty()) {
    const fs::path p(a.out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << md;
    fs::path csv = p;
    csv.replace_extension(".csv");
    std::ofstream(csv) << evalbench::emit_report(rows, evalbench::ReportFormat::kCsv);
  }
  return kOk;
}

struct AnalyzeArgs {
  std::string config;
  std::string checkpoint;
  std::string tool;
  std::vector<std::string> overrides;
  int warmup = 50;
  int timed = 200;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream&) {
  const ConfigTree cfg = load(a.config, a.overrides, std::nullopt);
  auto model = experiment::build_model(cfg);
  if (!a.checkpoint.empty()) {
    const auto st = engine::load_checkpoint(a.checkpoint);
    engine::load_weights(*model, st.params, st.buffers);
  }
  if (a.tool == "params") {
    const auto train = experiment::train_config_from(cfg.at("train"));
    engine::freeze_backbone_stages(*model, train.freeze_stages);
    const auto c = evalbench::count_parameters(*model);
    out << fmt::format("params: total {} trainable {}\n", c.total, c.trainable);
    return kOk;
  }
  const experiment::Split test = experiment::split_from(cfg, "test");
  const auto imgs = test_images(test, 16);
  if (a.tool == "flops") {
    const auto fl = evalbench::estimate_flops(*model, imgs);
    out << fmt::format("GFLOPs: {}  (over {} inputs, multiply-accumulate = 1 FLOP)\n", fl.gflops_cell(), imgs.size());
    for (const auto& [kind, v] : fl.by_kind)
      if (v > 0) out << fmt::format("  {:<22} {:.6f} G\n", kind, v / 1e9 / static_cast<double>(imgs.size()));
    return kOk;
  }
  const auto fps = evalbench::measure_fps(*model, imgs.front().dim(1), imgs.front().dim(2), a.warmup, a.timed);
  out << fmt::format("FPS: {:.2f}  latency mean {:.3f} ms  median {:.3f} ms  std {:.3f} ms  ({} timed, batch 1)\n",
                     fps.fps, fps.mean_ms, fps.median_ms, fps.std_ms, fps.timed_iters);
  return kOk;
}

struct AblateArgs {
  std::string study;
  std::string config;
  std::vector<std::string> overrides;
  std::optional<int64_t> iters;
  std::optional<int64_t> seed;
  std::string out_path;
};

struct AblationRow {
  std::string setting;
  std::optional<evalbench::ApMetrics> metrics;
  std::string error;
};

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string s = "| Setting | AP | AP50 | AP75 |\n|:---|---:|---:|---:|\n";
  const AblationRow* base = rows.empty() || !rows[0].metrics ? nullptr : &rows[0];
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    s += "| " + r.setting;
    if (!r.metrics) {
      s += " | error: " + r.error + " | | |\n";
      continue;
    }
    const double v[3] = {r.metrics->ap, r.metrics->ap50, r.metrics->ap75};
    for (int k = 0; k < 3; ++k) {
      std::string cell = fmt::format("{:.1f}", v[k] * 100);
      if (i > 0 && base) {
        const double b[3] = {base->metrics->ap, base->metrics->ap50, base->metrics->ap75};
        cell += fmt::format(" ({:+.1f})", (v[k] - b[k]) * 100);
      }
      s += " | " + cell;
    }
    s += " |\n";
  }
  return s;
}

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  ConfigTree base = load(a.config, a.overrides, a.seed);
  if (a.iters) base = base.with("train.max_iter", config::Value(*a.iters)).with("train.lr_milestones", config::Value(config::List{}));
  const experiment::Split test = experiment::split_from(base, "test");
  const model::PostprocessOptions post = experiment::postprocess_from(base.find("postprocess"));
  std::vector<AblationRow> rows;
  auto run_row = [&](const std::string& setting, const ConfigTree& cfg, const model::PostprocessOptions& p) {
    AblationRow row{setting, std::nullopt, ""};
    try {
      auto model = train_quiet(cfg, err);
      row.metrics = experiment::evaluate(*model, *test.dataset, test.augment, p).metrics;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  };

  if (a.study == "nms") {
    AblationRow off{"w/o NMS", std::nullopt, ""}, on{"NMS@0.8", std::nullopt, ""};
    try {
      auto model = train_quiet(base, err);
      model::PostprocessOptions p = post;
      p.use_nms = false;
      off.metrics = experiment::evaluate(*model, *test.dataset, test.augment, p).metrics;
      p.use_nms = true;
      p.nms_threshold = 0.8;
      on.metrics = experiment::evaluate(*model, *test.dataset, test.augment, p).metrics;
    } catch (const std::exception& e) {
      off.error = on.error = e.what();
    }
    rows = {off, on};
  } else if (a.study == "freeze") {
    const char* names[3] = {"no frozen layer", "freeze stem", "freeze stem + res2"};
    for (int n = 0; n < 3; ++n) run_row(names[n], base.with("train.freeze_stages", config::Value(n)), post);
  } else {
    struct Grid {
      double backbone, offsets, encdec, cls;
    };
    const Grid grid[4] = {{2e-5, 2e-5, 2e-4, 1.0}, {2e-5, 2e-5, 2e-4, 2.0}, {1e-5, 1e-4, 1e-4, 1.0}, {1e-5, 1e-4, 1e-4, 2.0}};
    for (const auto& g : grid) {
      ConfigTree cfg = base.with("train.backbone_lr", config::Value(g.backbone))
                           .with("train.offsets_refpoints_lr", config::Value(g.offsets))
                           .with("train.encdec_lr", config::Value(g.encdec))
                           .with("model.criterion.class_weight", config::Value(g.cls));
      run_row(fmt::format("lr ({:g}, {:g}, {:g}), class weight {:g}", g.backbone, g.offsets, g.encdec, g.cls), cfg,
              post);
    }
  }
  const std::string table = ablation_table(rows);
  out << table;
  if (!a.out_path.empty()) {
    const fs::path p(a.out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << table;
  }
  for (const auto& r : rows)
    if (!r.metrics) return kRuntimeError;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"detkit: modular detection-transformer toolbox"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model from a config");
  t->add_option("--config", train.config, "config file")->required()->check(CLI::ExistingFile);
  t->add_option("--seed", train.seed, "overrides train.seed");
  t->add_option("--output", train.output, "run directory (default: $DETKIT_OUTPUT_ROOT/<name>/<timestamp>)");
  t->add_option("--resume", train.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  t->add_option("overrides", train.overrides, "dotted.key=value overrides");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--config", ev.config, "config file")->required()->check(CLI::ExistingFile);
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  auto* nms_opt = e->add_option("--nms-threshold", ev.nms_threshold, "apply NMS at this IoU threshold")
                      ->check(CLI::Range(0.0, 1.0));
  e->add_flag("--no-nms", ev.no_nms, "disable NMS (default)")->excludes(nms_opt);
  e->add_option("--output", ev.output, "directory for results.json");
  e->add_option("overrides", ev.overrides, "dotted.key=value overrides");

  BenchArgs bench;
  auto* b = app.add_subcommand("benchmark", "Table-style benchmark report");
  b->add_option("--configs", bench.configs, "config files")->required();
  b->add_option("--checkpoints", bench.checkpoints, "optional checkpoints, one per config");
  b->add_option("--out", bench.out_path, "report path (.md; a .csv is written beside it)");
  b->add_option("--warmup", bench.warmup, "FPS warmup iterations")->check(CLI::NonNegativeNumber);
  b->add_option("--timed", bench.timed, "FPS timed iterations (>= 10)")->check(CLI::Range(10, 1000000));
  b->add_option("--flops-images", bench.flops_images, "test images used for FLOPs statistics")
      ->check(CLI::PositiveNumber);

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "params / FLOPs / FPS of a config");
  z->add_option("--config", an.config, "config file")->required()->check(CLI::ExistingFile);
  z->add_option("--checkpoint", an.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  z->add_option("--tool", an.tool, "flops | fps | params")->required()->check(CLI::IsMember({"flops", "fps", "params"}));
  z->add_option("--warmup", an.warmup, "FPS warmup iterations")->check(CLI::NonNegativeNumber);
  z->add_option("--timed", an.timed, "FPS timed iterations (>= 10)")->check(CLI::Range(10, 1000000));
  z->add_option("overrides", an.overrides, "dotted.key=value overrides");

  AblateArgs ab;
  auto* s = app.add_subcommand("ablate", "run an ablation grid");
  s->add_option("--study", ab.study, "nms | freeze | hparams")->required()->check(CLI::IsMember({"nms", "freeze", "hparams"}));
  s->add_option("--config", ab.config, "base config")->required()->check(CLI::ExistingFile);
  s->add_option("--iters", ab.iters, "training iterations per row")->check(CLI::PositiveNumber);
  s->add_option("--seed", ab.seed, "overrides train.seed");
  s->add_option("--out", ab.out_path, "write the table here too");
  s->add_option("overrides", ab.overrides, "dotted.key=value overrides");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  if (!argv_rev.empty()) argv_rev.pop_back();  // program name
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& pe) {
    err << "usage error: " << pe.what() << '\n';
    for (auto* sub : app.get_subcommands()) err << sub->help();
    return kUsageError;
  }

  try {
    if (*t) return cmd_train(train, out, err);
    if (*e) return cmd_eval(ev, out, err);
    if (*b) return cmd_benchmark(bench, out, err);
    if (*z) return cmd_analyze(an, out, err);
    return cmd_ablate(ab, out, err);
  } catch (const UsageError& ue) {
    err << "usage error: " << ue.what() << '\n';
    return kUsageError;
  } catch (const Error& de) {
    err << "error: " << de.what() << '\n';
    return is_usage_kind(de.kind()) ? kUsageError : kRuntimeError;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace detkit::cli

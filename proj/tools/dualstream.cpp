#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualstream/checkpoint.hpp"
#include "dualstream/config.hpp"
#include "dualstream/flow.hpp"
#include "dualstream/report.hpp"
#include "dualstream/synth.hpp"
#include "dualstream/train.hpp"
#include "dualstream/verify.hpp"

using namespace dualstream;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool deterministic = false;
  int verbosity = 0;
  std::size_t workers = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "dotted override, e.g. train.lr=5e-4")->take_all();
  cmd->add_flag("--deterministic", c.deterministic, "single worker, fixed seeds");
  cmd->add_option("--workers", c.workers, "worker threads (default from config)");
  cmd->add_flag("-v,--verbose", c.verbosity, "print progress");
}

json resolve(const Common& c) {
  json cfg = resolve_config(c.config, c.overrides);
  if (c.workers) cfg["workers"] = c.workers;
  if (c.deterministic) cfg["deterministic"] = true;
  return cfg;
}

std::function<void(const std::string&, const EpochRecord&)> epoch_printer(const Common& c) {
  if (!c.verbosity) return {};
  return [](const std::string& id, const EpochRecord& e) {
    std::fprintf(stderr, "[%s] epoch %zu loss %.4f train_acc %.3f val_acc %.3f lr %.3g\n", id.c_str(), e.epoch,
                 e.train_loss, e.train_acc, e.val_acc, e.lr);
  };
}

int cmd_synth(const std::string& out, SynthSpec spec, std::size_t workers) {
  const auto m = generate_synthetic(spec, out, workers);
  write_resolved_config(out, {{"synth", to_json(spec)}, {"out", out}, {"workers", workers}});
  std::printf("wrote %zu clips in %zu classes to %s\n", m.clips.size(), m.classes.size(), out.c_str());
  return 0;
}

int cmd_extract_flow(const Common& c, const std::string& dataset, std::string cache, bool keep_going) {
  json cfg = resolve(c);
  if (!dataset.empty()) cfg["dataset"]["root"] = dataset;
  if (!cache.empty()) cfg["dataset"]["cache_root"] = cache;
  FlowExtractOptions opt;
  opt.dataset_root = cfg["dataset"]["root"].get<std::string>();
  opt.cache_root = cfg["dataset"]["cache_root"].get<std::string>();
  if (opt.dataset_root.empty() || opt.cache_root.empty())
    fail(ErrorCode::InvalidArgument, "need a dataset root and a cache root (--cache or DUALSTREAM_CACHE)");
  opt.frames = cfg["dataset"]["frames"].get<std::size_t>();
  opt.size = cfg["dataset"]["size"].get<std::size_t>();
  opt.params = flow_params_from(cfg);
  opt.workers = workers_from(cfg);
  const auto manifest = load_manifest(opt.dataset_root);
  fs::create_directories(opt.cache_root);
  write_resolved_config(opt.cache_root, cfg);
  const auto s = extract_flow_cache(manifest, opt);
  std::printf("computed %zu, skipped %zu, failed %zu\n", s.computed, s.skipped, s.failed.size());
  for (const auto& [id, why] : s.failed) std::printf("failed %s: %s\n", id.c_str(), why.c_str());
  return s.failed.empty() || keep_going ? 0 : 1;
}

int cmd_train(const Common& c, const std::string& out) {
  const json cfg = resolve(c);
  fs::create_directories(out);
  write_resolved_config(out, cfg);
  const PreparedData data = prepare_data(cfg);
  write_manifest(fs::path(out) / "split_manifest.json", data.manifest);
  const auto mode = parse_stream_mode(cfg["run"]["mode"].get<std::string>());
  const auto head = parse_fusion_kind(cfg["run"]["head"].get<std::string>());
  RunOutput r = run_single(cfg, data, mode, head, epoch_printer(c));
  emit_run_report(out, r.report, data.manifest.classes, r.test.scores, r.test.labels);
  write_checkpoint(fs::path(out) / "best.ckpt", r.checkpoint);
  std::printf("%s: best epoch %zu, val %.4f, test %.4f\n", r.report.config_id.c_str(), r.report.best_epoch,
              r.report.val_accuracy, r.report.test_accuracy);
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& split_name, const std::string& out) {
  const Checkpoint ck = read_checkpoint(ckpt_path);
  if (!ck.meta.contains("config")) fail(ErrorCode::ConfigMismatch, ckpt_path + " carries no config");
  json cfg = ck.meta["config"];
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.deterministic) cfg["deterministic"] = true;
  if (c.workers) cfg["workers"] = c.workers;
  const Split split = parse_split(split_name);
  const PreparedData data = prepare_data(cfg);
  const ModelConfig mc = model_config_from(cfg, data.manifest.num_classes());
  DualStreamModel<float> model(mc);
  restore(model, ck);
  const auto& samples = split == Split::Train ? data.train : split == Split::Val ? data.val : data.test;
  const EvalResult ev = evaluate(model, samples);
  RunReport r = make_report(mc.id(), ev.scores, ev.labels);
  r.weights = model.stream_weights();
  fs::create_directories(out);
  write_resolved_config(out, cfg);
  emit_run_report(out, r, data.manifest.classes, ev.scores, ev.labels);
  std::printf("%s on %s: accuracy %.4f, macro-F1 %.4f\n", r.config_id.c_str(), split_name.c_str(), r.test_accuracy,
              r.macro_f1);
  return 0;
}

int cmd_compare(const Common& c, const std::string& out) {
  const json cfg = resolve(c);
  const auto reports = run_experiment_suite(cfg, out, epoch_printer(c));
  std::cout << reports_csv(reports);
  return 0;
}

int cmd_gradcheck(double tol, const std::string& out) {
  bool ok = true;
  json j = json::array();
  for (const auto& g : run_gradcheck_suite(tol)) {
    std::printf("%-28s %s  max_rel %.3e  coords %zu\n", g.name.c_str(), g.report.passed ? "PASS" : "FAIL",
                g.report.max_rel_error, g.report.coords_checked);
    if (!g.report.passed) std::printf("    worst: %s\n", g.report.worst.c_str());
    ok = ok && g.report.passed;
    j.push_back({{"name", g.name}, {"passed", g.report.passed}, {"max_rel_error", g.report.max_rel_error},
                 {"coords_checked", g.report.coords_checked}});
  }
  if (!out.empty()) {
    atomic_write(fs::path(out) / "gradcheck.json", j.dump(2) + "\n");
    write_resolved_config(out, {{"tol", tol}});
  }
  return ok ? 0 : 1;
}

/// Re-renders CSV and SVG outputs from a report.json (suite or single run).
int cmd_report(const std::string& input, const std::string& out) {
  const json j = json::parse(read_text(input));
  fs::create_directories(out);
  if (j.contains("reports")) {
    emit_suite_report(out, reports_from_json(j), j.value("classes", std::vector<std::string>{}));
  } else {
    const RunReport r = report_from_json(j);
    atomic_write(fs::path(out) / "report.csv", reports_csv({r}));
    atomic_write(fs::path(out) / "training_log.csv", training_log_csv(r.history));
    std::vector<std::string> classes;
    for (std::size_t k = 0; k < r.confusion.classes; ++k) classes.push_back(std::to_string(k));
    atomic_write(fs::path(out) / "confusion.svg", confusion_svg(r.confusion, classes, r.config_id));
  }
  write_resolved_config(out, {{"input", input}});
  std::printf("wrote report files to %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stream action recognition pipeline"};
  app.require_subcommand(1);

  SynthSpec spec;
  std::string synth_out, cue = "mixed";
  std::size_t synth_workers = 1;
  auto* synth = app.add_subcommand("synth", "generate a synthetic clip dataset");
  synth->add_option("--out", synth_out, "output dataset root")->required();
  synth->add_option("--mode", cue, "appearance | motion | mixed");
  synth->add_option("--classes", spec.num_classes);
  synth->add_option("--clips-per-class", spec.clips_per_class);
  synth->add_option("--frames", spec.frames_per_clip);
  synth->add_option("--size", spec.image_size);
  synth->add_option("--noise", spec.noise_level);
  synth->add_option("--speed", spec.speed);
  synth->add_option("--seed", spec.seed);
  synth->add_option("--workers", synth_workers);

  Common flow_c;
  std::string flow_dataset, flow_cache;
  bool keep_going = false;
  auto* flow = app.add_subcommand("extract-flow", "populate the optical-flow cache");
  add_common(flow, flow_c);
  flow->add_option("--dataset", flow_dataset, "dataset root");
  flow->add_option("--cache", flow_cache, "cache root (default: $DUALSTREAM_CACHE)");
  flow->add_flag("--keep-going", keep_going, "exit 0 even if some clips fail");

  Common train_c;
  std::string train_out;
  auto* train = app.add_subcommand("train", "train one configuration");
  add_common(train, train_c);
  train->add_option("--out", train_out, "output directory")->required();

  Common eval_c;
  std::string eval_ckpt, eval_split = "test", eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train | val | test");
  eval->add_option("--out", eval_out, "output directory")->required();

  Common cmp_c;
  std::string cmp_out;
  auto* cmp = app.add_subcommand("compare-fusions", "run the seven-configuration comparison");
  add_common(cmp, cmp_c);
  cmp->add_option("--out", cmp_out, "output directory")->required();

  double gc_tol = 1e-4;
  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--tol", gc_tol);
  gc->add_option("--out", gc_out, "optional output directory");

  std::string rep_in, rep_out;
  auto* rep = app.add_subcommand("report", "re-render tables and plots from report.json");
  rep->add_option("--input", rep_in)->required()->check(CLI::ExistingFile);
  rep->add_option("--out", rep_out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) {
      spec.cue_mode = parse_cue_mode(cue);
      return cmd_synth(synth_out, spec, synth_workers);
    }
    if (*flow) return cmd_extract_flow(flow_c, flow_dataset, flow_cache, keep_going);
    if (*train) return cmd_train(train_c, train_out);
    if (*eval) return cmd_eval(eval_c, eval_ckpt, eval_split, eval_out);
    if (*cmp) return cmd_compare(cmp_c, cmp_out);
    if (*gc) return cmd_gradcheck(gc_tol, gc_out);
    if (*rep) return cmd_report(rep_in, rep_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dualstream/checkpoint.hpp"
#include "dualstream/config.hpp"
#include "dualstream/dataset.hpp"
#include "dualstream/metrics.hpp"
#include "dualstream/model.hpp"
#include "dualstream/optim.hpp"
#include "dualstream/report.hpp"

namespace dualstream {

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_acc = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  Checkpoint best;
};

struct EvalResult {
  ScoreMatrix scores;
  std::vector<int> labels;
  double accuracy = 0;
};

template <typename T>
EvalResult evaluate(DualStreamModel<T>& model, const std::vector<Sample>& samples, std::size_t batch_size = 8) {
  const ModelConfig& cfg = model.config();
  model.eval();
  NoGradGuard no_grad;
  EvalResult r;
  r.scores.cols = cfg.num_classes;
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    const auto b = make_batch<T>(samples, std::span<const std::size_t>(idx).subspan(start, n), {}, cfg.uses_rgb(),
                                 cfg.uses_flow());
    const Tensor<T> probs = DualStreamModel<T>::probabilities(model.forward(b.rgb, b.flow));
    for (T v : probs.data()) r.scores.values.push_back(static_cast<double>(v));
    r.labels.insert(r.labels.end(), b.labels.begin(), b.labels.end());
  }
  r.scores.rows = r.labels.size();
  r.accuracy = accuracy(predictions(r.scores), r.labels);
  return r;
}

/// AdamW with a per-epoch cosine schedule and early stopping on validation
/// accuracy. The model ends up holding the weights of the best epoch.
template <typename T>
TrainResult train_model(DualStreamModel<T>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                        const TrainConfig& cfg, double lr,
                        const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) fail(ErrorCode::InvalidArgument, "empty training set");
  const ModelConfig& mc = model.config();
  AdamWOptions opt_options;
  opt_options.lr = lr;
  opt_options.weight_decay = cfg.weight_decay;
  AdamW<T> opt(model.trainable_parameters(cfg.freeze_rgb_backbone), opt_options);
  EarlyStopping stopper(cfg.patience, cfg.min_delta);
  const AugmentPolicy policy;
  TrainResult result;
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double epoch_lr = cosine_lr(lr, epoch - 1, cfg.max_epochs);
    opt.set_lr(epoch_lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffle_rng(CounterRng::hash(cfg.seed, 0x5100 + epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    model.train();
    double loss_sum = 0;
    std::size_t correct = 0, batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const auto idx = std::span<const std::size_t>(order).subspan(start, n);
      std::vector<AugmentDraw> draws;
      if (mc.uses_rgb())
        for (std::size_t j = 0; j < n; ++j) {
          CounterRng aug(CounterRng::hash(CounterRng::hash(cfg.seed, 0xA000 + epoch), idx[j]));
          draws.push_back(draw_augment(aug, policy, train[idx[j]].frame.width));
        }
      const auto b = make_batch<T>(train, idx, draws, mc.uses_rgb(), mc.uses_flow());
      model.set_dropout_seed(CounterRng::hash(CounterRng::hash(cfg.seed, epoch), batch_no));
      model.zero_grad();
      const auto out = model.forward(b.rgb, b.flow);
      const Tensor<T> loss = DualStreamModel<T>::loss(out, b.labels);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        fail(ErrorCode::DivergedLoss, "loss became " + std::to_string(lv) + " at epoch " + std::to_string(epoch) +
                                          ", batch " + std::to_string(batch_no) + " (" + mc.id() + ", lr " +
                                          std::to_string(epoch_lr) + ")");
      backward(loss);
      opt.step();
      loss_sum += lv * static_cast<double>(n);
      const std::size_t C = mc.num_classes;
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> row(C);
        for (std::size_t c = 0; c < C; ++c) row[c] = static_cast<double>(out.values.data()[j * C + c]);
        correct += argmax(row.data(), C) == b.labels[j];
      }
    }
    const double val_acc = val.empty() ? 0.0 : evaluate(model, val, cfg.batch_size).accuracy;
    const EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()),
                          static_cast<double>(correct) / static_cast<double>(train.size()), val_acc, epoch_lr};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const bool stop = stopper.update(val_acc);
    if (stopper.best_epoch() == epoch) {
      result.best = snapshot(model);
      result.best_epoch = epoch;
      result.best_val_acc = val_acc;
    }
    result.epochs_run = epoch;
    if (stop) {
      result.early_stopped = epoch < cfg.max_epochs;
      break;
    }
  }
  restore(model, result.best);
  model.eval();
  return result;
}

struct PreparedData {
  DatasetManifest manifest;
  std::vector<Sample> train, val, test;
};

inline DatasetManifest load_manifest(const fs::path& root) {
  return fs::exists(root / "manifest.json") ? read_manifest(root / "manifest.json") : scan_dataset(root);
}

/// Split, then load every clip once. Flow comes from the cache when present.
inline PreparedData prepare_data(const json& cfg, bool need_flow = true) {
  const json& d = cfg.at("dataset");
  PreparedData p;
  p.manifest = load_manifest(d.at("root").get<std::string>());
  stratified_split(p.manifest, split_fractions_from(cfg), d.at("seed").get<std::uint64_t>());
  LoaderOptions lo;
  lo.dataset_root = d.at("root").get<std::string>();
  lo.cache_root = d.at("cache_root").get<std::string>();
  lo.frames = d.at("frames").get<std::size_t>();
  lo.size = d.at("size").get<std::size_t>();
  lo.params = flow_params_from(cfg);
  lo.need_flow = need_flow;
  lo.workers = workers_from(cfg);
  p.train = load_split(p.manifest, Split::Train, lo);
  p.val = load_split(p.manifest, Split::Val, lo);
  p.test = load_split(p.manifest, Split::Test, lo);
  return p;
}

struct RunOutput {
  RunReport report;
  EvalResult test;
  Checkpoint checkpoint;
};

/// Trains and evaluates one configuration on prepared data.
inline RunOutput run_single(const json& cfg, const PreparedData& data, StreamMode mode, FusionKind head,
                            const std::function<void(const std::string&, const EpochRecord&)>& on_epoch = {}) {
  json run_cfg = cfg;
  run_cfg["run"]["mode"] = std::string(to_string(mode));
  run_cfg["run"]["head"] = std::string(to_string(head));
  const ModelConfig mc = model_config_from(run_cfg, data.manifest.num_classes());
  TrainConfig tc = train_config_from(cfg);
  if (mode == StreamMode::FlowOnly) tc.max_epochs = tc.flow_only_max_epochs;
  DualStreamModel<float> model(mc);
  const double lr = mode == StreamMode::FlowOnly ? tc.flow_only_lr : tc.lr;
  const std::string id = mc.id();
  const TrainResult tr = train_model(model, data.train, data.val, tc, lr, [&](const EpochRecord& e) {
    if (on_epoch) on_epoch(id, e);
  });
  RunOutput out;
  out.test = evaluate(model, data.test, tc.batch_size);
  out.report = make_report(id, out.test.scores, out.test.labels);
  out.report.val_accuracy = tr.best_val_acc;
  out.report.weights = model.stream_weights();
  out.report.epochs_run = tr.epochs_run;
  out.report.best_epoch = tr.best_epoch;
  out.report.early_stopped = tr.early_stopped;
  out.report.history = tr.history;
  out.checkpoint = tr.best;
  out.checkpoint.meta = {{"config", run_cfg}, {"classes", data.manifest.classes}, {"best_epoch", tr.best_epoch}};
  return out;
}

struct SuiteEntry {
  StreamMode mode;
  FusionKind head;
};

/// RGB-only, flow-only, then the five fusion heads.
inline std::vector<SuiteEntry> suite_entries() {
  std::vector<SuiteEntry> e = {{StreamMode::RgbOnly, FusionKind::Late}, {StreamMode::FlowOnly, FusionKind::Late}};
  for (FusionKind k : kAllFusionKinds) e.push_back({StreamMode::Fusion, k});
  return e;
}

/// Runs every configuration on the same split and writes per-run directories
/// plus the combined report into `out_dir`.
inline std::vector<RunReport> run_experiment_suite(
    const json& cfg, const fs::path& out_dir,
    const std::function<void(const std::string&, const EpochRecord&)>& on_epoch = {}) {
  const PreparedData data = prepare_data(cfg);
  fs::create_directories(out_dir);
  write_resolved_config(out_dir, cfg);
  write_manifest(out_dir / "split_manifest.json", data.manifest);
  std::vector<RunReport> reports;
  for (const auto& entry : suite_entries()) {
    RunOutput r = run_single(cfg, data, entry.mode, entry.head, on_epoch);
    const fs::path dir = out_dir / r.report.config_id;
    emit_run_report(dir, r.report, data.manifest.classes, r.test.scores, r.test.labels);
    write_checkpoint(dir / "best.ckpt", r.checkpoint);
    reports.push_back(std::move(r.report));
  }
  emit_suite_report(out_dir, reports, data.manifest.classes);
  return reports;
}

}  // namespace dualstream

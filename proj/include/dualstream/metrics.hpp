#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualstream/error.hpp"

namespace dualstream {

/// Per-sample class scores, row-major [num_samples x num_classes].
struct ScoreMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  const double* row(std::size_t i) const { return values.data() + i * cols; }
};

/// Argmax with ties resolved to the lowest class index.
inline int argmax(const double* scores, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (scores[c] > scores[best]) best = c;
  return static_cast<int>(best);
}

inline std::vector<int> predictions(const ScoreMatrix& s) {
  std::vector<int> out(s.rows);
  for (std::size_t i = 0; i < s.rows; ++i) out[i] = argmax(s.row(i), s.cols);
  return out;
}

/// Rank of the true class: the number of classes that outrank it, where a
/// tied class outranks it when its index is lower.
inline std::size_t label_rank(const double* scores, std::size_t n, int label) {
  const double mine = scores[label];
  std::size_t rank = 0;
  for (std::size_t c = 0; c < n; ++c)
    if (scores[c] > mine || (scores[c] == mine && static_cast<int>(c) < label)) ++rank;
  return rank;
}

inline std::map<int, double> top_k_accuracy(const ScoreMatrix& s, const std::vector<int>& labels,
                                            const std::vector<int>& ks) {
  if (labels.size() != s.rows) fail(ErrorCode::ShapeMismatch, "labels and scores differ in length");
  for (int k : ks)
    if (k < 1 || static_cast<std::size_t>(k) > s.cols)
      fail(ErrorCode::KOutOfRange, "K=" + std::to_string(k) + " with " + std::to_string(s.cols) + " classes");
  std::map<int, double> out;
  for (int k : ks) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < s.rows; ++i)
      if (label_rank(s.row(i), s.cols, labels[i]) < static_cast<std::size_t>(k)) ++hits;
    out[k] = s.rows ? static_cast<double>(hits) / static_cast<double>(s.rows) : 0.0;
  }
  return out;
}

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::vector<long>> counts;  ///< [true][predicted]

  long total() const {
    long n = 0;
    for (const auto& r : counts)
      for (long v : r) n += v;
    return n;
  }

  long trace() const {
    long n = 0;
    for (std::size_t i = 0; i < classes; ++i) n += counts[i][i];
    return n;
  }

  double accuracy() const { return total() ? static_cast<double>(trace()) / static_cast<double>(total()) : 0.0; }

  /// Rows divided by their sums; rows of absent classes stay zero.
  std::vector<std::vector<double>> normalized() const {
    std::vector<std::vector<double>> out(classes, std::vector<double>(classes, 0.0));
    for (std::size_t t = 0; t < classes; ++t) {
      long sum = 0;
      for (long v : counts[t]) sum += v;
      if (sum)
        for (std::size_t p = 0; p < classes; ++p) out[t][p] = static_cast<double>(counts[t][p]) / static_cast<double>(sum);
    }
    return out;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline void check_labels(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t C) {
  if (preds.size() != labels.size()) fail(ErrorCode::ShapeMismatch, "predictions and labels differ in length");
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] < 0 || labels[i] < 0 || static_cast<std::size_t>(preds[i]) >= C ||
        static_cast<std::size_t>(labels[i]) >= C)
      fail(ErrorCode::InvalidArgument, "class index out of range at sample " + std::to_string(i));
}

inline ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t C) {
  check_labels(preds, labels, C);
  ConfusionMatrix m{C, std::vector<std::vector<long>>(C, std::vector<long>(C, 0))};
  for (std::size_t i = 0; i < preds.size(); ++i) ++m.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  return m;
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) fail(ErrorCode::ShapeMismatch, "predictions and labels differ in length");
  if (preds.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Unweighted mean of per-class F1 over all C classes. A class with
/// precision + recall = 0 (including one that never occurs) scores 0.
inline double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t C) {
  const ConfusionMatrix m = confusion(preds, labels, C);
  double sum = 0;
  for (std::size_t c = 0; c < C; ++c) {
    long tp = m.counts[c][c], pred = 0, actual = 0;
    for (std::size_t k = 0; k < C; ++k) {
      pred += m.counts[k][c];
      actual += m.counts[c][k];
    }
    const double precision = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
    const double recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
    if (precision + recall > 0) sum += 2 * precision * recall / (precision + recall);
  }
  return C ? sum / static_cast<double>(C) : 0.0;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, train_acc = 0, val_acc = 0, lr = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct RunReport {
  std::string config_id;
  double test_accuracy = 0;
  double val_accuracy = 0;
  double macro_f1 = 0;
  std::map<int, double> top_k;
  ConfusionMatrix confusion;
  std::optional<std::pair<double, double>> weights;  ///< (alpha_rgb, alpha_flow)
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  std::vector<EpochRecord> history;

  bool operator==(const RunReport&) const = default;
};

inline const std::vector<int>& report_ks() {
  static const std::vector<int> ks = {1, 2, 3, 5};
  return ks;
}

/// Metrics for one evaluated split. Top-K entries with K > C are reported at
/// K = C, where the accuracy is 1 by definition.
inline RunReport make_report(const std::string& id, const ScoreMatrix& scores, const std::vector<int>& labels) {
  RunReport r;
  r.config_id = id;
  const auto preds = predictions(scores);
  r.test_accuracy = accuracy(preds, labels);
  r.macro_f1 = macro_f1(preds, labels, scores.cols);
  r.confusion = confusion(preds, labels, scores.cols);
  std::vector<int> ks;
  for (int k : report_ks()) ks.push_back(std::min<int>(k, static_cast<int>(scores.cols)));
  const auto tk = top_k_accuracy(scores, labels, ks);
  for (std::size_t i = 0; i < ks.size(); ++i) r.top_k[report_ks()[i]] = tk.at(ks[i]);
  return r;
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j;
  j["config_id"] = r.config_id;
  j["test_accuracy"] = r.test_accuracy;
  j["val_accuracy"] = r.val_accuracy;
  j["macro_f1"] = r.macro_f1;
  j["top_k"] = nlohmann::json::object();
  for (const auto& [k, v] : r.top_k) j["top_k"][std::to_string(k)] = v;
  j["confusion"] = r.confusion.counts;
  j["weights"] = r.weights ? nlohmann::json{{"alpha_rgb", r.weights->first}, {"alpha_flow", r.weights->second}}
                           : nlohmann::json(nullptr);
  j["epochs_run"] = r.epochs_run;
  j["best_epoch"] = r.best_epoch;
  j["early_stopped"] = r.early_stopped;
  j["history"] = nlohmann::json::array();
  for (const auto& e : r.history)
    j["history"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_acc", e.train_acc},
                            {"val_acc", e.val_acc}, {"lr", e.lr}});
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.config_id = j.at("config_id").get<std::string>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  for (const auto& [k, v] : j.at("top_k").items()) r.top_k[std::stoi(k)] = v.get<double>();
  r.confusion.counts = j.at("confusion").get<std::vector<std::vector<long>>>();
  r.confusion.classes = r.confusion.counts.size();
  if (!j.at("weights").is_null())
    r.weights = std::make_pair(j["weights"].at("alpha_rgb").get<double>(), j["weights"].at("alpha_flow").get<double>());
  r.epochs_run = j.at("epochs_run").get<std::size_t>();
  r.best_epoch = j.value("best_epoch", std::size_t{0});
  r.early_stopped = j.at("early_stopped").get<bool>();
  for (const auto& e : j.value("history", nlohmann::json::array()))
    r.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                         e.at("train_acc").get<double>(), e.at("val_acc").get<double>(), e.at("lr").get<double>()});
  return r;
}

}  // namespace dualstream

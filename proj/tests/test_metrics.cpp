#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dualstream/metrics.hpp"
#include "dualstream/report.hpp"
#include "dualstream/rng.hpp"

using namespace dualstream;

namespace {

ScoreMatrix make_scores(std::size_t cols, std::vector<double> values) {
  return {values.size() / cols, cols, std::move(values)};
}

ScoreMatrix random_scores(CounterRng& rng, std::size_t rows, std::size_t cols, bool with_ties = false) {
  ScoreMatrix s{rows, cols, {}};
  for (std::size_t i = 0; i < rows * cols; ++i)
    s.values.push_back(with_ties ? static_cast<double>(rng.below(3)) : rng.uniform());
  return s;
}

std::vector<int> random_labels(CounterRng& rng, std::size_t n, std::size_t C) {
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<int>(rng.below(C)));
  return out;
}

// Reference: sort classes by descending score, lower index first on ties,
// and look for the label among the first k.
double sorted_top_k(const ScoreMatrix& s, const std::vector<int>& labels, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    std::vector<std::size_t> order(s.cols);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.row(i)[a] > s.row(i)[b]; });
    hits += std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), static_cast<std::size_t>(labels[i])) !=
            order.begin() + static_cast<std::ptrdiff_t>(k);
  }
  return static_cast<double>(hits) / static_cast<double>(s.rows);
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string c; std::getline(in, c, ',');) out.push_back(c);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dualstream_test_metrics_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(TopK, WorkedExample) {
  const auto s = make_scores(4, {0.1, 0.6, 0.2, 0.1,    // label 2 is second
                                 0.7, 0.1, 0.1, 0.1,    // label 0 is first
                                 0.25, 0.25, 0.25, 0.25,  // label 3 loses every tie
                                 0.1, 0.2, 0.3, 0.4});  // label 0 is last
  const std::vector<int> labels{2, 0, 3, 0};
  const auto tk = top_k_accuracy(s, labels, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(tk.at(1), 0.25);
  EXPECT_DOUBLE_EQ(tk.at(2), 0.5);
  EXPECT_DOUBLE_EQ(tk.at(3), 0.5);
  EXPECT_DOUBLE_EQ(tk.at(4), 1.0);
}

TEST(TopK, TopOneIsArgmaxAccuracy) {
  CounterRng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_scores(rng, 30, 5, trial % 2 == 0);
    const auto labels = random_labels(rng, 30, 5);
    EXPECT_DOUBLE_EQ(top_k_accuracy(s, labels, {1}).at(1), accuracy(predictions(s), labels));
  }
}

TEST(TopK, MatchesSortedReferenceAndIsMonotone) {
  CounterRng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t C = 2 + rng.below(7);
    const auto s = random_scores(rng, 25, C, trial % 3 == 0);
    const auto labels = random_labels(rng, 25, C);
    std::vector<int> ks(C);
    std::iota(ks.begin(), ks.end(), 1);
    const auto tk = top_k_accuracy(s, labels, ks);
    double prev = 0;
    for (int k : ks) {
      EXPECT_DOUBLE_EQ(tk.at(k), sorted_top_k(s, labels, static_cast<std::size_t>(k)));
      EXPECT_GE(tk.at(k), prev);
      prev = tk.at(k);
    }
    EXPECT_DOUBLE_EQ(tk.at(static_cast<int>(C)), 1.0);
  }
}

TEST(TopK, KOutsideRangeIsRejected) {
  const auto s = make_scores(3, {1, 0, 0});
  for (int k : {0, 4, -1}) {
    try {
      top_k_accuracy(s, {0}, {k});
      ADD_FAILURE() << "K=" << k;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::KOutOfRange);
    }
  }
}

TEST(MacroF1, HandComputedExample) {
  // each class: tp 1, predicted 3 times, present 3 times -> F1 = 1/3
  EXPECT_NEAR(macro_f1({0, 1, 1, 1, 0, 0}, {0, 0, 0, 1, 1, 1}, 2), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(macro_f1({0, 1, 2}, {0, 1, 2}, 3), 1.0, 1e-12);
}

TEST(MacroF1, AbsentClassCountsAsZero) {
  EXPECT_NEAR(macro_f1({0, 1, 0, 1}, {0, 1, 0, 1}, 3), 2.0 / 3.0, 1e-12);
}

TEST(MacroF1, InvariantToSampleOrderAndClassRelabelling) {
  CounterRng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 2 + rng.below(5), n = 40;
    auto labels = random_labels(rng, n, C), preds = random_labels(rng, n, C);
    const double base = macro_f1(preds, labels, C);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<int> pl, pp;
    for (auto i : order) {
      pl.push_back(labels[i]);
      pp.push_back(preds[i]);
    }
    EXPECT_NEAR(macro_f1(pp, pl, C), base, 1e-12);

    std::vector<int> perm(C);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<int>(perm));
    for (auto& v : labels) v = perm[static_cast<std::size_t>(v)];
    for (auto& v : preds) v = perm[static_cast<std::size_t>(v)];
    EXPECT_NEAR(macro_f1(preds, labels, C), base, 1e-12);
  }
}

TEST(Confusion, CountsAreConserved) {
  CounterRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 2 + rng.below(6), n = 1 + rng.below(60);
    const auto labels = random_labels(rng, n, C), preds = random_labels(rng, n, C);
    const auto m = confusion(preds, labels, C);
    EXPECT_EQ(m.total(), static_cast<long>(n));
    EXPECT_DOUBLE_EQ(m.accuracy(), accuracy(preds, labels));
    for (std::size_t c = 0; c < C; ++c) {
      long row = 0;
      for (long v : m.counts[c]) row += v;
      EXPECT_EQ(row, std::count(labels.begin(), labels.end(), static_cast<int>(c)));
      long col = 0;
      for (std::size_t t = 0; t < C; ++t) col += m.counts[t][c];
      EXPECT_EQ(col, std::count(preds.begin(), preds.end(), static_cast<int>(c)));
    }
    for (const auto& row : m.normalized()) {
      const double s = std::accumulate(row.begin(), row.end(), 0.0);
      EXPECT_TRUE(s == 0.0 || std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST(Confusion, RejectsOutOfRangeLabels) {
  EXPECT_THROW(confusion({0, 3}, {0, 1}, 3), Error);
  EXPECT_THROW(confusion({0}, {0, 1}, 3), Error);
}

TEST(Report, SmallClassCountUsesKEqualC) {
  const auto s = make_scores(3, {0.1, 0.2, 0.7, 0.5, 0.3, 0.2});
  const RunReport r = make_report("x", s, {0, 1});
  EXPECT_DOUBLE_EQ(r.top_k.at(1), 0.0);
  EXPECT_DOUBLE_EQ(r.top_k.at(2), 0.5);
  EXPECT_DOUBLE_EQ(r.top_k.at(3), 1.0);
  EXPECT_DOUBLE_EQ(r.top_k.at(5), 1.0);
}

TEST(Report, JsonRoundTrip) {
  CounterRng rng(8);
  const auto s = random_scores(rng, 12, 6);
  RunReport r = make_report("fusion_gated", s, random_labels(rng, 12, 6));
  r.val_accuracy = 0.625;
  r.weights = std::make_pair(0.3, 0.7);
  r.epochs_run = 3;
  r.best_epoch = 2;
  r.early_stopped = true;
  r.history = {{1, 1.5, 0.2, 0.3, 1e-3}, {2, 1.2, 0.4, 0.625, 7.5e-4}, {3, 1.1, 0.5, 0.5, 2.5e-4}};
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  r.weights.reset();
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  const auto suite = reports_from_json(suite_json({r, r}, {"a", "b"}));
  ASSERT_EQ(suite.size(), 2u);
  EXPECT_EQ(suite[1], r);
}

TEST(Report, CsvHasOneRowPerRunAndMarksBest) {
  std::vector<RunReport> rs(3);
  rs[0].config_id = "rgb_only";
  rs[0].test_accuracy = 0.5;
  rs[0].top_k = {{1, 0.5}, {2, 0.75}, {3, 1}, {5, 1}};
  rs[1].config_id = "fusion_late";
  rs[1].test_accuracy = 0.875;
  rs[1].weights = std::make_pair(0.5, 0.5);
  rs[1].top_k = {{1, 0.875}, {2, 1}, {3, 1}, {5, 1}};
  rs[2].config_id = "fusion_gated";
  rs[2].test_accuracy = 0.875;
  rs[2].top_k = {{1, 0.875}, {2, 0.9}, {3, 1}, {5, 1}};
  const auto rows = lines(reports_csv(rs));
  ASSERT_EQ(rows.size(), 4u);
  const auto header = cells(rows[0]);
  EXPECT_EQ(header.front(), "config");
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(cells(rows[i]).size(), header.size()) << rows[i];
  EXPECT_EQ(cells(rows[1])[col("test_acc")], "50.00");
  EXPECT_EQ(cells(rows[2])[col("test_acc")], "87.50*");
  EXPECT_EQ(cells(rows[3])[col("test_acc")], "87.50*");
  EXPECT_EQ(cells(rows[2])[col("top2")], "100.00*");
  EXPECT_EQ(cells(rows[3])[col("top2")], "90.00");
  EXPECT_EQ(cells(rows[1])[col("top5")], "100.00*");
  EXPECT_EQ(cells(rows[2])[col("alpha_rgb")], "0.5000");
  EXPECT_EQ(cells(rows[1])[col("alpha_rgb")], "");
}

TEST(Report, ConfusionSvgHasOneCellPerPair) {
  for (std::size_t C : {2u, 4u, 7u}) {
    CounterRng rng(C);
    const auto m = confusion(random_labels(rng, 20, C), random_labels(rng, 20, C), C);
    std::vector<std::string> names;
    for (std::size_t c = 0; c < C; ++c) names.push_back("class<" + std::to_string(c) + ">");
    const std::string svg = confusion_svg(m, names, "t");
    EXPECT_EQ(count_of(svg, "class=\"cell\""), C * C);
    EXPECT_EQ(svg.find("class<"), std::string::npos);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  }
}

TEST(Report, RunFilesAllowRecomputingMetrics) {
  auto dir = scratch_dir("run");
  CounterRng rng(9);
  const auto s = random_scores(rng, 16, 4);
  const auto labels = random_labels(rng, 16, 4);
  RunReport r = make_report("fusion_concat", s, labels);
  r.history = {{1, 1.0, 0.5, 0.5, 1e-3}};
  emit_run_report(dir, r, {"a", "b", "c", "d"}, s, labels);
  for (const char* f : {"report.json", "training_log.csv", "curves.svg", "confusion.svg", "scores.npy", "labels.npy"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  const NpyArray sn = read_npy(dir / "scores.npy");
  EXPECT_EQ(sn.shape, (Shape{16, 4}));
  const auto sv = npy_values<float>(sn);
  const auto lv = npy_values<std::int64_t>(read_npy(dir / "labels.npy"));
  const ScoreMatrix back{16, 4, std::vector<double>(sv.begin(), sv.end())};
  const std::vector<int> back_labels(lv.begin(), lv.end());
  EXPECT_EQ(back_labels, labels);
  const RunReport again = make_report("fusion_concat", back, back_labels);
  const RunReport stored = report_from_json(nlohmann::json::parse(read_text(dir / "report.json")));
  EXPECT_DOUBLE_EQ(again.test_accuracy, stored.test_accuracy);
  EXPECT_DOUBLE_EQ(again.macro_f1, stored.macro_f1);
  EXPECT_EQ(again.top_k, stored.top_k);
  EXPECT_EQ(again.confusion, stored.confusion);
  EXPECT_EQ(lines(read_text(dir / "training_log.csv")).size(), 2u);
}

TEST(Report, SuiteFiles) {
  auto dir = scratch_dir("suite");
  CounterRng rng(10);
  std::vector<RunReport> rs;
  for (const char* id : {"rgb_only", "flow_only", "fusion_late"}) {
    RunReport r = make_report(id, random_scores(rng, 8, 3), random_labels(rng, 8, 3));
    r.history = {{1, 1.0, 0.5, 0.4, 1e-3}, {2, 0.8, 0.6, 0.5, 5e-4}};
    rs.push_back(r);
  }
  emit_suite_report(dir, rs, {"a", "b", "c"});
  for (const char* f : {"report.json", "report.csv", "topk.svg", "curves.svg", "confusion.svg"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(count_of(read_text(dir / "curves.svg"), "class=\"series\""), 3u);
  EXPECT_EQ(count_of(read_text(dir / "topk.svg"), "class=\"bar\""), 3u * 4);
  EXPECT_EQ(reports_from_json(nlohmann::json::parse(read_text(dir / "report.json"))), rs);
}

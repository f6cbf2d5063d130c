// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"

namespace slicevoco {

namespace {

struct Column {
  std::vector<double> scores;
  std::vector<int> labels;
};

Column gather_column(const PredictionTable& preds, const LabelTable& labels, std::size_t c) {
  Column col;
  col.scores.reserve(preds.size());
  col.labels.reserve(preds.size());
  for (const auto& [id, p] : preds) {
    col.scores.push_back(p.column(c));
    col.labels.push_back(labels.at(id).class_of(c / kNumClasses) == static_cast<int>(c % kNumClasses) ? 1 : 0);
  }
  return col;
}

void require_nonempty(const PredictionTable& preds, const char* what) {
  if (preds.empty()) throw DataError(std::string(what) + ": empty prediction set");
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double grid_threshold(int k) { return static_cast<double>(k) / 100.0; }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void validate(const WeightTable& w) {
  for (double x : w.weights) {
    if (!(x > 0.0) || !std::isfinite(x)) throw ConfigError("class weights must be finite and > 0");
  }
}

double clipped(double p) noexcept { return std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip); }

void require_matching_ids(const PredictionTable& preds, const LabelTable& labels) {
  std::vector<std::string> missing;
  for (const auto& [id, p] : preds) {
    if (!labels.contains(id)) missing.push_back(id);
  }
  if (missing.empty()) return;
  std::string msg = "predictions without labels:";
  for (const auto& id : missing) msg += " " + id;
  throw DataError(msg);
}

std::array<double, kNumOrgans> rsna_organ_scores(const PredictionTable& preds, const LabelTable& labels,
                                                 const WeightTable& w) {
  require_nonempty(preds, "rsna_score");
  require_matching_ids(preds, labels);
  validate(w);
  std::array<double, kNumOrgans> out{};
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    double num = 0.0;
    double den = 0.0;
    for (const auto& [id, p] : preds) {
      const int y = labels.at(id).class_of(o);
      num += w[y] * -std::log(clipped(p.probs[o][y]));
      den += w[y];
    }
    out[o] = num / den;
  }
  return out;
}

double rsna_score(const PredictionTable& preds, const LabelTable& labels, const WeightTable& w) {
  const auto organs = rsna_organ_scores(preds, labels, w);
  return (organs[0] + organs[1] + organs[2]) / 3.0;
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: length mismatch");
  if (scores.empty()) throw DataError("average_precision: empty input");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

MapResult mean_average_precision(const PredictionTable& preds, const LabelTable& labels) {
  require_nonempty(preds, "mean_average_precision");
  require_matching_ids(preds, labels);
  MapResult result;
  double sum = 0.0;
  std::size_t evaluated = 0;
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    const Column col = gather_column(preds, labels, c);
    result.per_column[c] = average_precision(col.scores, col.labels);
    if (result.per_column[c]) {
      sum += *result.per_column[c];
      ++evaluated;
    } else {
      result.skipped_columns.push_back(column_name(c));
    }
  }
  result.map = evaluated == 0 ? 0.0 : sum / static_cast<double>(evaluated);
  return result;
}

PrecisionRecall macro_from_counts(std::span<const ColumnCounts> counts) {
  if (counts.empty()) throw DataError("macro_from_counts: no columns");
  PrecisionRecall pr;
  double p_sum = 0.0;
  double r_sum = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const auto& k = counts[c];
    const double p = k.tp + k.fp == 0 ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp);
    const double r = k.tp + k.fn == 0 ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    if (c < kNumColumns) {
      pr.per_column_precision[c] = p;
      pr.per_column_recall[c] = r;
    }
    p_sum += p;
    r_sum += r;
  }
  pr.precision = p_sum / static_cast<double>(counts.size());
  pr.recall = r_sum / static_cast<double>(counts.size());
  return pr;
}

PrecisionRecall macro_precision_recall(const PredictionTable& preds, const LabelTable& labels,
                                       const Thresholds& thresholds) {
  require_nonempty(preds, "macro_precision_recall");
  require_matching_ids(preds, labels);
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("thresholds must lie in [0,1]");
  }
  std::array<ColumnCounts, kNumColumns> counts{};
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    const Column col = gather_column(preds, labels, c);
    for (std::size_t i = 0; i < col.scores.size(); ++i) {
      const bool predicted = col.scores[i] >= thresholds[c];
      const bool actual = col.labels[i] != 0;
      if (predicted && actual) ++counts[c].tp;
      if (predicted && !actual) ++counts[c].fp;
      if (!predicted && actual) ++counts[c].fn;
    }
  }
  PrecisionRecall pr = macro_from_counts(counts);
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    if (counts[c].tp + counts[c].fp == 0) pr.no_predicted_positive.push_back(column_name(c));
    if (counts[c].tp + counts[c].fn == 0) pr.no_actual_positive.push_back(column_name(c));
  }
  return pr;
}

std::vector<std::string> SplitPlan::fold_members(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& id : train_ids) {
    if (fold_of.at(id) == fold) out.push_back(id);
  }
  return out;
}

void to_json(nlohmann::json& j, const SplitPlan& p) {
  nlohmann::json folds = nlohmann::json::object();
  for (const auto& [id, f] : p.fold_of) folds[id] = f;
  j = nlohmann::json{{"seed", p.seed}, {"folds", p.folds}, {"train_ids", p.train_ids},
                     {"test_ids", p.test_ids}, {"fold_of", folds}};
}

void from_json(const nlohmann::json& j, SplitPlan& p) {
  p.seed = j.at("seed").get<std::uint64_t>();
  p.folds = j.at("folds").get<std::size_t>();
  p.train_ids = j.at("train_ids").get<std::vector<std::string>>();
  p.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  p.fold_of.clear();
  for (const auto& [id, f] : j.at("fold_of").items()) p.fold_of[id] = f.get<std::size_t>();
}

SplitPlan make_split(std::span<const std::string> patient_ids, std::uint64_t seed, double test_fraction,
                     std::size_t folds) {
  if (folds == 0) throw ConfigError("make_split: folds must be >= 1");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("make_split: test_fraction in [0,1)");
  std::set<std::string> seen;
  for (const auto& id : patient_ids) {
    if (!seen.insert(id).second) throw DataError("make_split: duplicate patient id " + id);
  }
  auto keyed = [&](std::uint64_t salt) {
    std::vector<std::pair<std::uint64_t, std::string>> v;
    v.reserve(patient_ids.size());
    for (const auto& id : patient_ids) v.emplace_back(mix64(fnv1a64(id) ^ mix64(seed ^ salt)), id);
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto ranked = keyed(0);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ranked.size())));
  SplitPlan plan;
  plan.seed = seed;
  plan.folds = folds;
  std::set<std::string> test;
  for (std::size_t i = 0; i < n_test; ++i) test.insert(ranked[i].second);
  std::size_t rank = 0;
  for (const auto& [h, id] : keyed(0x5f0d)) {
    if (test.contains(id)) continue;
    plan.fold_of[id] = rank++ % folds;
  }
  for (const auto& [h, id] : ranked) {
    (test.contains(id) ? plan.test_ids : plan.train_ids).push_back(id);
  }
  std::sort(plan.train_ids.begin(), plan.train_ids.end());
  std::sort(plan.test_ids.begin(), plan.test_ids.end());
  return plan;
}

double best_f1_threshold(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("best_f1_threshold: length mismatch");
  double best_t = 0.0;
  double best_f1 = -1.0;
  for (int k = 0; k <= 100; ++k) {
    const double t = grid_threshold(k);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool pred = scores[i] >= t;
      const bool act = labels[i] != 0;
      tp += pred && act;
      fp += pred && !act;
      fn += !pred && act;
    }
    const std::size_t den = 2 * tp + fp + fn;
    const double f1 = den == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(den);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return best_t;
}

Thresholds select_thresholds(const PredictionTable& oof_preds, const LabelTable& labels, const SplitPlan& plan) {
  std::vector<std::string> uncovered;
  for (const auto& id : plan.train_ids) {
    if (!oof_preds.contains(id) || !labels.contains(id)) uncovered.push_back(id);
  }
  if (!uncovered.empty()) {
    std::string msg = "select_thresholds: train ids without out-of-fold predictions or labels:";
    for (const auto& id : uncovered) msg += " " + id;
    throw DataError(msg);
  }
  Thresholds out{};
  std::array<std::size_t, kNumColumns> used{};
  bool any_fold = false;
  for (std::size_t f = 0; f < plan.folds; ++f) {
    const auto members = plan.fold_members(f);
    if (members.empty()) continue;
    any_fold = true;
    PredictionTable fold_preds;
    for (const auto& id : members) fold_preds[id] = oof_preds.at(id);
    for (std::size_t c = 0; c < kNumColumns; ++c) {
      const Column col = gather_column(fold_preds, labels, c);
      // A fold without positives has F1 = 0 at every threshold and says nothing.
      if (std::find(col.labels.begin(), col.labels.end(), 1) == col.labels.end()) continue;
      out[c] += best_f1_threshold(col.scores, col.labels);
      ++used[c];
    }
  }
  if (!any_fold) throw DataError("select_thresholds: no non-empty folds");
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    if (used[c] > 0) out[c] /= static_cast<double>(used[c]);
  }
  return out;
}

EvaluationReport evaluate_predictions(const PredictionTable& preds, const LabelTable& labels,
                                      const Thresholds& thresholds, const WeightTable& weights) {
  EvaluationReport r;
  r.organ_rsna = rsna_organ_scores(preds, labels, weights);
  r.rsna_score = (r.organ_rsna[0] + r.organ_rsna[1] + r.organ_rsna[2]) / 3.0;
  const MapResult m = mean_average_precision(preds, labels);
  r.map = m.map;
  r.column_ap = m.per_column;
  r.skipped_columns = m.skipped_columns;
  const PrecisionRecall pr = macro_precision_recall(preds, labels, thresholds);
  r.macro_precision = pr.precision;
  r.macro_recall = pr.recall;
  r.column_precision = pr.per_column_precision;
  r.column_recall = pr.per_column_recall;
  r.no_predicted_positive = pr.no_predicted_positive;
  r.thresholds = thresholds;
  r.weights = weights;
  r.studies = preds.size();
  std::uint64_t h = kFnvOffset;
  for (const auto& [id, p] : preds) h = fnv1a64(id + "\n", h);
  r.test_ids_digest = hex64(h);
  return r;
}

void to_json(nlohmann::json& j, const EvaluationReport& r) {
  nlohmann::ordered_json o;
  o["rsna_score"] = r.rsna_score;
  o["map"] = r.map;
  o["macro_precision"] = r.macro_precision;
  o["macro_recall"] = r.macro_recall;
  nlohmann::ordered_json organs;
  for (std::size_t k = 0; k < kNumOrgans; ++k) organs[std::string(kOrganNames[k])] = r.organ_rsna[k];
  o["organ_rsna"] = organs;
  nlohmann::ordered_json cols;
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    nlohmann::ordered_json col;
    col["ap"] = r.column_ap[c] ? nlohmann::ordered_json(*r.column_ap[c]) : nlohmann::ordered_json(nullptr);
    col["precision"] = r.column_precision[c];
    col["recall"] = r.column_recall[c];
    col["threshold"] = r.thresholds[c];
    cols[column_name(c)] = col;
  }
  o["columns"] = cols;
  nlohmann::ordered_json w;
  for (std::size_t k = 0; k < kNumClasses; ++k) w[std::string(kClassNames[k])] = r.weights[k];
  o["weights"] = w;
  o["skipped_columns"] = r.skipped_columns;
  o["no_predicted_positive"] = r.no_predicted_positive;
  o["studies"] = r.studies;
  o["split_seed"] = r.split_seed ? nlohmann::ordered_json(*r.split_seed) : nlohmann::ordered_json(nullptr);
  o["test_ids_digest"] = r.test_ids_digest;
  j = nlohmann::json::parse(o.dump());
}

void from_json(const nlohmann::json& j, EvaluationReport& r) {
  r.rsna_score = j.at("rsna_score").get<double>();
  r.map = j.at("map").get<double>();
  r.macro_precision = j.at("macro_precision").get<double>();
  r.macro_recall = j.at("macro_recall").get<double>();
  for (std::size_t k = 0; k < kNumOrgans; ++k) r.organ_rsna[k] = j.at("organ_rsna").at(std::string(kOrganNames[k]));
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    const auto& col = j.at("columns").at(column_name(c));
    r.column_ap[c] = col.at("ap").is_null() ? std::nullopt : std::optional<double>(col.at("ap").get<double>());
    r.column_precision[c] = col.at("precision").get<double>();
    r.column_recall[c] = col.at("recall").get<double>();
    r.thresholds[c] = col.at("threshold").get<double>();
  }
  for (std::size_t k = 0; k < kNumClasses; ++k) r.weights.weights[k] = j.at("weights").at(std::string(kClassNames[k]));
  r.skipped_columns = j.at("skipped_columns").get<std::vector<std::string>>();
  r.no_predicted_positive = j.at("no_predicted_positive").get<std::vector<std::string>>();
  r.studies = j.at("studies").get<std::size_t>();
  r.split_seed = j.at("split_seed").is_null() ? std::nullopt
                                               : std::optional<std::uint64_t>(j.at("split_seed").get<std::uint64_t>());
  r.test_ids_digest = j.at("test_ids_digest").get<std::string>();
}

std::string report_csv(const EvaluationReport& r) {
  std::ostringstream head;
  std::ostringstream row;
  head << "patient_id,rsna_score,map,macro_precision,macro_recall";
  row << "ALL," << format_double(r.rsna_score) << ',' << format_double(r.map) << ','
      << format_double(r.macro_precision) << ',' << format_double(r.macro_recall);
  for (std::size_t k = 0; k < kNumOrgans; ++k) {
    head << ",rsna_" << kOrganNames[k];
    row << ',' << format_double(r.organ_rsna[k]);
  }
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    head << ",threshold_" << column_name(c);
    row << ',' << format_double(r.thresholds[c]);
  }
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    head << ",weight_" << kClassNames[k];
    row << ',' << format_double(r.weights[k]);
  }
  head << '\n';
  row << '\n';
  return head.str() + row.str();
}

MeanSd mean_sd(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_sd: empty input");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

double spearman_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman_correlation: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace slicevoco

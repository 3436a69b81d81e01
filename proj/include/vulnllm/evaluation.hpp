#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "vulnllm/common.hpp"
#include "vulnllm/embedding_index.hpp"

namespace vulnllm {

// Per-sample model output. label is empty when generated text could not be
// parsed into either class.
struct PredictionRecord {
  std::string id;
  std::optional<int> label;
  std::optional<double> score;  // probability of the vulnerable class
  std::optional<std::string> generated;
  std::vector<Neighbor> retrieved;
  bool degraded = false;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

inline nlohmann::json to_json(const PredictionRecord& r) {
  nlohmann::json j = {{"id", r.id}};
  j["label"] = r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr);
  if (r.score) j["score"] = *r.score;
  if (r.generated) j["generated"] = *r.generated;
  if (!r.retrieved.empty()) {
    auto& arr = j["retrieved"] = nlohmann::json::array();
    for (const auto& n : r.retrieved) arr.push_back({{"id", n.id}, {"distance", n.distance}});
  }
  if (r.degraded) j["degraded"] = true;
  return j;
}

inline PredictionRecord prediction_from_json(const nlohmann::json& j) {
  PredictionRecord r;
  r.id = j.at("id").get<std::string>();
  if (j.contains("label") && !j["label"].is_null()) r.label = j["label"].get<int>();
  if (j.contains("score")) r.score = j["score"].get<double>();
  if (j.contains("generated")) r.generated = j["generated"].get<std::string>();
  if (j.contains("retrieved"))
    for (const auto& n : j["retrieved"])
      r.retrieved.push_back({n.at("id").get<std::string>(), n.at("distance").get<double>()});
  r.degraded = j.value("degraded", false);
  return r;
}

// Counts with class 1 (vulnerable) as the positive class.
struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels) {
  require(predictions.size() == labels.size(), ErrorKind::kDimensionMismatch,
          "predictions and labels differ in length");
  require(!labels.empty(), ErrorKind::kInvalidArgument, "confusion of an empty set");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i], y = labels[i];
    require((p == 0 || p == 1) && (y == 0 || y == 1), ErrorKind::kInvalidArgument,
            "labels must be 0 or 1");
    if (p == 1) (y == 1 ? cm.tp : cm.fp)++;
    else (y == 0 ? cm.tn : cm.fn)++;
  }
  return cm;
}

inline double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

struct ClassRates {
  double precision = 0, recall = 0, f1 = 0;
  friend bool operator==(const ClassRates&, const ClassRates&) = default;
};

struct Provenance {
  std::string run_id;
  std::string dataset_fingerprint;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct EvalReport {
  static constexpr int kSchemaVersion = 1;

  double accuracy = 0;
  std::array<ClassRates, 2> per_class{};  // index = class label
  double macro_f1 = 0;
  std::optional<double> auc;
  ConfusionMatrix counts;
  std::size_t unparseable = 0;
  // Names of rates whose denominator was zero (reported as 0), plus
  // "unparseable-excluded" when records were dropped from the rates.
  std::vector<std::string> flags;
  Provenance provenance;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline EvalReport metrics(const ConfusionMatrix& cm) {
  require(cm.total() > 0, ErrorKind::kInvalidArgument, "metrics of an empty confusion matrix");
  EvalReport r;
  r.counts = cm;
  auto ratio = [&](std::size_t num, std::size_t den, const char* flag) {
    if (den == 0) {
      r.flags.emplace_back(flag);
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
  // Class 0 treats "safe" as the positive outcome: its true positives are tn.
  r.per_class[0].precision = ratio(cm.tn, cm.tn + cm.fn, "precision_0");
  r.per_class[0].recall = ratio(cm.tn, cm.tn + cm.fp, "recall_0");
  r.per_class[1].precision = ratio(cm.tp, cm.tp + cm.fp, "precision_1");
  r.per_class[1].recall = ratio(cm.tp, cm.tp + cm.fn, "recall_1");
  for (auto& c : r.per_class) c.f1 = f1_score(c.precision, c.recall);
  r.macro_f1 = (r.per_class[0].f1 + r.per_class[1].f1) / 2.0;
  return r;
}

// ---------------------------------------------------------------------------
// ROC / AUC

struct RocPoint {
  double fpr = 0, tpr = 0;
  double threshold = 0;  // predict positive when score >= threshold
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocCurve {
  std::vector<RocPoint> points;
};

// Sweeps every distinct score from high to low; tied scores share a point.
// The first point is (0,0) at threshold +inf.
inline RocCurve roc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorKind::kDimensionMismatch,
          "scores and labels differ in length");
  std::size_t pos = 0, neg = 0;
  for (int y : labels) (y == 1 ? pos : neg)++;
  require(pos > 0 && neg > 0, ErrorKind::kInsufficientData, "roc needs both classes present");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      (labels[order[i]] == 1 ? tp : fp)++;
      ++i;
    }
    curve.points.push_back(
        {static_cast<double>(fp) / static_cast<double>(neg),
         static_cast<double>(tp) / static_cast<double>(pos), t});
  }
  return curve;
}

// Trapezoidal area under the curve.
inline double auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return area;
}

// ---------------------------------------------------------------------------
// Assembling reports from prediction records

enum class UnparseablePolicy { kCountAsError, kFallbackToSafe };

inline EvalReport evaluate_predictions(std::span<const PredictionRecord> records,
                                       const std::unordered_map<std::string, int>& truth,
                                       UnparseablePolicy policy = UnparseablePolicy::kCountAsError,
                                       Provenance provenance = {}) {
  require(!records.empty(), ErrorKind::kInvalidArgument, "no prediction records");
  std::vector<int> preds, labels, score_labels;
  std::vector<double> scores;
  std::size_t unparseable = 0;
  bool all_scored = true;
  for (const auto& r : records) {
    auto it = truth.find(r.id);
    require(it != truth.end(), ErrorKind::kFormat, "no ground-truth label for " + r.id);
    if (r.score) {
      scores.push_back(*r.score);
      score_labels.push_back(it->second);
    } else {
      all_scored = false;
    }
    if (!r.label) {
      ++unparseable;
      if (policy == UnparseablePolicy::kCountAsError) continue;
      preds.push_back(0);
    } else {
      preds.push_back(*r.label);
    }
    labels.push_back(it->second);
  }
  require(!preds.empty(), ErrorKind::kInsufficientData, "every record was unparseable");
  EvalReport report = metrics(confusion(preds, labels));
  report.unparseable = unparseable;
  if (unparseable > 0 && policy == UnparseablePolicy::kCountAsError)
    report.flags.emplace_back("unparseable-excluded");
  if (all_scored) {
    const bool both = std::count(score_labels.begin(), score_labels.end(), 1) > 0 &&
                      std::count(score_labels.begin(), score_labels.end(), 0) > 0;
    if (both) report.auc = auc(roc(scores, score_labels));
  }
  report.provenance = std::move(provenance);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["schema_version"] = EvalReport::kSchemaVersion;
  j["accuracy"] = r.accuracy;
  for (int c = 0; c < 2; ++c) {
    const auto key = std::to_string(c);
    j["precision"][key] = r.per_class[c].precision;
    j["recall"][key] = r.per_class[c].recall;
    j["f1"][key] = r.per_class[c].f1;
  }
  j["macro_f1"] = r.macro_f1;
  j["auc"] = r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr);
  j["counts"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}};
  j["unparseable"] = r.unparseable;
  j["flags"] = r.flags;
  j["provenance"] = {{"run_id", r.provenance.run_id},
                     {"dataset_fingerprint", r.provenance.dataset_fingerprint}};
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  require(j.value("schema_version", 0) == EvalReport::kSchemaVersion, ErrorKind::kFormat,
          "unsupported report schema version");
  EvalReport r;
  r.accuracy = j.at("accuracy").get<double>();
  for (int c = 0; c < 2; ++c) {
    const auto key = std::to_string(c);
    r.per_class[c].precision = j.at("precision").at(key).get<double>();
    r.per_class[c].recall = j.at("recall").at(key).get<double>();
    r.per_class[c].f1 = j.at("f1").at(key).get<double>();
  }
  r.macro_f1 = j.at("macro_f1").get<double>();
  if (!j.at("auc").is_null()) r.auc = j["auc"].get<double>();
  const auto& c = j.at("counts");
  r.counts = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(),
              c.at("tn").get<std::size_t>(), c.at("fn").get<std::size_t>()};
  r.unparseable = j.at("unparseable").get<std::size_t>();
  r.flags = j.at("flags").get<std::vector<std::string>>();
  r.provenance.run_id = j.at("provenance").at("run_id").get<std::string>();
  r.provenance.dataset_fingerprint = j.at("provenance").at("dataset_fingerprint").get<std::string>();
  return r;
}

// Row layout mirrors the comparison table: accuracy, precision/recall/F1 per
// class, then the macro average.
struct TableRow {
  std::string model;
  std::string technique;
  std::string data;
  EvalReport report;
};

inline std::string format_fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, value);
  return buf;
}

inline std::string comparison_table(std::span<const TableRow> rows, char delim = ',') {
  std::string out = "Model,Technique,Data,Accuracy,Precision_0,Precision_1,Recall_0,Recall_1,"
                    "F1_0,F1_1,F1_Avg,AUC";
  if (delim != ',') std::replace(out.begin(), out.end(), ',', delim);
  out += '\n';
  for (const auto& row : rows) {
    const auto& r = row.report;
    const std::vector<std::string> cells = {
        row.model,
        row.technique,
        row.data,
        format_fixed(r.accuracy, 3),
        format_fixed(r.per_class[0].precision, 2),
        format_fixed(r.per_class[1].precision, 2),
        format_fixed(r.per_class[0].recall, 2),
        format_fixed(r.per_class[1].recall, 2),
        format_fixed(r.per_class[0].f1, 3),
        format_fixed(r.per_class[1].f1, 3),
        format_fixed(r.macro_f1, 3),
        r.auc ? format_fixed(*r.auc, 3) : std::string()};
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += delim;
      out += cells[i];
    }
    out += '\n';
  }
  return out;
}

}  // namespace vulnllm

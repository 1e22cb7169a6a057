#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kplora/answer_grammar.hpp"
#include "kplora/dataset_builder.hpp"
#include "kplora/error.hpp"
#include "kplora/hungarian.hpp"
#include "kplora/types.hpp"

namespace kplora {

// Twelve keypoints in normalized image coordinates (x / width, y / height).
using KeypointSet = KeypointArray;

struct PckConfig {
  double alpha = 0.05;
  // Distance normalizer L. Coordinates are already normalized per axis, so
  // the default of 1 corresponds to "image width".
  double normalizer = 1.0;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("PCK alpha must be positive");
    if (!(normalizer > 0.0)) throw ConfigError("PCK normalizer must be positive");
  }
};

inline double point_distance(const Keypoint& a, const Keypoint& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

// Mean Euclidean distance over corresponding points.
inline double mpjpe(std::span<const Keypoint> pred, std::span<const Keypoint> gt) {
  require(pred.size() == gt.size(), [&] { return "mpjpe: keypoint count mismatch (" +
                                        std::to_string(pred.size()) + " vs " +
                                        std::to_string(gt.size()) + ")"; });
  require(!pred.empty(), "mpjpe: empty keypoint set");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += point_distance(pred[i], gt[i]);
  return sum / static_cast<double>(pred.size());
}

// Fraction of points whose distance divided by L is strictly below alpha.
inline double pck(std::span<const Keypoint> pred, std::span<const Keypoint> gt,
                  const PckConfig& cfg) {
  require(pred.size() == gt.size(), [&] { return "pck: keypoint count mismatch (" +
                                        std::to_string(pred.size()) + " vs " +
                                        std::to_string(gt.size()) + ")"; });
  require(!pred.empty(), "pck: empty keypoint set");
  cfg.validate();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (point_distance(pred[i], gt[i]) / cfg.normalizer < cfg.alpha) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// Pixel coordinates to normalized coordinates, clamped to [0, 1].
inline KeypointSet normalize_keypoints(const KeypointArray& pixels, int width, int height) {
  require(width > 0 && height > 0, "normalize_keypoints: image size must be positive");
  KeypointSet out;
  for (std::size_t i = 0; i < kKeypointCount; ++i) {
    out[i].x = std::clamp(pixels[i].x / width, 0.0, 1.0);
    out[i].y = std::clamp(pixels[i].y / height, 0.0, 1.0);
    if (std::isnan(out[i].x)) out[i].x = 0.0;
    if (std::isnan(out[i].y)) out[i].y = 0.0;
  }
  return out;
}

struct LabeledKeypoints {
  std::string class_name;
  KeypointSet points;
};

// Minimum-total-MPJPE one-to-one matching. Class labels do not constrain the
// assignment.
inline Assignment match_instances(const std::vector<LabeledKeypoints>& preds,
                                  const std::vector<LabeledKeypoints>& gts) {
  std::vector<std::vector<double>> cost(preds.size(), std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t j = 0; j < gts.size(); ++j) cost[i][j] = mpjpe(preds[i].points, gts[j].points);
  if (preds.empty()) {
    Assignment a;
    for (std::size_t j = 0; j < gts.size(); ++j) a.unmatched_cols.push_back(j);
    return a;
  }
  return hungarian(cost);
}

enum class UnmatchedPolicy {
  penalize,  // every point of an unmatched ground-truth instance is at distance sqrt(2)
  skip,      // unmatched ground-truth instances do not contribute
};

inline constexpr double kUnmatchedDistance = std::numbers::sqrt2;

// Order-independent sums; merging two accumulators is associative.
struct MetricAccumulator {
  std::vector<double> alphas;
  double normalizer = 1.0;
  double distance_sum = 0.0;
  std::size_t points = 0;
  std::vector<std::size_t> hits;

  MetricAccumulator() = default;
  MetricAccumulator(std::vector<double> a, double l)
      : alphas(std::move(a)), normalizer(l), hits(alphas.size(), 0) {}

  void add(double distance) {
    distance_sum += distance;
    ++points;
    for (std::size_t i = 0; i < alphas.size(); ++i)
      if (distance / normalizer < alphas[i]) ++hits[i];
  }

  void merge(const MetricAccumulator& other) {
    distance_sum += other.distance_sum;
    points += other.points;
    for (std::size_t i = 0; i < hits.size(); ++i) hits[i] += other.hits[i];
  }

  double mpjpe() const {
    return points ? distance_sum / static_cast<double>(points)
                  : std::numeric_limits<double>::quiet_NaN();
  }
  double pck(std::size_t i) const {
    return points ? static_cast<double>(hits[i]) / static_cast<double>(points)
                  : std::numeric_limits<double>::quiet_NaN();
  }
};

struct ClassMetrics {
  double mpjpe = 0.0;
  std::vector<double> pck;
  std::size_t matched = 0;
  std::size_t penalized = 0;
};

struct EvalReport {
  std::vector<double> alphas;
  double normalizer = 1.0;
  double mpjpe = 0.0;
  std::vector<double> pck;  // parallel to alphas
  std::map<std::string, ClassMetrics> per_class;
  std::size_t images = 0;
  std::size_t points = 0;
  std::size_t matched = 0;
  std::size_t unmatched_ground_truth = 0;
  std::size_t unmatched_predictions = 0;
  std::size_t parse_failures = 0;

  double pck_at(double alpha) const {
    for (std::size_t i = 0; i < alphas.size(); ++i)
      if (std::abs(alphas[i] - alpha) < 1e-12) return pck[i];
    throw ContractError("report has no PCK column for alpha " + std::to_string(alpha));
  }
  double pck_05() const { return pck_at(0.05); }
  double pck_10() const { return pck_at(0.10); }
};

struct PredictionRecord {
  std::string sample_id;
  std::string output;
};

struct EvalOptions {
  std::vector<double> pck_alphas = {0.05, 0.10};
  double normalizer = 1.0;
  ParsePolicy parse{ParseMode::recover};
  UnmatchedPolicy unmatched = UnmatchedPolicy::penalize;
};

inline std::vector<PredictionRecord> parse_prediction_jsonl(const std::string& text) {
  std::vector<PredictionRecord> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    if (!line.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed prediction record: ") + e.what(),
                          pos + (e.byte == 0 ? 0 : e.byte - 1));
      }
      const std::string where = "prediction at byte " + std::to_string(pos);
      out.push_back({detail::string_member(j, "sample_id", where),
                     detail::string_member(j, "output", where)});
    }
    pos = end + 1;
  }
  return out;
}

inline std::vector<PredictionRecord> load_predictions(const std::string& path) {
  return parse_prediction_jsonl(read_text_file(path));
}

inline void save_predictions(const std::vector<PredictionRecord>& preds, const std::string& path) {
  std::string body;
  for (const auto& p : preds) {
    nlohmann::ordered_json j;
    j["sample_id"] = p.sample_id;
    j["output"] = p.output;
    body += j.dump() + "\n";
  }
  write_text_file(path, body);
}

inline EvalReport evaluate_dataset(const std::vector<PredictionRecord>& predictions,
                                   const Dataset& ground_truth, const EvalOptions& opts = {}) {
  for (double a : opts.pck_alphas) PckConfig{a, opts.normalizer}.validate();

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ground_truth.samples.size(); ++i)
    index.emplace(ground_truth.samples[i].image_id, i);
  std::vector<const PredictionRecord*> by_sample(ground_truth.samples.size(), nullptr);
  for (const auto& p : predictions) {
    const auto it = index.find(p.sample_id);
    if (it == index.end())
      throw SchemaError("prediction references unknown sample_id '" + p.sample_id + "'");
    if (by_sample[it->second])
      throw SchemaError("duplicate prediction for sample_id '" + p.sample_id + "'");
    by_sample[it->second] = &p;
  }

  EvalReport report;
  report.alphas = opts.pck_alphas;
  report.normalizer = opts.normalizer;
  MetricAccumulator total(opts.pck_alphas, opts.normalizer);
  std::map<std::string, MetricAccumulator> per_class_acc;
  auto class_acc = [&](const std::string& name) -> MetricAccumulator& {
    auto it = per_class_acc.find(name);
    if (it == per_class_acc.end())
      it = per_class_acc.emplace(name, MetricAccumulator(opts.pck_alphas, opts.normalizer)).first;
    return it->second;
  };

  for (std::size_t s = 0; s < ground_truth.samples.size(); ++s) {
    const auto& sample = ground_truth.samples[s];
    ++report.images;

    std::vector<LabeledKeypoints> gts;
    for (const auto& t : sample.instances)
      gts.push_back({t.class_name, normalize_keypoints(t.keypoints, sample.width, sample.height)});
    std::vector<LabeledKeypoints> preds;
    if (by_sample[s]) {
      const ParseResult parsed = parse_prediction(by_sample[s]->output, opts.parse);
      if (!parsed.ok()) ++report.parse_failures;
      for (const auto& t : parsed.instances)
        preds.push_back({t.class_name, normalize_keypoints(t.keypoints, sample.width, sample.height)});
    }

    const Assignment a = match_instances(preds, gts);
    for (const auto& [pi, gi] : a.pairs) {
      auto& acc = class_acc(gts[gi].class_name);
      for (std::size_t k = 0; k < kKeypointCount; ++k) {
        const double d = point_distance(preds[pi].points[k], gts[gi].points[k]);
        total.add(d);
        acc.add(d);
      }
      ++report.per_class[gts[gi].class_name].matched;
      ++report.matched;
    }
    report.unmatched_predictions += a.unmatched_rows.size();
    report.unmatched_ground_truth += a.unmatched_cols.size();
    if (opts.unmatched == UnmatchedPolicy::penalize) {
      for (std::size_t gi : a.unmatched_cols) {
        auto& acc = class_acc(gts[gi].class_name);
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
          total.add(kUnmatchedDistance);
          acc.add(kUnmatchedDistance);
        }
        ++report.per_class[gts[gi].class_name].penalized;
      }
    }
  }

  report.points = total.points;
  report.mpjpe = total.mpjpe();
  for (std::size_t i = 0; i < opts.pck_alphas.size(); ++i) report.pck.push_back(total.pck(i));
  for (auto& [name, acc] : per_class_acc) {
    auto& row = report.per_class[name];
    row.mpjpe = acc.mpjpe();
    row.pck.clear();
    for (std::size_t i = 0; i < opts.pck_alphas.size(); ++i) row.pck.push_back(acc.pck(i));
  }
  return report;
}

namespace report_detail {

inline nlohmann::ordered_json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline std::string alpha_label(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", a);
  return std::string("PCK@") + buf;
}

inline std::string fixed4(double v) {
  if (!std::isfinite(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string render_table(const std::vector<std::string>& header,
                                const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) out += " | ";
      out += cells[c];
      if (c + 1 < cells.size()) out.append(width[c] - cells[c].size(), ' ');
    }
    return out + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 3 : 0);
  out += std::string(total, '-') + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

}  // namespace report_detail

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  using report_detail::alpha_label;
  using report_detail::number_or_null;
  nlohmann::ordered_json j;
  j["mpjpe"] = number_or_null(r.mpjpe);
  for (std::size_t i = 0; i < r.alphas.size(); ++i) j[alpha_label(r.alphas[i])] = number_or_null(r.pck[i]);
  j["pck_alphas"] = r.alphas;
  j["normalizer"] = r.normalizer;
  j["images"] = r.images;
  j["points"] = r.points;
  j["matched"] = r.matched;
  j["unmatched_ground_truth"] = r.unmatched_ground_truth;
  j["unmatched_predictions"] = r.unmatched_predictions;
  j["parse_failures"] = r.parse_failures;
  j["per_class"] = nlohmann::ordered_json::object();
  for (const auto& [name, row] : r.per_class) {
    nlohmann::ordered_json c;
    c["mpjpe"] = number_or_null(row.mpjpe);
    for (std::size_t i = 0; i < r.alphas.size() && i < row.pck.size(); ++i)
      c[alpha_label(r.alphas[i])] = number_or_null(row.pck[i]);
    c["matched"] = row.matched;
    c["penalized"] = row.penalized;
    j["per_class"][name] = std::move(c);
  }
  return j;
}

struct ModelRow {
  std::string model;
  EvalReport report;
  std::string trainable_params;  // "-" when nothing was trained
};

// Columns: Model | MPJPE | PCK@... | Trainable Params
inline std::string format_model_table(const std::vector<ModelRow>& rows) {
  std::vector<std::string> header{"Model", "MPJPE"};
  const auto& alphas = rows.empty() ? std::vector<double>{0.05, 0.10} : rows.front().report.alphas;
  for (double a : alphas) header.push_back(report_detail::alpha_label(a));
  header.push_back("Trainable Params");
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    std::vector<std::string> c{r.model, report_detail::fixed4(r.report.mpjpe)};
    for (double v : r.report.pck) c.push_back(report_detail::fixed4(v));
    c.push_back(r.trainable_params);
    cells.push_back(std::move(c));
  }
  return report_detail::render_table(header, cells);
}

struct RankRow {
  int rank = 0;
  EvalReport report;
};

// Columns: LoRA Rank | MPJPE | PCK@... ; PCK rendered as percentages.
inline std::string format_rank_table(const std::vector<RankRow>& rows) {
  std::vector<std::string> header{"LoRA Rank", "MPJPE"};
  const auto& alphas = rows.empty() ? std::vector<double>{0.05, 0.10} : rows.front().report.alphas;
  for (double a : alphas) header.push_back(report_detail::alpha_label(a));
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    std::vector<std::string> c{"Rank = " + std::to_string(r.rank), report_detail::fixed4(r.report.mpjpe)};
    for (double v : r.report.pck) {
      char buf[32];
      if (std::isfinite(v))
        std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
      else
        std::snprintf(buf, sizeof buf, "n/a");
      c.push_back(buf);
    }
    cells.push_back(std::move(c));
  }
  return report_detail::render_table(header, cells);
}

}  // namespace kplora

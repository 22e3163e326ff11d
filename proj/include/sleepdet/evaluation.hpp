#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sleepdet/network.hpp"
#include "sleepdet/sampler.hpp"
#include "sleepdet/types.hpp"

namespace sleepdet {

/// One-to-one greedy matching between same-class predictions and truths in
/// descending IoU order; pairs below iou_eval are never matched.
struct ScoringMatch {
  std::vector<std::pair<int, int>> pairs;  // (prediction idx, truth idx)
  std::vector<int> unmatched_predictions;
  std::vector<int> unmatched_truths;
};

ScoringMatch match_for_scoring(const std::vector<Detection>& predictions,
                               const std::vector<Event>& truths,
                               double iou_eval);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Empty-vs-empty counts score as perfect; an all-zero precision/recall
/// pair yields F1 = 0.
Prf prf1(int tp, int fp, int fn);

/// Events per hour.
double compute_index(int event_count, double duration_hours);

/// Squared Pearson correlation; empty when undefined (constant input or
/// fewer than 3 points).
std::optional<double> pearson_r2(const std::vector<double>& x,
                                 const std::vector<double>& y);

struct TemporalErrorSample {
  EventClass cls = EventClass::Arousal;
  double d_onset = 0.0;
  double d_offset = 0.0;
  double d_duration = 0.0;  // always d_offset - d_onset
};

std::vector<TemporalErrorSample> temporal_errors(
    const std::vector<Detection>& predictions, const std::vector<Event>& truths,
    const ScoringMatch& match);

using ThresholdSet = std::map<EventClass, double>;

void save_thresholds(const ThresholdSet& thresholds, const std::string& path);
ThresholdSet load_thresholds(const std::string& path);

struct EvalConfig {
  double iou_eval = 0.3;
  double theta_nms = 0.5;
  double theta_min = 0.05;
  double theta_max = 0.95;
  double theta_step = 0.05;
  int workers = 1;
};

/// Raw per-class candidate detections over a whole record: every default
/// window of every 50%-overlapping segment, decoded, with its class
/// probability. Thresholding/NMS are applied downstream.
std::vector<std::vector<Detection>> collect_candidates(
    const Record& conditioned, const ModelConfig& config, const Params& params,
    const WindowGrid& grid);

/// Thresholded, NMS-deduplicated detections for every class, sorted by
/// onset.
std::vector<Detection> predict_record(const Record& conditioned,
                                      const ModelConfig& config,
                                      const Params& params,
                                      const WindowGrid& grid,
                                      const ThresholdSet& thresholds,
                                      double theta_nms);

struct ThresholdCurve {
  EventClass cls = EventClass::Arousal;
  std::vector<double> theta;
  std::vector<double> mean_f1;
};

struct SweepResult {
  ThresholdSet best;
  std::vector<ThresholdCurve> curves;
};

/// Per-class F1(theta) on the given records; the argmax (smallest theta on
/// ties) becomes the class threshold.
SweepResult sweep_threshold(
    const std::vector<std::shared_ptr<const LoadedRecord>>& records,
    const ModelConfig& config, const Params& params, const EvalConfig& eval);

/// Core of the sweep, exposed for oracle tests: candidates[record][class]
/// against truths[record].
SweepResult sweep_from_candidates(
    const std::vector<std::vector<std::vector<Detection>>>& candidates,
    const std::vector<std::vector<Event>>& truths,
    const std::vector<EventClass>& classes, const EvalConfig& eval);

struct ClassScore {
  int tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double true_index = 0.0, pred_index = 0.0;
};

struct RecordScore {
  std::string id;
  double duration_hours = 0.0;
  std::map<EventClass, ClassScore> classes;
  std::vector<TemporalErrorSample> temporal;
};

struct AggregateScore {
  double precision_mean = 0.0, precision_sd = 0.0;
  double recall_mean = 0.0, recall_sd = 0.0;
  double f1_mean = 0.0, f1_sd = 0.0;
  std::optional<double> index_r2;
};

struct ScoreReport {
  std::vector<RecordScore> records;
  std::map<EventClass, AggregateScore> aggregate;
  ThresholdSet thresholds;
  double iou_eval = 0.0;
  int workers = 1;
};

ScoreReport evaluate(
    const std::vector<std::shared_ptr<const LoadedRecord>>& records,
    const ModelConfig& config, const Params& params,
    const ThresholdSet& thresholds, const EvalConfig& eval);

void write_report_json(const ScoreReport& report, const std::string& path);
void write_index_scatter_csv(const ScoreReport& report,
                             const std::string& path);
void write_temporal_errors_csv(const ScoreReport& report,
                               const std::string& path);
void write_curves_csv(const std::vector<ThresholdCurve>& curves,
                      const std::string& path);

}  // namespace sleepdet

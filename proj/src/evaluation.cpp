#include "sleepdet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "sleepdet/signal_io.hpp"

namespace sleepdet {

using nlohmann::json;

ScoringMatch match_for_scoring(const std::vector<Detection>& predictions,
                               const std::vector<Event>& truths,
                               double iou_eval) {
  struct Candidate {
    double overlap;
    int pred;
    int truth;
  };
  std::vector<Candidate> candidates;
  for (int p = 0; p < static_cast<int>(predictions.size()); ++p) {
    for (int t = 0; t < static_cast<int>(truths.size()); ++t) {
      const auto& pred = predictions[static_cast<std::size_t>(p)];
      const auto& truth = truths[static_cast<std::size_t>(t)];
      if (pred.cls != truth.cls) continue;
      const double overlap =
          iou(pred.center, pred.duration, truth.center(), truth.duration);
      if (overlap >= iou_eval) candidates.push_back({overlap, p, t});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) {
                     if (a.overlap != b.overlap) return a.overlap > b.overlap;
                     if (a.pred != b.pred) return a.pred < b.pred;
                     return a.truth < b.truth;
                   });

  ScoringMatch match;
  std::vector<bool> pred_used(predictions.size(), false);
  std::vector<bool> truth_used(truths.size(), false);
  for (const auto& c : candidates) {
    if (pred_used[static_cast<std::size_t>(c.pred)] ||
        truth_used[static_cast<std::size_t>(c.truth)])
      continue;
    pred_used[static_cast<std::size_t>(c.pred)] = true;
    truth_used[static_cast<std::size_t>(c.truth)] = true;
    match.pairs.emplace_back(c.pred, c.truth);
  }
  for (int p = 0; p < static_cast<int>(predictions.size()); ++p)
    if (!pred_used[static_cast<std::size_t>(p)])
      match.unmatched_predictions.push_back(p);
  for (int t = 0; t < static_cast<int>(truths.size()); ++t)
    if (!truth_used[static_cast<std::size_t>(t)])
      match.unmatched_truths.push_back(t);
  return match;
}

Prf prf1(int tp, int fp, int fn) {
  Prf out;
  out.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 1.0;
  out.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 1.0;
  const double denom = out.precision + out.recall;
  out.f1 = denom > 0.0 ? 2.0 * out.precision * out.recall / denom : 0.0;
  return out;
}

double compute_index(int event_count, double duration_hours) {
  if (!(duration_hours > 0.0))
    throw std::invalid_argument("compute_index: non-positive duration");
  return static_cast<double>(event_count) / duration_hours;
}

std::optional<double> pearson_r2(const std::vector<double>& x,
                                 const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) return std::nullopt;
  const auto n = static_cast<double>(x.size());
  const double mean_x = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double mean_y = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mean_x;
    const double dy = y[i] - mean_y;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  const double r = sxy / std::sqrt(sxx * syy);
  return r * r;
}

std::vector<TemporalErrorSample> temporal_errors(
    const std::vector<Detection>& predictions, const std::vector<Event>& truths,
    const ScoringMatch& match) {
  std::vector<TemporalErrorSample> samples;
  samples.reserve(match.pairs.size());
  for (const auto& [p, t] : match.pairs) {
    const auto& pred = predictions[static_cast<std::size_t>(p)];
    const auto& truth = truths[static_cast<std::size_t>(t)];
    TemporalErrorSample sample;
    sample.cls = truth.cls;
    sample.d_onset = pred.onset() - truth.onset;
    sample.d_offset = pred.offset() - truth.offset();
    // defined as the difference of the two shifts so the identity is exact
    sample.d_duration = sample.d_offset - sample.d_onset;
    samples.push_back(sample);
  }
  return samples;
}

void save_thresholds(const ThresholdSet& thresholds, const std::string& path) {
  json j;
  for (const auto& [cls, theta] : thresholds) j[to_string(cls)] = theta;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  out << j.dump(2) << "\n";
}

ThresholdSet load_thresholds(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open file");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
  ThresholdSet thresholds;
  for (const auto& [key, value] : j.items())
    thresholds[event_class_from_string(key)] = value.get<double>();
  return thresholds;
}

std::vector<std::vector<Detection>> collect_candidates(
    const Record& conditioned, const ModelConfig& config, const Params& params,
    const WindowGrid& grid) {
  const double segment_seconds = config.segment_seconds();
  if (conditioned.duration + 1e-9 < segment_seconds)
    throw std::invalid_argument(
        "collect_candidates: record shorter than one segment");

  std::vector<double> starts;
  const double hop = 0.5 * segment_seconds;
  for (double s = 0.0; s + segment_seconds <= conditioned.duration + 1e-9;
       s += hop)
    starts.push_back(s);
  const double last = conditioned.duration - segment_seconds;
  if (starts.empty() || std::abs(starts.back() - last) > 1e-9)
    starts.push_back(last);

  std::vector<std::vector<Detection>> per_class(config.event_classes.size());
  for (double start : starts) {
    const auto start_sample =
        static_cast<Index>(std::llround(start * conditioned.fs));
    const Matrix segment =
        conditioned.samples
            .middleCols(start_sample, config.segment_samples)
            .cast<double>();
    const NetworkOutput output =
        model_forward(segment, config, params, grid, false);
    const Matrix probs = softmax_rows(output.logits);
    const auto decoded = decode_predictions(output.loc, grid);
    for (std::size_t k = 0; k < config.event_classes.size(); ++k) {
      for (int w = grid.class_begin[k]; w < grid.class_end[k]; ++w) {
        Detection det;
        det.cls = config.event_classes[k];
        det.probability = probs(w, static_cast<Index>(k));
        det.center = start + decoded[static_cast<std::size_t>(w)].first;
        det.duration = decoded[static_cast<std::size_t>(w)].second;
        per_class[k].push_back(det);
      }
    }
  }
  return per_class;
}

std::vector<Detection> predict_record(const Record& conditioned,
                                      const ModelConfig& config,
                                      const Params& params,
                                      const WindowGrid& grid,
                                      const ThresholdSet& thresholds,
                                      double theta_nms) {
  const auto candidates = collect_candidates(conditioned, config, params, grid);
  std::vector<Detection> detections;
  for (std::size_t k = 0; k < config.event_classes.size(); ++k) {
    const EventClass cls = config.event_classes[k];
    const auto it = thresholds.find(cls);
    const double theta = it != thresholds.end() ? it->second : 0.5;
    const auto kept = nms(candidates[k], theta, theta_nms);
    detections.insert(detections.end(), kept.begin(), kept.end());
  }
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.onset() < b.onset();
                   });
  return detections;
}

namespace {

std::vector<double> theta_grid(const EvalConfig& eval) {
  std::vector<double> grid;
  for (double t = eval.theta_min; t <= eval.theta_max + 1e-9;
       t += eval.theta_step)
    grid.push_back(t);
  return grid;
}

std::vector<Event> truths_of_class(const std::vector<Event>& events,
                                   EventClass cls) {
  std::vector<Event> out;
  for (const Event& e : events)
    if (e.cls == cls) out.push_back(e);
  return out;
}

/// Runs fn(i) for i in [0, n) over `workers` threads; results land in
/// index order so the reduction is deterministic.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> futures;
  const int used = std::min(workers, n);
  for (int w = 0; w < used; ++w) {
    futures.push_back(std::async(std::launch::async, [&, w]() {
      for (int i = w; i < n; i += used) fn(i);
    }));
  }
  for (auto& f : futures) f.get();
}

}  // namespace

SweepResult sweep_from_candidates(
    const std::vector<std::vector<std::vector<Detection>>>& candidates,
    const std::vector<std::vector<Event>>& truths,
    const std::vector<EventClass>& classes, const EvalConfig& eval) {
  if (candidates.empty())
    throw std::invalid_argument("sweep: empty eval split");
  const auto grid_thetas = theta_grid(eval);
  const auto num_records = candidates.size();

  SweepResult result;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const EventClass cls = classes[k];
    ThresholdCurve curve;
    curve.cls = cls;
    double best_f1 = -1.0;
    double best_theta = grid_thetas.front();
    for (double theta : grid_thetas) {
      double f1_sum = 0.0;
      for (std::size_t r = 0; r < num_records; ++r) {
        const auto kept = nms(candidates[r][k], theta, eval.theta_nms);
        const auto class_truths = truths_of_class(truths[r], cls);
        const auto match = match_for_scoring(kept, class_truths, eval.iou_eval);
        const auto score =
            prf1(static_cast<int>(match.pairs.size()),
                 static_cast<int>(match.unmatched_predictions.size()),
                 static_cast<int>(match.unmatched_truths.size()));
        f1_sum += score.f1;
      }
      const double mean_f1 = f1_sum / static_cast<double>(num_records);
      curve.theta.push_back(theta);
      curve.mean_f1.push_back(mean_f1);
      if (mean_f1 > best_f1) {  // strict: ties keep the smaller theta
        best_f1 = mean_f1;
        best_theta = theta;
      }
    }
    result.best[cls] = best_theta;
    result.curves.push_back(std::move(curve));
  }
  return result;
}

SweepResult sweep_threshold(
    const std::vector<std::shared_ptr<const LoadedRecord>>& records,
    const ModelConfig& config, const Params& params, const EvalConfig& eval) {
  if (records.empty())
    throw std::invalid_argument("sweep_threshold: empty eval split");
  const WindowGrid grid = make_grid(config);

  // candidate collection dominates; do it once per record
  std::vector<std::vector<std::vector<Detection>>> candidates(records.size());
  std::vector<std::vector<Event>> truths(records.size());
  parallel_for(static_cast<int>(records.size()), eval.workers, [&](int i) {
    candidates[static_cast<std::size_t>(i)] = collect_candidates(
        records[static_cast<std::size_t>(i)]->record, config, params, grid);
    truths[static_cast<std::size_t>(i)] =
        records[static_cast<std::size_t>(i)]->events;
  });
  return sweep_from_candidates(candidates, truths, config.event_classes, eval);
}

ScoreReport evaluate(
    const std::vector<std::shared_ptr<const LoadedRecord>>& records,
    const ModelConfig& config, const Params& params,
    const ThresholdSet& thresholds, const EvalConfig& eval) {
  const WindowGrid grid = make_grid(config);
  ScoreReport report;
  report.thresholds = thresholds;
  report.iou_eval = eval.iou_eval;
  report.workers = eval.workers;
  report.records.resize(records.size());

  parallel_for(static_cast<int>(records.size()), eval.workers, [&](int i) {
    const auto& loaded = *records[static_cast<std::size_t>(i)];
    RecordScore score;
    score.id = loaded.record.id;
    score.duration_hours = loaded.record.duration / 3600.0;
    const auto detections = predict_record(loaded.record, config, params,
                                           grid, thresholds, eval.theta_nms);
    for (EventClass cls : config.event_classes) {
      std::vector<Detection> preds;
      for (const auto& det : detections)
        if (det.cls == cls) preds.push_back(det);
      const auto truths = truths_of_class(loaded.events, cls);
      const auto match = match_for_scoring(preds, truths, eval.iou_eval);

      ClassScore cs;
      cs.tp = static_cast<int>(match.pairs.size());
      cs.fp = static_cast<int>(match.unmatched_predictions.size());
      cs.fn = static_cast<int>(match.unmatched_truths.size());
      const Prf prf = prf1(cs.tp, cs.fp, cs.fn);
      cs.precision = prf.precision;
      cs.recall = prf.recall;
      cs.f1 = prf.f1;
      cs.true_index =
          compute_index(static_cast<int>(truths.size()), score.duration_hours);
      cs.pred_index =
          compute_index(static_cast<int>(preds.size()), score.duration_hours);
      score.classes[cls] = cs;

      const auto errors = temporal_errors(preds, truths, match);
      score.temporal.insert(score.temporal.end(), errors.begin(),
                            errors.end());
    }
    report.records[static_cast<std::size_t>(i)] = std::move(score);
  });

  for (EventClass cls : config.event_classes) {
    AggregateScore agg;
    std::vector<double> precision, recall, f1, true_idx, pred_idx;
    for (const auto& record : report.records) {
      const auto& cs = record.classes.at(cls);
      precision.push_back(cs.precision);
      recall.push_back(cs.recall);
      f1.push_back(cs.f1);
      true_idx.push_back(cs.true_index);
      pred_idx.push_back(cs.pred_index);
    }
    auto mean_sd = [](const std::vector<double>& xs) {
      const auto n = static_cast<double>(xs.size());
      const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
      double ss = 0.0;
      for (double x : xs) ss += (x - mean) * (x - mean);
      const double sd = xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      return std::make_pair(mean, sd);
    };
    std::tie(agg.precision_mean, agg.precision_sd) = mean_sd(precision);
    std::tie(agg.recall_mean, agg.recall_sd) = mean_sd(recall);
    std::tie(agg.f1_mean, agg.f1_sd) = mean_sd(f1);
    agg.index_r2 = pearson_r2(true_idx, pred_idx);
    report.aggregate[cls] = agg;
  }
  return report;
}

// ---------------------------------------------------------------------------
// report serialization

namespace {

json class_score_to_json(const ClassScore& cs) {
  return {{"tp", cs.tp},
          {"fp", cs.fp},
          {"fn", cs.fn},
          {"precision", cs.precision},
          {"recall", cs.recall},
          {"f1", cs.f1},
          {"true_index", cs.true_index},
          {"pred_index", cs.pred_index}};
}

}  // namespace

void write_report_json(const ScoreReport& report, const std::string& path) {
  json j;
  j["iou_eval"] = report.iou_eval;
  j["workers"] = report.workers;
  j["thresholds"] = json::object();
  for (const auto& [cls, theta] : report.thresholds)
    j["thresholds"][to_string(cls)] = theta;
  j["records"] = json::array();
  for (const auto& record : report.records) {
    json jr;
    jr["id"] = record.id;
    jr["duration_hours"] = record.duration_hours;
    jr["classes"] = json::object();
    for (const auto& [cls, cs] : record.classes)
      jr["classes"][to_string(cls)] = class_score_to_json(cs);
    j["records"].push_back(jr);
  }
  j["aggregate"] = json::object();
  for (const auto& [cls, agg] : report.aggregate) {
    json ja = {{"precision_mean", agg.precision_mean},
               {"precision_sd", agg.precision_sd},
               {"recall_mean", agg.recall_mean},
               {"recall_sd", agg.recall_sd},
               {"f1_mean", agg.f1_mean},
               {"f1_sd", agg.f1_sd}};
    if (agg.index_r2) {
      ja["index_r2"] = *agg.index_r2;
    } else {
      ja["index_r2"] = nullptr;
    }
    j["aggregate"][to_string(cls)] = ja;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  out << j.dump(2) << "\n";
}

void write_index_scatter_csv(const ScoreReport& report,
                             const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  out << "record,class,true_index,pred_index\n";
  for (const auto& record : report.records) {
    for (const auto& [cls, cs] : record.classes) {
      out << record.id << "," << to_string(cls) << "," << cs.true_index << ","
          << cs.pred_index << "\n";
    }
  }
}

void write_temporal_errors_csv(const ScoreReport& report,
                               const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  out << "record,class,d_onset,d_offset,d_duration\n";
  for (const auto& record : report.records) {
    for (const auto& sample : record.temporal) {
      out << record.id << "," << to_string(sample.cls) << "," << sample.d_onset
          << "," << sample.d_offset << "," << sample.d_duration << "\n";
    }
  }
}

void write_curves_csv(const std::vector<ThresholdCurve>& curves,
                      const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  out << "class,theta,mean_f1\n";
  for (const auto& curve : curves) {
    for (std::size_t i = 0; i < curve.theta.size(); ++i) {
      out << to_string(curve.cls) << "," << curve.theta[i] << ","
          << curve.mean_f1[i] << "\n";
    }
  }
}

}  // namespace sleepdet

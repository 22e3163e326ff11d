#pragma once

#include <utility>
#include <vector>

#include "sleepdet/types.hpp"

namespace sleepdet {

/// A fixed anchor interval that predictions are made relative to.
struct DefaultWindow {
  EventClass cls = EventClass::Arousal;
  double center = 0.0;    // seconds, segment-relative
  double duration = 0.0;  // seconds
};

/// Per-class window geometry: duration of the anchors and the tiling stride.
struct WindowSpec {
  EventClass cls = EventClass::Arousal;
  double duration = 0.0;
  double stride = 0.0;
};

/// All default windows of a segment, class-major and time-ordered within
/// each class. class_begin/class_end give each class's contiguous index
/// range into `windows`.
struct WindowGrid {
  std::vector<DefaultWindow> windows;
  std::vector<EventClass> classes;  // class order; index = one-hot position
  std::vector<int> class_begin;
  std::vector<int> class_end;
  double segment_seconds = 0.0;

  int size() const { return static_cast<int>(windows.size()); }
  int class_index(EventClass cls) const;
};

WindowGrid generate_default_windows(double segment_seconds,
                                    const std::vector<WindowSpec>& specs);

/// Intersection-over-union of two intervals given as (center, duration).
double iou(double center_a, double duration_a, double center_b,
           double duration_b);

inline double iou(const Event& a, const Event& b) {
  return iou(a.center(), a.duration, b.center(), b.duration);
}

/// Ground-truth assignment for one segment: matched (window, event) pairs,
/// one-hot class targets (N_m x K, negative class last) and encoded
/// localization targets (N_m x 2).
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (window index, event index)
  Matrix one_hot;                          // N_m x K
  Matrix targets;                          // N_m x 2
  std::vector<int> unmatched;              // window indices with no event

  int num_positive() const { return static_cast<int>(pairs.size()); }
};

/// Matches true events against the grid. Every same-class pair with
/// IoU >= theta_match is positive, and each event's best window is forced
/// positive regardless of the threshold. A window takes at most one event
/// (the one with the highest IoU; earlier event on ties).
MatchResult match_events(const std::vector<Event>& events,
                         const WindowGrid& grid, double theta_match);

/// (center offset / window duration, log duration ratio) for one pair.
std::pair<double, double> encode_target(const Event& event,
                                        const DefaultWindow& window);

/// Encoded localization targets for matched pairs, one row per pair.
Matrix encode_targets(
    const std::vector<std::pair<Event, DefaultWindow>>& pairs);

/// Inverse of the target encoding, applied to every window's regression
/// output. Durations are clamped to [0.1 s, segment length].
std::vector<std::pair<double, double>> decode_predictions(
    const Matrix& loc, const WindowGrid& grid);

/// Greedy non-maximum suppression for a single class: candidates with
/// probability <= theta_score are dropped, then the most probable remaining
/// candidate suppresses all others with IoU >= theta_nms. Output is sorted
/// by center.
std::vector<Detection> nms(const std::vector<Detection>& candidates,
                           double theta_score, double theta_nms);

}  // namespace sleepdet

#include "sleepdet/event_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace sleepdet {

int WindowGrid::class_index(EventClass cls) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] == cls) return static_cast<int>(i);
  }
  return -1;
}

WindowGrid generate_default_windows(double segment_seconds,
                                    const std::vector<WindowSpec>& specs) {
  if (specs.empty())
    throw std::invalid_argument("generate_default_windows: empty class config");
  WindowGrid grid;
  grid.segment_seconds = segment_seconds;
  for (const auto& spec : specs) {
    if (!(spec.duration > 0.0) || spec.duration > segment_seconds + 1e-12)
      throw std::invalid_argument(
          "generate_default_windows: window duration must lie in (0, T]");
    if (!(spec.stride > 0.0))
      throw std::invalid_argument(
          "generate_default_windows: stride must be positive");
    grid.classes.push_back(spec.cls);
    grid.class_begin.push_back(grid.size());
    // Tolerance keeps exact tilings like (60 - 15) / 7.5 stable.
    const auto count = static_cast<int>(std::floor(
                           (segment_seconds - spec.duration) / spec.stride +
                           1e-9)) +
                       1;
    for (int m = 0; m < count; ++m) {
      DefaultWindow window;
      window.cls = spec.cls;
      window.duration = spec.duration;
      window.center = 0.5 * spec.duration + m * spec.stride;
      grid.windows.push_back(window);
    }
    grid.class_end.push_back(grid.size());
  }
  return grid;
}

double iou(double center_a, double duration_a, double center_b,
           double duration_b) {
  const double lo_a = center_a - 0.5 * duration_a;
  const double hi_a = center_a + 0.5 * duration_a;
  const double lo_b = center_b - 0.5 * duration_b;
  const double hi_b = center_b + 0.5 * duration_b;
  const double inter = std::max(0.0, std::min(hi_a, hi_b) - std::max(lo_a, lo_b));
  const double uni = duration_a + duration_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

MatchResult match_events(const std::vector<Event>& events,
                         const WindowGrid& grid, double theta_match) {
  const int num_windows = grid.size();
  const int num_events = static_cast<int>(events.size());
  const int num_classes = static_cast<int>(grid.classes.size()) + 1;

  // window -> chosen event, resolved by IoU with earlier events winning ties.
  std::vector<int> chosen(static_cast<std::size_t>(num_windows), -1);
  std::vector<double> chosen_iou(static_cast<std::size_t>(num_windows), -1.0);

  auto propose = [&](int w, int e, double overlap) {
    auto wi = static_cast<std::size_t>(w);
    if (overlap > chosen_iou[wi] ||
        (overlap == chosen_iou[wi] && chosen[wi] > e)) {
      chosen[wi] = e;
      chosen_iou[wi] = overlap;
    }
  };

  for (int e = 0; e < num_events; ++e) {
    const Event& event = events[static_cast<std::size_t>(e)];
    const int cls_idx = grid.class_index(event.cls);
    if (cls_idx < 0) continue;  // class absent from this grid
    int best_window = -1;
    double best_iou = -1.0;
    for (int w = grid.class_begin[static_cast<std::size_t>(cls_idx)];
         w < grid.class_end[static_cast<std::size_t>(cls_idx)]; ++w) {
      const auto& window = grid.windows[static_cast<std::size_t>(w)];
      const double overlap =
          iou(event.center(), event.duration, window.center, window.duration);
      if (overlap > best_iou) {
        best_iou = overlap;
        best_window = w;
      }
      if (overlap >= theta_match) propose(w, e, overlap);
    }
    // Forced best match keeps every event represented even below threshold.
    if (best_window >= 0) propose(best_window, e, best_iou);
  }

  MatchResult result;
  for (int w = 0; w < num_windows; ++w) {
    if (chosen[static_cast<std::size_t>(w)] >= 0) {
      result.pairs.emplace_back(w, chosen[static_cast<std::size_t>(w)]);
    } else {
      result.unmatched.push_back(w);
    }
  }

  const auto num_matched = static_cast<Index>(result.pairs.size());
  result.one_hot = Matrix::Zero(num_matched, num_classes);
  result.targets.resize(num_matched, 2);
  for (Index i = 0; i < num_matched; ++i) {
    const auto& [w, e] = result.pairs[static_cast<std::size_t>(i)];
    const Event& event = events[static_cast<std::size_t>(e)];
    const auto& window = grid.windows[static_cast<std::size_t>(w)];
    result.one_hot(i, grid.class_index(event.cls)) = 1.0;
    const auto [dc, dd] = encode_target(event, window);
    result.targets(i, 0) = dc;
    result.targets(i, 1) = dd;
  }
  return result;
}

std::pair<double, double> encode_target(const Event& event,
                                        const DefaultWindow& window) {
  return {(event.center() - window.center) / window.duration,
          std::log(event.duration / window.duration)};
}

Matrix encode_targets(
    const std::vector<std::pair<Event, DefaultWindow>>& pairs) {
  Matrix out(static_cast<Index>(pairs.size()), 2);
  for (Index i = 0; i < out.rows(); ++i) {
    const auto& [event, window] = pairs[static_cast<std::size_t>(i)];
    const auto [dc, dd] = encode_target(event, window);
    out(i, 0) = dc;
    out(i, 1) = dd;
  }
  return out;
}

std::vector<std::pair<double, double>> decode_predictions(
    const Matrix& loc, const WindowGrid& grid) {
  if (loc.rows() != grid.size() || loc.cols() != 2)
    throw std::invalid_argument("decode_predictions: shape mismatch with grid");
  std::vector<std::pair<double, double>> out(
      static_cast<std::size_t>(loc.rows()));
  for (Index j = 0; j < loc.rows(); ++j) {
    const auto& window = grid.windows[static_cast<std::size_t>(j)];
    const double center = window.center + loc(j, 0) * window.duration;
    double duration = window.duration * std::exp(loc(j, 1));
    duration = std::clamp(duration, 0.1, grid.segment_seconds);
    out[static_cast<std::size_t>(j)] = {center, duration};
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& candidates,
                           double theta_score, double theta_nms) {
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(candidates.size()); ++i) {
    if (candidates[static_cast<std::size_t>(i)].probability > theta_score)
      order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return candidates[static_cast<std::size_t>(a)].probability >
           candidates[static_cast<std::size_t>(b)].probability;
  });

  std::vector<Detection> kept;
  std::vector<bool> suppressed(candidates.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto anchor_idx = static_cast<std::size_t>(order[i]);
    if (suppressed[anchor_idx]) continue;
    const Detection& anchor = candidates[anchor_idx];
    kept.push_back(anchor);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const auto other_idx = static_cast<std::size_t>(order[j]);
      if (suppressed[other_idx]) continue;
      const Detection& other = candidates[other_idx];
      if (iou(anchor.center, anchor.duration, other.center, other.duration) >=
          theta_nms)
        suppressed[other_idx] = true;
    }
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.center < b.center;
                   });
  return kept;
}

}  // namespace sleepdet

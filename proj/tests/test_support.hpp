#pragma once

// Shared oracles for the test suites. Everything here is implemented
// independently of the library code paths it checks: plain loops, no reuse
// of the production algorithms.

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "sleepdet/event_geometry.hpp"
#include "sleepdet/rng.hpp"
#include "sleepdet/types.hpp"

namespace testing_support {

using sleepdet::Detection;
using sleepdet::Event;
using sleepdet::EventClass;

inline double interval_iou(double lo_a, double hi_a, double lo_b, double hi_b) {
  const double inter = std::max(0.0, std::min(hi_a, hi_b) - std::max(lo_a, lo_b));
  const double uni = (hi_a - lo_a) + (hi_b - lo_b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Reference NMS: repeatedly scan for the most probable remaining candidate
/// above the threshold, erase everything overlapping it.
inline std::vector<Detection> reference_nms(std::vector<Detection> candidates,
                                            double theta_score,
                                            double theta_nms) {
  std::vector<Detection> pool;
  for (const auto& det : candidates)
    if (det.probability > theta_score) pool.push_back(det);
  std::vector<Detection> kept;
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i)
      if (pool[i].probability > pool[best].probability) best = i;
    const Detection anchor = pool[best];
    kept.push_back(anchor);
    std::vector<Detection> next;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (i == best) continue;
      const double overlap = interval_iou(
          pool[i].center - 0.5 * pool[i].duration,
          pool[i].center + 0.5 * pool[i].duration,
          anchor.center - 0.5 * anchor.duration,
          anchor.center + 0.5 * anchor.duration);
      if (overlap < theta_nms) next.push_back(pool[i]);
    }
    pool = std::move(next);
  }
  std::sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
    return a.center < b.center;
  });
  return kept;
}

/// Reference matcher mirroring the documented rules with plain quadratic
/// scans: threshold pairs plus forced per-event best windows, window
/// conflicts resolved by IoU (earlier event wins ties).
inline std::vector<std::pair<int, int>> reference_match(
    const std::vector<Event>& events, const sleepdet::WindowGrid& grid,
    double theta) {
  const int num_windows = grid.size();
  const int num_events = static_cast<int>(events.size());
  std::vector<std::vector<double>> overlap(
      static_cast<std::size_t>(num_windows),
      std::vector<double>(static_cast<std::size_t>(num_events), -1.0));
  for (int w = 0; w < num_windows; ++w) {
    for (int e = 0; e < num_events; ++e) {
      const auto& window = grid.windows[static_cast<std::size_t>(w)];
      const auto& event = events[static_cast<std::size_t>(e)];
      if (window.cls != event.cls) continue;
      overlap[static_cast<std::size_t>(w)][static_cast<std::size_t>(e)] =
          interval_iou(window.center - 0.5 * window.duration,
                       window.center + 0.5 * window.duration, event.onset,
                       event.offset());
    }
  }
  std::vector<std::pair<int, int>> proposals;
  for (int w = 0; w < num_windows; ++w)
    for (int e = 0; e < num_events; ++e)
      if (overlap[static_cast<std::size_t>(w)][static_cast<std::size_t>(e)] >=
          theta)
        proposals.emplace_back(w, e);
  for (int e = 0; e < num_events; ++e) {
    int best_w = -1;
    double best = -1.0;
    for (int w = 0; w < num_windows; ++w) {
      const double o =
          overlap[static_cast<std::size_t>(w)][static_cast<std::size_t>(e)];
      if (o > best) {
        best = o;
        best_w = w;
      }
    }
    if (best_w >= 0 && best >= 0.0) proposals.emplace_back(best_w, e);
  }
  // window takes the highest-IoU event; earlier event wins ties
  std::vector<std::pair<int, int>> pairs;
  for (int w = 0; w < num_windows; ++w) {
    int chosen = -1;
    double best = -1.0;
    for (const auto& [pw, pe] : proposals) {
      if (pw != w) continue;
      const double o =
          overlap[static_cast<std::size_t>(w)][static_cast<std::size_t>(pe)];
      if (o > best || (o == best && (chosen < 0 || pe < chosen))) {
        best = o;
        chosen = pe;
      }
    }
    if (chosen >= 0) pairs.emplace_back(w, chosen);
  }
  return pairs;
}

/// Lock-in amplitude estimate of a sine component, using only the interior
/// of the signal to dodge edge transients.
inline double probe_amplitude(const std::vector<double>& signal, double fs,
                              double freq, double skip_fraction = 0.25) {
  const auto n = static_cast<std::ptrdiff_t>(signal.size());
  const auto lo = static_cast<std::ptrdiff_t>(skip_fraction * n);
  const auto hi = n - lo;
  double s = 0.0, c = 0.0;
  for (std::ptrdiff_t i = lo; i < hi; ++i) {
    const double t = static_cast<double>(i) / fs;
    s += signal[static_cast<std::size_t>(i)] * std::sin(2.0 * M_PI * freq * t);
    c += signal[static_cast<std::size_t>(i)] * std::cos(2.0 * M_PI * freq * t);
  }
  const double count = static_cast<double>(hi - lo);
  return 2.0 * std::hypot(s, c) / count;
}

/// Naive DFT power at one frequency bin (Goertzel-style direct sum).
inline double dft_power(const std::vector<double>& signal, double fs,
                        double freq) {
  std::complex<double> acc(0.0, 0.0);
  for (std::size_t i = 0; i < signal.size(); ++i) {
    const double phase =
        -2.0 * M_PI * freq * static_cast<double>(i) / fs;
    acc += signal[i] * std::complex<double>(std::cos(phase), std::sin(phase));
  }
  return std::norm(acc);
}

/// Integer-lag argmax of the cross-correlation between two signals.
inline int xcorr_peak_lag(const std::vector<double>& x,
                          const std::vector<double>& y, int max_lag) {
  int best_lag = 0;
  double best = -1.0;
  const auto n = static_cast<int>(std::min(x.size(), y.size()));
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    double acc = 0.0;
    for (int i = std::max(0, -lag); i < n && i + lag < n; ++i)
      acc += x[static_cast<std::size_t>(i)] *
             y[static_cast<std::size_t>(i + lag)];
    if (acc > best) {
      best = acc;
      best_lag = lag;
    }
  }
  return best_lag;
}

inline std::vector<double> to_std(const sleepdet::Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline sleepdet::Vector to_eigen(const std::vector<double>& v) {
  sleepdet::Vector out(static_cast<sleepdet::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out(static_cast<sleepdet::Index>(i)) = v[i];
  return out;
}

}  // namespace testing_support

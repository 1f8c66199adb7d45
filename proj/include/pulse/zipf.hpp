#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pulse/errors.hpp"

namespace pulse {

// Rank/frequency analysis: items sorted by frequency get ranks 1..N, and a
// power law f(r) = C * r^a is fit by ordinary least squares in log-log space.

struct ZipfPoint {
  std::size_t rank = 0;     // 1-based
  double frequency = 0.0;   // counts convert exactly below 2^53
  std::string item;
};

struct ZipfSeries {
  std::vector<ZipfPoint> points;  // sorted by rank
};

// Ranks descend by frequency; ties break lexicographically by item so the
// ranking is a deterministic function of the counts alone.
inline ZipfSeries zipf_rank_frequency(
    const std::map<std::string, std::uint64_t>& counts) {
  ZipfSeries s;
  s.points.reserve(counts.size());
  for (const auto& [item, count] : counts)
    s.points.push_back({0, static_cast<double>(count), item});
  std::stable_sort(s.points.begin(), s.points.end(),
                   [](const ZipfPoint& a, const ZipfPoint& b) {
                     if (a.frequency != b.frequency)
                       return a.frequency > b.frequency;
                     return a.item < b.item;
                   });
  for (std::size_t i = 0; i < s.points.size(); ++i) s.points[i].rank = i + 1;
  return s;
}

struct PowerLawFit {
  double exponent = 0.0;   // a in f(r) = C * r^a
  double intercept = 0.0;  // ln C
  double r_squared = 0.0;
};

// OLS on (ln rank, ln frequency). Points with zero frequency are excluded;
// fewer than three usable points is a data error, not a silent degenerate fit.
inline PowerLawFit fit_power_law(const ZipfSeries& series) {
  std::vector<double> xs, ys;
  for (const ZipfPoint& p : series.points) {
    if (p.frequency <= 0.0) continue;
    xs.push_back(std::log(static_cast<double>(p.rank)));
    ys.push_back(std::log(p.frequency));
  }
  const std::size_t n = xs.size();
  if (n < 3)
    throw DataError("power-law fit needs at least 3 nonzero points, got " +
                    std::to_string(n));

  double mx = 0.0, my = 0.0;
  double y_min = ys[0], y_max = ys[0];
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
    y_min = std::min(y_min, ys[i]);
    y_max = std::max(y_max, ys[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0)
    throw DataError("power-law fit: all ranks identical after filtering");

  PowerLawFit fit;
  if (y_max == y_min) {
    // Perfectly flat series: the constant fit is exact. Detected on the raw
    // log-frequencies, where equality is exact, rather than on syy, which
    // picks up rounding noise from the mean.
    fit.exponent = 0.0;
    fit.intercept = y_min;
    fit.r_squared = 1.0;
    return fit;
  }
  fit.exponent = sxy / sxx;
  fit.intercept = my - fit.exponent * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ys[i] - (fit.intercept + fit.exponent * xs[i]);
    ss_res += r * r;
  }
  fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

}  // namespace pulse

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "latflow/rational.hpp"

namespace latflow {

// Scoring pipeline for generated videos: bound and normalize raw metric
// values, discretize them onto a 1..10 ladder through empirical thresholds,
// and aggregate the ratings with duration-tier weights. Totals are computed
// in exact rationals; every tier weight is a multiple of 1/1000.

enum class MetricDirection { HigherBetter, LowerBetter };

struct MetricSpec {
    std::string name;
    MetricDirection direction = MetricDirection::HigherBetter;
    double s_min = 0.0;
    double s_max = 1.0;
    // tau_0..tau_8, strictly decreasing for higher-better metrics and
    // strictly increasing for lower-better ones
    std::array<double, 9> thresholds{};

    void validate() const;
};

using MetricSpecs = std::map<std::string, MetricSpec>;

// Published thresholds for the nine metrics, bounds [0, 1]. The five base
// metrics are higher-better; the four drifting variants are lower-better.
MetricSpecs default_metric_specs();

// Override table: tab-separated rows
//   name  direction  s_min  s_max  t0 .. t8
// with '#' comment lines; direction is "higher-better" or "lower-better".
MetricSpecs load_metric_specs(const std::string& path);

// sbar = clamp((s - s_min) / (s_max - s_min), 0, 1)
double normalize_score(double s, const MetricSpec& spec);

// First-threshold rule: rating 10 - i where i is the first index whose
// threshold the normalized score meets (>= for higher-better, <= for
// lower-better); 1 when no threshold is met.
int discretize(double sbar, const MetricSpec& spec);

// discretize(normalize_score(raw)).
int rate(double raw, const MetricSpec& spec);

enum class Tier { Short, Long };

struct TierTotals {
    Rat total{0};       // short total, or long total including throughput
    Rat total_star{0};  // long pre-throughput total; equals total on short
};

// Short: 0.10 (aesthetic + motion_amplitude + motion_smoothness)
//      + 0.35 (semantic + naturalness).
// Long:  base weights 0.03 / 0.255 plus 0.099 for each of the four drifting
//        ratings; total adds 0.10 * throughput_rating when one is given.
TierTotals aggregate(const std::map<std::string, int>& ratings, Tier tier,
                     std::optional<int> throughput_rating = std::nullopt);

// Relative drift of a per-window metric series: |mean of the last fraction
// minus mean of the first fraction| / mean of the first fraction. The
// window count per end is max(1, floor(n * fraction)).
double drift_series_metric(const std::vector<double>& series, double fraction = 0.25);

// Frames-per-second to a 1..10 rating through a descending ladder with the
// higher-better first-threshold rule. The default ladder is approximate;
// published FPS-to-score pairs are not mutually consistent, so score files
// carry the rating directly instead of deriving it from FPS.
inline constexpr std::array<double, 9> kDefaultThroughputLadder = {24, 21, 18, 15, 12, 9, 6, 3, 1};
int throughput_rating(double fps, const std::array<double, 9>& ladder = kDefaultThroughputLadder);

struct MetricScore {
    std::string name;
    double raw = 0.0;
    double normalized = 0.0;
    int rating = 0;
};

struct VideoReport {
    std::string video_id;
    Tier tier = Tier::Short;
    std::vector<MetricScore> scores;  // input order
    std::optional<int> throughput_rating;
    TierTotals totals;
};

// Scores tab-separated rows "video_id  metric  raw_value". The pseudo-metric
// "throughput_rating" carries an integer rating 1..10 as its value. A video
// is long-tier when any drifting metric is present; long videos need all
// nine metrics, short ones the five base metrics. Reports follow first
// appearance order. Errors name the offending 1-based line.
std::vector<VideoReport> score_rows(const std::vector<std::string>& lines, const MetricSpecs& specs);
std::vector<VideoReport> score_file(const std::string& path, const MetricSpecs& specs);

// Human-readable report and a machine summary
//   video  tier  total  total_star  throughput_rating
// with totals printed to three decimals (exact under the tier weights).
std::string format_report(const std::vector<VideoReport>& reports);
std::string report_tsv(const std::vector<VideoReport>& reports);

}  // namespace latflow

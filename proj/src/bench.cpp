#include "latflow/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "latflow/errors.hpp"

namespace latflow {

namespace {

const char* kDriftMetrics[] = {"drifting_aesthetic", "drifting_motion_smoothness", "drifting_semantic",
                               "drifting_naturalness"};

MetricSpec hb(const char* name, std::array<double, 9> t) {
    MetricSpec s;
    s.name = name;
    s.direction = MetricDirection::HigherBetter;
    s.thresholds = t;
    return s;
}

MetricSpec lb(const char* name, std::array<double, 9> t) {
    MetricSpec s;
    s.name = name;
    s.direction = MetricDirection::LowerBetter;
    s.thresholds = t;
    return s;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw IoError(where + ": unreadable number '" + s + "'");
    }
}

int fetch_rating(const std::map<std::string, int>& ratings, const char* name) {
    auto it = ratings.find(name);
    if (it == ratings.end()) throw ConfigError(std::string("missing rating for ") + name);
    if (it->second < 1 || it->second > 10)
        throw ConfigError(std::string("rating out of range for ") + name);
    return it->second;
}

std::string fmt3(const Rat& r) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", r.to_double());
    return buf;
}

}  // namespace

void MetricSpec::validate() const {
    if (name.empty()) throw ConfigError("metric spec needs a name");
    if (!(s_min < s_max)) throw ConfigError("metric bounds must satisfy min < max: " + name);
    for (std::size_t i = 1; i < thresholds.size(); i++) {
        bool ok = direction == MetricDirection::HigherBetter ? thresholds[i] < thresholds[i - 1]
                                                             : thresholds[i] > thresholds[i - 1];
        if (!ok) throw ConfigError("metric thresholds must be strictly monotone: " + name);
    }
}

MetricSpecs default_metric_specs() {
    std::vector<MetricSpec> rows = {
        hb("aesthetic", {0.70, 0.65, 0.60, 0.55, 0.50, 0.45, 0.40, 0.35, 0.30}),
        hb("motion_amplitude", {0.45, 0.40, 0.35, 0.30, 0.25, 0.20, 0.15, 0.10, 0.05}),
        hb("motion_smoothness", {0.99, 0.98, 0.97, 0.96, 0.95, 0.94, 0.93, 0.92, 0.91}),
        hb("semantic", {0.30, 0.29, 0.28, 0.27, 0.26, 0.25, 0.24, 0.23, 0.22}),
        hb("naturalness", {0.65, 0.60, 0.55, 0.50, 0.45, 0.40, 0.30, 0.25, 0.20}),
        lb("drifting_aesthetic", {0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09}),
        lb("drifting_motion_smoothness", {0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09}),
        lb("drifting_semantic", {0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09}),
        lb("drifting_naturalness", {0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.18, 0.20, 0.22}),
    };
    MetricSpecs specs;
    for (MetricSpec& s : rows) {
        s.validate();
        specs.emplace(s.name, std::move(s));
    }
    return specs;
}

MetricSpecs load_metric_specs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metric spec file " + path);
    MetricSpecs specs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        if (line.empty() || line[0] == '#') continue;
        std::string where = path + " line " + std::to_string(lineno);
        std::vector<std::string> f = split_tabs(line);
        if (f.size() != 13) throw IoError(where + ": expected 13 tab-separated fields");
        MetricSpec s;
        s.name = f[0];
        if (f[1] == "higher-better")
            s.direction = MetricDirection::HigherBetter;
        else if (f[1] == "lower-better")
            s.direction = MetricDirection::LowerBetter;
        else
            throw IoError(where + ": direction must be higher-better or lower-better");
        s.s_min = parse_double(f[2], where);
        s.s_max = parse_double(f[3], where);
        for (std::size_t i = 0; i < 9; i++) s.thresholds[i] = parse_double(f[4 + i], where);
        s.validate();
        if (!specs.emplace(s.name, s).second) throw ConfigError(where + ": duplicate metric " + s.name);
    }
    return specs;
}

double normalize_score(double s, const MetricSpec& spec) {
    spec.validate();
    double sbar = (s - spec.s_min) / (spec.s_max - spec.s_min);
    return std::max(0.0, std::min(1.0, sbar));
}

int discretize(double sbar, const MetricSpec& spec) {
    spec.validate();
    if (!(sbar >= 0.0 && sbar <= 1.0)) throw ConfigError("normalized score outside [0, 1]");
    for (std::size_t j = 0; j < spec.thresholds.size(); j++) {
        bool met = spec.direction == MetricDirection::HigherBetter ? sbar >= spec.thresholds[j]
                                                                   : sbar <= spec.thresholds[j];
        if (met) return static_cast<int>(10 - j);
    }
    return 1;
}

int rate(double raw, const MetricSpec& spec) { return discretize(normalize_score(raw, spec), spec); }

TierTotals aggregate(const std::map<std::string, int>& ratings, Tier tier,
                     std::optional<int> throughput_rating) {
    Rat spatial = Rat(fetch_rating(ratings, "aesthetic")) + Rat(fetch_rating(ratings, "motion_amplitude")) +
                  Rat(fetch_rating(ratings, "motion_smoothness"));
    Rat content = Rat(fetch_rating(ratings, "semantic")) + Rat(fetch_rating(ratings, "naturalness"));

    TierTotals t;
    if (tier == Tier::Short) {
        t.total = Rat(1, 10) * spatial + Rat(35, 100) * content;
        t.total_star = t.total;
        return t;
    }
    Rat drift{0};
    for (const char* name : kDriftMetrics) drift = drift + Rat(fetch_rating(ratings, name));
    t.total_star = Rat(3, 100) * spatial + Rat(255, 1000) * content + Rat(99, 1000) * drift;
    t.total = t.total_star;
    if (throughput_rating) {
        if (*throughput_rating < 1 || *throughput_rating > 10)
            throw ConfigError("throughput rating out of range");
        t.total = t.total_star + Rat(*throughput_rating, 10);
    }
    return t;
}

double drift_series_metric(const std::vector<double>& series, double fraction) {
    if (series.size() < 2) throw DimensionError("drift series needs at least two windows");
    if (!(fraction > 0.0 && fraction <= 0.5)) throw ConfigError("drift fraction must lie in (0, 0.5]");
    std::size_t q = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(series.size()) * fraction));
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < q; i++) {
        first += series[i];
        last += series[series.size() - q + i];
    }
    first /= static_cast<double>(q);
    last /= static_cast<double>(q);
    if (first == 0.0) throw NumericError("drift reference mean is zero");
    return std::abs(last - first) / first;
}

int throughput_rating(double fps, const std::array<double, 9>& ladder) {
    for (std::size_t i = 1; i < ladder.size(); i++)
        if (!(ladder[i] < ladder[i - 1])) throw ConfigError("throughput ladder must be strictly decreasing");
    for (std::size_t j = 0; j < ladder.size(); j++)
        if (fps >= ladder[j]) return static_cast<int>(10 - j);
    return 1;
}

std::vector<VideoReport> score_rows(const std::vector<std::string>& lines, const MetricSpecs& specs) {
    std::vector<VideoReport> reports;
    std::map<std::string, std::size_t> index;

    for (std::size_t li = 0; li < lines.size(); li++) {
        const std::string& line = lines[li];
        if (line.empty() || line[0] == '#') continue;
        std::string where = "score line " + std::to_string(li + 1);
        std::vector<std::string> f = split_tabs(line);
        if (f.size() != 3) throw IoError(where + ": expected video, metric, value");
        const std::string& video = f[0];
        const std::string& metric = f[1];
        if (video.empty() || metric.empty()) throw IoError(where + ": empty video or metric field");
        double value = parse_double(f[2], where);

        auto it = index.find(video);
        if (it == index.end()) {
            it = index.emplace(video, reports.size()).first;
            reports.push_back(VideoReport{});
            reports.back().video_id = video;
        }
        VideoReport& rep = reports[it->second];

        if (metric == "throughput_rating") {
            int r = static_cast<int>(value);
            if (static_cast<double>(r) != value || r < 1 || r > 10)
                throw ConfigError(where + ": throughput rating must be an integer in 1..10");
            if (rep.throughput_rating) throw ConfigError(where + ": duplicate throughput rating for " + video);
            rep.throughput_rating = r;
            continue;
        }
        auto sit = specs.find(metric);
        if (sit == specs.end()) throw ConfigError(where + ": unknown metric '" + metric + "'");
        for (const MetricScore& ms : rep.scores)
            if (ms.name == metric) throw ConfigError(where + ": duplicate metric " + metric + " for " + video);
        MetricScore ms;
        ms.name = metric;
        ms.raw = value;
        ms.normalized = normalize_score(value, sit->second);
        ms.rating = discretize(ms.normalized, sit->second);
        rep.scores.push_back(ms);
    }

    for (VideoReport& rep : reports) {
        bool drifting = false;
        for (const MetricScore& ms : rep.scores)
            if (ms.name.rfind("drifting_", 0) == 0) drifting = true;
        rep.tier = drifting ? Tier::Long : Tier::Short;
        std::map<std::string, int> ratings;
        for (const MetricScore& ms : rep.scores) ratings[ms.name] = ms.rating;
        try {
            rep.totals = aggregate(ratings, rep.tier,
                                   rep.tier == Tier::Long ? rep.throughput_rating : std::nullopt);
        } catch (const ConfigError& e) {
            throw ConfigError("video '" + rep.video_id + "': " + e.what());
        }
    }
    return reports;
}

std::vector<VideoReport> score_file(const std::string& path, const MetricSpecs& specs) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open score file " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return score_rows(lines, specs);
}

std::string format_report(const std::vector<VideoReport>& reports) {
    std::ostringstream out;
    for (const VideoReport& rep : reports) {
        out << rep.video_id << " (" << (rep.tier == Tier::Long ? "long" : "short") << ")\n";
        for (const MetricScore& ms : rep.scores) {
            char buf[96];
            std::snprintf(buf, sizeof(buf), "  %-28s raw %9.4f  normalized %6.4f  rating %2d\n",
                          ms.name.c_str(), ms.raw, ms.normalized, ms.rating);
            out << buf;
        }
        if (rep.throughput_rating) out << "  throughput rating " << *rep.throughput_rating << "\n";
        if (rep.tier == Tier::Long) {
            out << "  total* " << fmt3(rep.totals.total_star) << "\n";
            out << "  total  " << fmt3(rep.totals.total) << "\n";
        } else {
            out << "  total  " << fmt3(rep.totals.total) << "\n";
        }
    }
    return out.str();
}

std::string report_tsv(const std::vector<VideoReport>& reports) {
    std::ostringstream out;
    out << "video\ttier\ttotal\ttotal_star\tthroughput_rating\n";
    for (const VideoReport& rep : reports) {
        out << rep.video_id << "\t" << (rep.tier == Tier::Long ? "long" : "short") << "\t"
            << fmt3(rep.totals.total) << "\t" << fmt3(rep.totals.total_star) << "\t";
        if (rep.throughput_rating)
            out << *rep.throughput_rating;
        else
            out << "-";
        out << "\n";
    }
    return out.str();
}

}  // namespace latflow

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "prefopt/csv.hpp"
#include "prefopt/data.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/loss.hpp"

// Offline diagnostics: rank correlation between annotation margins and
// learned reward margins, quadrant classification, gradient-coefficient
// curves, and weight distribution summaries.

namespace prefopt {

namespace detail {

// Average ranks (1-based), ties sharing the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });

    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = shared;
        i = j + 1;
    }
    return ranks;
}

inline double median(std::vector<double> values) {
    const std::size_t n = values.size();
    std::sort(values.begin(), values.end());
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

} // namespace detail

// Spearman rank correlation with average-rank tie handling.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw DomainError("spearman: length mismatch");
    if (xs.size() < 2) throw DomainError("spearman: need at least 2 points");
    for (double v : xs) {
        if (!std::isfinite(v)) throw DomainError("spearman: non-finite value");
    }
    for (double v : ys) {
        if (!std::isfinite(v)) throw DomainError("spearman: non-finite value");
    }

    const std::vector<double> rx = detail::average_ranks(xs);
    const std::vector<double> ry = detail::average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    const double mean = (n + 1.0) / 2.0;

    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = rx[i] - mean;
        const double dy = ry[i] - mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DomainError("spearman: constant series has no rank correlation");
    return sxy / std::sqrt(sxx * syy);
}

enum class Quadrant { high_q_easy, high_q_hard, low_q_easy, low_q_hard };

inline const char* to_string(Quadrant q) {
    switch (q) {
        case Quadrant::high_q_easy: return "high_q_easy";
        case Quadrant::high_q_hard: return "high_q_hard";
        case Quadrant::low_q_easy: return "low_q_easy";
        case Quadrant::low_q_hard: return "low_q_hard";
    }
    throw DomainError("to_string: bad Quadrant");
}

struct MarginRecord {
    std::string pair_id;
    double score_margin = 0.0;  // score_w - score_l
    double reward_margin = 0.0; // under the given hyperparameters
    Quadrant quadrant = Quadrant::high_q_easy;
};

struct MarginStudy {
    std::vector<MarginRecord> records;
    double rho = 0.0;           // spearman(score margins, reward margins)
    double score_threshold = 0.0;
    double reward_threshold = 0.0;
};

// Classifies pairs into quality/difficulty quadrants. median_split picks the
// per-axis medians as thresholds; otherwise both thresholds sit at zero.
// "high quality" means score margin >= threshold, "easy" means reward margin
// >= threshold.
inline MarginStudy margin_study(const std::vector<PreferencePair>& pairs, const HyperParams& hp,
                                bool median_split = true) {
    if (pairs.size() < 2) throw DomainError("margin_study: need at least 2 pairs");
    hp.validate();
    check_variant_consistency(hp);

    MarginStudy out;
    std::vector<double> sms, rms;
    sms.reserve(pairs.size());
    rms.reserve(pairs.size());
    for (const PreferencePair& p : pairs) {
        p.validate();
        sms.push_back(p.score_w - p.score_l);
        rms.push_back(reward_margin(p, hp));
    }
    out.rho = spearman(sms, rms);
    out.score_threshold = median_split ? detail::median(sms) : 0.0;
    out.reward_threshold = median_split ? detail::median(rms) : 0.0;

    out.records.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const bool high_q = sms[i] >= out.score_threshold;
        const bool easy = rms[i] >= out.reward_threshold;
        const Quadrant q = high_q ? (easy ? Quadrant::high_q_easy : Quadrant::high_q_hard)
                                  : (easy ? Quadrant::low_q_easy : Quadrant::low_q_hard);
        out.records.push_back({pairs[i].pair_id, sms[i], rms[i], q});
    }
    return out;
}

inline void write_margins_csv(const MarginStudy& study, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "pair_id,score_margin,reward_margin,quadrant\n";
    for (const MarginRecord& r : study.records) {
        out << r.pair_id << ',' << format_double(r.score_margin) << ','
            << format_double(r.reward_margin) << ',' << to_string(r.quadrant) << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

// Focal-style gradient coefficient as a function of the margin:
//   C_gamma(d) = (1 - sigmoid(d))^gamma * ((1 - sigmoid(d)) - gamma * sigmoid(d) * log sigmoid(d))
// gamma = 0 reduces to the plain log-sigmoid coefficient 1 - sigmoid(d).
inline double focal_gradient_coefficient(double delta, double gamma) {
    if (!std::isfinite(delta)) throw DomainError("focal_gradient_coefficient: non-finite delta");
    if (!(gamma >= 0.0)) throw DomainError("focal_gradient_coefficient: gamma must be >= 0");
    return detail::focal_bracket(delta, delta, gamma);
}

struct CurveTable {
    std::vector<double> deltas;
    std::vector<double> gammas;
    std::vector<std::vector<double>> coeffs; // coeffs[gi][di]
};

inline CurveTable gradient_curve(std::span<const double> deltas, std::span<const double> gammas) {
    if (deltas.empty() || gammas.empty()) throw DomainError("gradient_curve: empty grid");
    CurveTable t;
    t.deltas.assign(deltas.begin(), deltas.end());
    t.gammas.assign(gammas.begin(), gammas.end());
    t.coeffs.resize(gammas.size());
    for (std::size_t gi = 0; gi < gammas.size(); ++gi) {
        t.coeffs[gi].reserve(deltas.size());
        for (double d : deltas) t.coeffs[gi].push_back(focal_gradient_coefficient(d, gammas[gi]));
    }
    return t;
}

inline void write_curve_csv(const CurveTable& t, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "delta";
    for (double g : t.gammas) out << ",gamma_" << format_double(g);
    out << '\n';
    for (std::size_t di = 0; di < t.deltas.size(); ++di) {
        out << format_double(t.deltas[di]);
        for (std::size_t gi = 0; gi < t.gammas.size(); ++gi) {
            out << ',' << format_double(t.coeffs[gi][di]);
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

struct WeightStats {
    double mean = 0.0;
    std::array<double, 11> deciles{}; // p0, p10, ..., p100
};

struct WeightStatsReport {
    WeightStats w_qual;
    WeightStats w_perf;
};

namespace detail {

inline WeightStats summarize(std::vector<double> values) {
    WeightStats s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    const double last = static_cast<double>(values.size() - 1);
    for (int d = 0; d <= 10; ++d) {
        const double pos = last * d / 10.0;
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        s.deciles[static_cast<std::size_t>(d)] = values[lo] + frac * (values[hi] - values[lo]);
    }
    return s;
}

} // namespace detail

// Distribution of both omni weights over a dataset under the given
// hyperparameters.
inline WeightStatsReport weight_stats(const std::vector<PreferencePair>& pairs, const HyperParams& hp) {
    if (pairs.empty()) throw DomainError("weight_stats: empty dataset");
    hp.validate();
    std::vector<double> wq, wp;
    wq.reserve(pairs.size());
    wp.reserve(pairs.size());
    for (const PreferencePair& p : pairs) {
        p.validate();
        wq.push_back(quality_weight(p.score_w, p.score_l, hp.eta));
        wp.push_back(perf_weight(p, hp));
    }
    return {detail::summarize(std::move(wq)), detail::summarize(std::move(wp))};
}

inline void write_weight_stats_csv(const WeightStatsReport& rep, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "weight,mean,p0,p10,p20,p30,p40,p50,p60,p70,p80,p90,p100\n";
    const auto row = [&](const char* name, const WeightStats& s) {
        out << name << ',' << format_double(s.mean);
        for (double d : s.deciles) out << ',' << format_double(d);
        out << '\n';
    };
    row("w_qual", rep.w_qual);
    row("w_perf", rep.w_perf);
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace prefopt

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "prefopt/analysis.hpp"

using namespace prefopt;
using Catch::Approx;

namespace {

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

// Unit-length pair with both reference log-probs at -1, so the reward margin
// under the length-normalized default is just beta * (pw - pl).
PreferencePair unit_pair(const char* id, double pw, double pl, double sw, double sl) {
    PreferencePair p;
    p.pair_id = id;
    p.policy_logp_w = pw;
    p.policy_logp_l = pl;
    p.ref_logp_w = -1.0;
    p.ref_logp_l = -1.0;
    p.len_w = 1;
    p.len_l = 1;
    p.score_w = sw;
    p.score_l = sl;
    return p;
}

std::vector<double> linspace(double lo, double hi, int n) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.push_back(lo + (hi - lo) * i / (n - 1));
    }
    return out;
}

} // namespace

TEST_CASE("spearman on hand-ranked fixtures") {
    SECTION("one swap per half gives 0.8") {
        const std::vector<double> xs = {1, 2, 3, 4, 5};
        const std::vector<double> ys = {2, 1, 4, 3, 5};
        REQUIRE(spearman(xs, ys) == Approx(0.8).epsilon(1e-14));
        const std::vector<double> neg = {-2, -1, -4, -3, -5};
        REQUIRE(spearman(xs, neg) == Approx(-0.8).epsilon(1e-14));
    }
    SECTION("tied pair uses average ranks") {
        const std::vector<double> xs = {1, 2, 2, 3};
        const std::vector<double> ys = {1, 2, 3, 4};
        // Pearson on ranks {1, 2.5, 2.5, 4} vs {1, 2, 3, 4} is sqrt(0.9).
        REQUIRE(spearman(xs, ys) == Approx(0.9486832980505138).epsilon(1e-14));
    }
    SECTION("monotone series score exactly +/-1") {
        const std::vector<double> xs = {0.1, 0.7, 2.0, 9.4};
        const std::vector<double> up = {-5, -2, 0, 11};
        const std::vector<double> down = {3, 1, 0, -1};
        REQUIRE(spearman(xs, up) == 1.0);
        REQUIRE(spearman(xs, down) == -1.0);
    }
    SECTION("invariant under strictly increasing transforms") {
        const std::vector<double> xs = {0.3, -1.2, 4.0, 2.2, 0.9, -0.4};
        const std::vector<double> ys = {1.0, 5.0, -2.0, 0.5, 0.4, 3.3};
        std::vector<double> warped;
        for (double v : ys) warped.push_back(std::exp(0.3 * v) + v);
        REQUIRE(spearman(xs, warped) == Approx(spearman(xs, ys)).epsilon(1e-14));
    }
    SECTION("rejects malformed input") {
        const std::vector<double> xs = {1, 2, 3};
        REQUIRE_THROWS_AS(spearman(xs, std::vector<double>{1, 2}), DomainError);
        REQUIRE_THROWS_AS(spearman(std::vector<double>{1.0}, std::vector<double>{2.0}), DomainError);
        REQUIRE_THROWS_AS(spearman(xs, std::vector<double>{4, 4, 4}), DomainError);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        REQUIRE_THROWS_AS(spearman(xs, std::vector<double>{1, nan, 2}), DomainError);
    }
}

TEST_CASE("margin study sorts pairs into quadrants") {
    const HyperParams hp; // length-normalized, beta 2
    const std::vector<PreferencePair> pairs = {
        unit_pair("a", -0.5, -2.0, 4.0, 1.0), // sm  3.0, rm  3.0
        unit_pair("b", -2.0, -0.5, 4.5, 2.0), // sm  2.5, rm -3.0
        unit_pair("c", -0.4, -1.4, 1.0, 3.0), // sm -2.0, rm  2.0
        unit_pair("d", -3.0, -1.0, 0.5, 2.5), // sm -2.0, rm -4.0
    };

    SECTION("zero-split thresholds") {
        const MarginStudy study = margin_study(pairs, hp, false);
        REQUIRE(study.score_threshold == 0.0);
        REQUIRE(study.reward_threshold == 0.0);
        REQUIRE(study.records.size() == 4);
        REQUIRE(study.records[0].quadrant == Quadrant::high_q_easy);
        REQUIRE(study.records[1].quadrant == Quadrant::high_q_hard);
        REQUIRE(study.records[2].quadrant == Quadrant::low_q_easy);
        REQUIRE(study.records[3].quadrant == Quadrant::low_q_hard);
        REQUIRE(study.records[0].pair_id == "a");
        REQUIRE(study.records[0].score_margin == Approx(3.0).epsilon(1e-14));
        REQUIRE(study.records[0].reward_margin == Approx(3.0).epsilon(1e-12));
        // Ranks by hand: sms {4, 3, 1.5, 1.5}, rms {4, 2, 3, 1}.
        REQUIRE(study.rho == Approx(0.6324555320336759).epsilon(1e-14));
    }
    SECTION("median split records per-axis thresholds") {
        const MarginStudy study = margin_study(pairs, hp, true);
        REQUIRE(study.score_threshold == Approx(0.25).epsilon(1e-14));
        REQUIRE(study.reward_threshold == Approx(-0.5).epsilon(1e-12));
        REQUIRE(study.records[0].quadrant == Quadrant::high_q_easy);
        REQUIRE(study.records[1].quadrant == Quadrant::high_q_hard);
        REQUIRE(study.records[2].quadrant == Quadrant::low_q_easy);
        REQUIRE(study.records[3].quadrant == Quadrant::low_q_hard);
    }
    SECTION("rejects degenerate input") {
        REQUIRE_THROWS_AS(margin_study({pairs[0]}, hp), DomainError);
        HyperParams bad = hp;
        bad.length_normalized = false; // inconsistent with the omni variant
        REQUIRE_THROWS_AS(margin_study(pairs, bad), ConfigError);
        std::vector<PreferencePair> broken = pairs;
        broken[2].len_l = 0;
        REQUIRE_THROWS_AS(margin_study(broken, hp), DegenerateSequenceError);
    }
    SECTION("margins CSV carries the pinned header") {
        const MarginStudy study = margin_study(pairs, hp);
        const auto path = temp_file("prefopt_margins.csv");
        write_margins_csv(study, path);
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        REQUIRE(line == "pair_id,score_margin,reward_margin,quadrant");
        int rows = 0;
        std::string first_row;
        while (std::getline(in, line)) {
            if (rows == 0) first_row = line;
            ++rows;
        }
        REQUIRE(rows == 4);
        REQUIRE(first_row == "a,3,3,high_q_easy");
        std::filesystem::remove(path);
    }
}

TEST_CASE("focal gradient coefficient matches an independent evaluation") {
    // Frozen from a 40-digit evaluation of
    // (1-s)^g * ((1-s) - g*s*log(s)) at s = sigmoid(delta).
    REQUIRE(focal_gradient_coefficient(0.0, 3.0) == Approx(0.19246509635498975).epsilon(1e-15));
    REQUIRE(focal_gradient_coefficient(1.0, 2.0) == Approx(0.052581129977560621).epsilon(1e-15));
    REQUIRE(focal_gradient_coefficient(-2.0, 0.5) == Approx(0.94560780112279235).epsilon(1e-15));

    REQUIRE_THROWS_AS(focal_gradient_coefficient(std::numeric_limits<double>::infinity(), 1.0),
                      DomainError);
    REQUIRE_THROWS_AS(focal_gradient_coefficient(0.0, -0.5), DomainError);
}

TEST_CASE("gamma zero reduces the curve to the plain log-sigmoid coefficient") {
    for (double d : linspace(-30.0, 30.0, 601)) {
        const double expected = 1.0 - sigmoid(d);
        REQUIRE(std::abs(focal_gradient_coefficient(d, 0.0) - expected) <= 1e-12);
    }
}

TEST_CASE("positive gamma curves cross the baseline once and stay below") {
    const std::vector<double> deltas = linspace(-12.0, 12.0, 481);
    for (double gamma : {0.5, 1.0, 2.0, 5.0}) {
        INFO("gamma " << gamma);
        int sign_changes = 0;
        double crossover = 0.0;
        bool prev_above = true;
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            const double diff =
                focal_gradient_coefficient(deltas[i], gamma) - focal_gradient_coefficient(deltas[i], 0.0);
            REQUIRE(diff != 0.0);
            const bool above = diff > 0.0;
            if (i == 0) {
                // Down-weighting of very negative margins has not kicked in
                // yet, while the -log sigmoid factor is already large.
                REQUIRE(above);
            } else if (above != prev_above) {
                ++sign_changes;
                crossover = deltas[i];
            }
            prev_above = above;
        }
        REQUIRE(sign_changes == 1);
        REQUIRE(crossover < 0.0);
    }
}

TEST_CASE("positive gamma curves peak at a moderately negative margin") {
    const std::vector<double> deltas = linspace(-12.0, 12.0, 481);
    for (double gamma : {0.5, 1.0, 2.0, 3.0, 5.0}) {
        INFO("gamma " << gamma);
        std::size_t argmax = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            const double c = focal_gradient_coefficient(deltas[i], gamma);
            if (c > best) {
                best = c;
                argmax = i;
            }
        }
        REQUIRE(argmax > 0);
        REQUIRE(argmax < deltas.size() - 1);
        REQUIRE(deltas[argmax] < 0.0);
        REQUIRE(best > 1.0); // exceeds the baseline's supremum
    }
    // The baseline itself only decreases, so its grid maximum is the left edge.
    double prev = focal_gradient_coefficient(deltas.front(), 0.0);
    for (std::size_t i = 1; i < deltas.size(); ++i) {
        const double c = focal_gradient_coefficient(deltas[i], 0.0);
        REQUIRE(c < prev);
        prev = c;
    }
}

TEST_CASE("gradient_curve tabulates the requested grid") {
    const std::vector<double> deltas = {-1.0, 0.0, 1.0};
    const std::vector<double> gammas = {0.0, 3.0};
    const CurveTable t = gradient_curve(deltas, gammas);
    REQUIRE(t.deltas == deltas);
    REQUIRE(t.gammas == gammas);
    REQUIRE(t.coeffs.size() == 2);
    REQUIRE(t.coeffs[0].size() == 3);
    REQUIRE(t.coeffs[1][1] == Approx(0.19246509635498975).epsilon(1e-15));
    REQUIRE(t.coeffs[0][1] == Approx(0.5).epsilon(1e-15));

    REQUIRE_THROWS_AS(gradient_curve({}, gammas), DomainError);
    REQUIRE_THROWS_AS(gradient_curve(deltas, {}), DomainError);

    const auto path = temp_file("prefopt_curve.csv");
    write_curve_csv(t, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "delta,gamma_0,gamma_3");
    int rows = 0;
    std::string second;
    while (std::getline(in, line)) {
        if (rows == 1) second = line;
        ++rows;
    }
    REQUIRE(rows == 3);
    REQUIRE(second == "0,0.5,0.1924650963549898");
    std::filesystem::remove(path);
}

TEST_CASE("weight statistics summarize both omni weights") {
    const HyperParams hp;
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 11; ++i) {
        // Score margins spread from -2.5 to 2.5, policy margins from mild to strong.
        const double sw = 1.25 + 0.25 * i;
        const double sl = 5.0 - sw;
        pairs.push_back(unit_pair(("p" + std::to_string(i)).c_str(), -0.1 - 0.05 * i, -1.0, sw, sl));
    }
    const WeightStatsReport rep = weight_stats(pairs, hp);

    SECTION("deciles are order statistics of the exact per-pair weights") {
        std::vector<double> wq, wp;
        for (const PreferencePair& p : pairs) {
            wq.push_back(quality_weight(p.score_w, p.score_l, hp.eta));
            wp.push_back(perf_weight(p, hp));
        }
        std::sort(wq.begin(), wq.end());
        std::sort(wp.begin(), wp.end());
        // Eleven values put each decile exactly on one order statistic.
        for (int d = 0; d <= 10; ++d) {
            REQUIRE(rep.w_qual.deciles[static_cast<std::size_t>(d)] ==
                    Approx(wq[static_cast<std::size_t>(d)]).epsilon(1e-15));
            REQUIRE(rep.w_perf.deciles[static_cast<std::size_t>(d)] ==
                    Approx(wp[static_cast<std::size_t>(d)]).epsilon(1e-15));
        }
        double mean = 0.0;
        for (double v : wq) mean += v;
        REQUIRE(rep.w_qual.mean == Approx(mean / 11.0).epsilon(1e-14));
    }
    SECTION("quality weights are symmetric around the even-margin pair") {
        REQUIRE(rep.w_qual.deciles[5] == Approx(0.5).epsilon(1e-14)); // sw == sl at the middle
        REQUIRE(rep.w_qual.deciles[0] == Approx(sigmoid(hp.eta * -2.5)).epsilon(1e-14));
        REQUIRE(rep.w_qual.deciles[10] == Approx(sigmoid(hp.eta * 2.5)).epsilon(1e-14));
    }
    SECTION("deciles never decrease") {
        for (int d = 1; d <= 10; ++d) {
            REQUIRE(rep.w_perf.deciles[static_cast<std::size_t>(d)] >=
                    rep.w_perf.deciles[static_cast<std::size_t>(d - 1)]);
        }
    }
    SECTION("CSV layout") {
        const auto path = temp_file("prefopt_weights.csv");
        write_weight_stats_csv(rep, path);
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        REQUIRE(line == "weight,mean,p0,p10,p20,p30,p40,p50,p60,p70,p80,p90,p100");
        std::getline(in, line);
        REQUIRE(line.rfind("w_qual,", 0) == 0);
        std::getline(in, line);
        REQUIRE(line.rfind("w_perf,", 0) == 0);
        REQUIRE_FALSE(std::getline(in, line));
        std::filesystem::remove(path);
    }
    SECTION("empty input is rejected") {
        REQUIRE_THROWS_AS(weight_stats({}, hp), DomainError);
    }
}

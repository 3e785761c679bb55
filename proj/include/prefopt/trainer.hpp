#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prefopt/csv.hpp"
#include "prefopt/data.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/loss.hpp"
#include "prefopt/policy.hpp"
#include "prefopt/rng.hpp"

// Full-gradient trainer for the n-gram policy. The reference model is a
// frozen copy of the initial policy; its log-probs are computed once. Policy
// log-probs are recomputed per batch from the live table.

namespace prefopt {

enum class Schedule { cosine, constant };

inline const char* to_string(Schedule s) {
    return s == Schedule::cosine ? "cosine" : "constant";
}

struct TrainConfig {
    HyperParams hp;
    int steps = 2000;
    int batch_size = 64;
    double lr_peak = 0.05;
    double warmup_ratio = 0.1;
    Schedule schedule = Schedule::cosine;
    int eval_every = 50;
    std::uint64_t seed = 42;
    std::optional<double> grad_clip; // max global norm; nullopt disables

    // Adaptive-moment constants; left at the conventional defaults.
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;

    void validate(std::size_t dataset_size) const {
        hp.validate();
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (static_cast<std::size_t>(batch_size) > dataset_size) {
            throw ConfigError("batch_size exceeds dataset size");
        }
        if (!(lr_peak > 0.0) || !std::isfinite(lr_peak)) throw ConfigError("lr_peak must be positive");
        if (!(warmup_ratio >= 0.0) || !(warmup_ratio < 1.0)) throw ConfigError("warmup_ratio must be in [0, 1)");
        if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
        if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    }
};

// Linear warmup to lr_peak over warmup_ratio * steps, then cosine decay to
// zero (or flat, for the constant schedule). step is 1-based.
inline double lr_at(const TrainConfig& cfg, int step) {
    const double warmup_steps = cfg.warmup_ratio * cfg.steps;
    if (warmup_steps > 0.0 && step <= warmup_steps) {
        return cfg.lr_peak * step / warmup_steps;
    }
    if (cfg.schedule == Schedule::constant) return cfg.lr_peak;
    const double progress = (step - warmup_steps) / (cfg.steps - warmup_steps);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Scales grad in place if its L2 norm exceeds max_norm; returns the pre-clip
// norm either way.
inline double clip_global_norm(std::vector<double>& grad, double max_norm) {
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (double& g : grad) g *= s;
    }
    return norm;
}

struct StepRecord {
    int step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double grad_norm = 0.0; // pre-clip
    double mean_w_qual = 0.0;
    double mean_w_perf = 0.0;
    double mean_reward_margin = 0.0;
    double cnll_active_frac = 0.0;
};

struct EvalRecord {
    int step = 0;
    double eval_loss = 0.0;
};

struct MetricsLog {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;

    void write_train_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out << "step,lr,train_loss,grad_norm,mean_w_qual,mean_w_perf,mean_reward_margin,cnll_active_frac\n";
        for (const StepRecord& r : steps) {
            out << r.step << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ','
                << format_double(r.grad_norm) << ',' << format_double(r.mean_w_qual) << ','
                << format_double(r.mean_w_perf) << ',' << format_double(r.mean_reward_margin) << ','
                << format_double(r.cnll_active_frac) << '\n';
        }
        if (!out) throw IoError("write failed for " + path.string());
    }

    void write_eval_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out << "step,eval_loss\n";
        for (const EvalRecord& r : evals) {
            out << r.step << ',' << format_double(r.eval_loss) << '\n';
        }
        if (!out) throw IoError("write failed for " + path.string());
    }

    const EvalRecord& min_eval() const {
        if (evals.empty()) throw DomainError("min_eval: no eval records");
        return *std::min_element(evals.begin(), evals.end(),
                                 [](const EvalRecord& a, const EvalRecord& b) { return a.eval_loss < b.eval_loss; });
    }

    const EvalRecord& final_eval() const {
        if (evals.empty()) throw DomainError("final_eval: no eval records");
        return evals.back();
    }
};

struct TrainResult {
    NGramPolicy model;
    NGramPolicy reference;
    MetricsLog metrics;
};

namespace detail {

struct PreppedExample {
    const RawExample* ex;
    double ref_logp_w;
    double ref_logp_l;
};

inline std::vector<PreppedExample> prep_examples(const std::vector<RawExample>& examples,
                                                 const NGramPolicy& reference) {
    std::vector<PreppedExample> out;
    out.reserve(examples.size());
    for (const RawExample& ex : examples) {
        ex.validate();
        out.push_back({&ex, reference.sequence_logp(ex.prompt, ex.chosen),
                       reference.sequence_logp(ex.prompt, ex.rejected)});
    }
    return out;
}

inline PreferencePair make_pair(const PreppedExample& pe, const NGramPolicy& policy) {
    const RawExample& ex = *pe.ex;
    PreferencePair p;
    p.pair_id = ex.pair_id;
    p.policy_logp_w = policy.sequence_logp(ex.prompt, ex.chosen);
    p.policy_logp_l = policy.sequence_logp(ex.prompt, ex.rejected);
    p.ref_logp_w = pe.ref_logp_w;
    p.ref_logp_l = pe.ref_logp_l;
    p.len_w = static_cast<int>(ex.chosen.size());
    p.len_l = static_cast<int>(ex.rejected.size());
    p.score_w = ex.score_w;
    p.score_l = ex.score_l;
    return p;
}

// Mean loss over the given examples and its gradient in the policy logits.
// Shared verbatim between the training step and the finite-difference check,
// so the check exercises the exact gradient path the trainer uses.
struct BatchGradient {
    BatchLoss loss;
    std::vector<double> grad;
};

template <typename Indexable>
BatchGradient batch_gradient(const std::vector<PreppedExample>& prepped, const Indexable& indices,
                             const NGramPolicy& policy, const HyperParams& hp) {
    std::vector<PreferencePair> pairs;
    pairs.reserve(indices.size());
    for (std::size_t idx : indices) pairs.push_back(make_pair(prepped[idx], policy));

    BatchGradient out{batch_loss(pairs, hp), std::vector<double>(policy.num_params(), 0.0)};
    const double inv_n = 1.0 / static_cast<double>(indices.size());
    std::size_t row = 0;
    for (std::size_t idx : indices) {
        const RawExample& ex = *prepped[idx].ex;
        const PairGradients pg = pair_gradients(pairs[row], hp);
        policy.accumulate_sequence_gradient(ex.prompt, ex.chosen, pg.d_policy_logp_w * inv_n, false, out.grad);
        policy.accumulate_sequence_gradient(ex.prompt, ex.rejected, pg.d_policy_logp_l * inv_n, false, out.grad);
        ++row;
    }
    return out;
}

} // namespace detail

inline double evaluate(const NGramPolicy& model, const NGramPolicy& reference,
                       const std::vector<RawExample>& examples, const HyperParams& hp) {
    const std::vector<PreferencePair> pairs = attach_logps(examples, model, reference);
    return batch_loss(pairs, hp).mean_loss;
}

inline TrainResult train(const std::vector<RawExample>& train_examples,
                         const std::vector<RawExample>& eval_examples,
                         const NGramPolicy& initial_model, const TrainConfig& cfg) {
    cfg.validate(train_examples.size());

    TrainResult result{initial_model, initial_model, {}};
    NGramPolicy& model = result.model;
    const NGramPolicy& reference = result.reference;

    const std::vector<detail::PreppedExample> prepped = detail::prep_examples(train_examples, reference);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(prepped.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::size_t cursor = 0;

    // Batches are drawn without replacement; when an epoch runs dry the
    // remainder is topped up from a fresh shuffle.
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch_size));
    const auto next_batch = [&] {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch[i] = order[cursor++];
        }
    };

    std::vector<double> m(model.num_params(), 0.0);
    std::vector<double> v(model.num_params(), 0.0);

    for (int step = 1; step <= cfg.steps; ++step) {
        next_batch();
        // The inputs were validated up front, so a non-finite value here can
        // only mean the policy itself has blown up.
        detail::BatchGradient bg;
        try {
            bg = detail::batch_gradient(prepped, batch, model, cfg.hp);
        } catch (const DomainError& e) {
            throw TrainingDiverged(step, "training diverged at step " + std::to_string(step) +
                                             ": " + e.what());
        }
        if (!std::isfinite(bg.loss.mean_loss)) {
            throw TrainingDiverged(step, "training diverged at step " + std::to_string(step) +
                                             ": loss = " + format_double(bg.loss.mean_loss));
        }

        const double grad_norm = clip_global_norm(bg.grad, cfg.grad_clip ? *cfg.grad_clip
                                                                         : std::numeric_limits<double>::infinity());

        const double lr = lr_at(cfg, step);
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step);
        std::vector<double>& theta = model.logits();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * bg.grad[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * bg.grad[i] * bg.grad[i];
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
            theta[i] -= lr * (update + cfg.weight_decay * theta[i]);
        }

        StepRecord rec;
        rec.step = step;
        rec.lr = lr;
        rec.train_loss = bg.loss.mean_loss;
        rec.grad_norm = grad_norm;
        double sq = 0.0, sp = 0.0, sm = 0.0, sc = 0.0;
        for (const LossBreakdown& b : bg.loss.breakdowns) {
            sq += b.w_qual;
            sp += b.w_perf;
            sm += b.reward_margin;
            sc += b.cnll_active ? 1.0 : 0.0;
        }
        const double n = static_cast<double>(bg.loss.breakdowns.size());
        rec.mean_w_qual = sq / n;
        rec.mean_w_perf = sp / n;
        rec.mean_reward_margin = sm / n;
        rec.cnll_active_frac = sc / n;
        result.metrics.steps.push_back(rec);

        if (!eval_examples.empty() && (step % cfg.eval_every == 0 || step == cfg.steps)) {
            result.metrics.evals.push_back({step, evaluate(model, reference, eval_examples, cfg.hp)});
        }
    }
    return result;
}

struct GradCheckResult {
    Variant variant = Variant::dpo;
    double max_err = 0.0; // max over coordinates of the unified rel/abs metric
    int coords_checked = 0;
};

// Compares the analytic batch gradient against central finite differences on
// a random coordinate subset. The unified error metric
//   q = |analytic - fd| / max(|analytic|, |fd|, 1e-3)
// behaves like relative error for large entries and absolute error (scaled
// by 1e3) for near-zero ones, so q <= 1e-5 certifies both regimes at once.
inline GradCheckResult grad_check(const std::vector<RawExample>& examples, const HyperParams& hp,
                                  const NGramPolicy& model, double epsilon, int min_coords = 50,
                                  std::uint64_t seed = 0) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
        throw ConfigError("grad_check: epsilon must be in [1e-7, 1e-3]");
    }
    if (examples.empty()) throw DomainError("grad_check: no examples");
    hp.validate();

    // A fixed reference distinct from the model keeps the margins nontrivial.
    NGramPolicy reference = NGramPolicy::random(model.vocab_size(), model.context_order(), seed + 1, 0.5);
    const std::vector<detail::PreppedExample> prepped = detail::prep_examples(examples, reference);
    std::vector<std::size_t> all(prepped.size());
    std::iota(all.begin(), all.end(), std::size_t{0});

    NGramPolicy probe = model;
    const detail::BatchGradient analytic = detail::batch_gradient(prepped, all, probe, hp);

    const std::size_t n_params = probe.num_params();
    const std::size_t n_coords = std::min<std::size_t>(static_cast<std::size_t>(min_coords), n_params);
    std::vector<std::size_t> coords(n_params);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(n_coords);

    const auto loss_at = [&] {
        std::vector<PreferencePair> pairs;
        pairs.reserve(prepped.size());
        for (const detail::PreppedExample& pe : prepped) pairs.push_back(detail::make_pair(pe, probe));
        return batch_loss(pairs, hp).mean_loss;
    };

    GradCheckResult out{hp.variant, 0.0, static_cast<int>(n_coords)};
    for (std::size_t c : coords) {
        const double saved = probe.logits()[c];
        probe.logits()[c] = saved + epsilon;
        const double up = loss_at();
        probe.logits()[c] = saved - epsilon;
        const double down = loss_at();
        probe.logits()[c] = saved;
        const double fd = (up - down) / (2.0 * epsilon);
        const double a = analytic.grad[c];
        const double q = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
        out.max_err = std::max(out.max_err, q);
    }
    return out;
}

inline std::vector<GradCheckResult> grad_check_all_variants(const std::vector<RawExample>& examples,
                                                            const HyperParams& base,
                                                            const NGramPolicy& model, double epsilon,
                                                            int min_coords = 50, std::uint64_t seed = 0) {
    std::vector<GradCheckResult> out;
    for (Variant v : {Variant::dpo, Variant::dpo_ln, Variant::ref_free_margin, Variant::focal_raw,
                      Variant::omni}) {
        out.push_back(grad_check(examples, hp_for_variant(base, v), model, epsilon, min_coords, seed));
    }
    return out;
}

} // namespace prefopt

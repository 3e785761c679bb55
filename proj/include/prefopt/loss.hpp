#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "prefopt/errors.hpp"

// Pairwise preference losses with closed-form gradients in the two sequence
// log-probabilities. Conventions used throughout:
//
//   reward margin   D  = beta * [(pw - rw) - (pl - rl)], optionally with each
//                        log-prob divided by its sequence length first
//   adjusted margin Da = beta*pw/Lw - beta*pl/Ll - tau_ref   (reference-free)
//   quality weight  wq = sigmoid(eta * (score_w - score_l))
//   perf weight     wp = (1 - sigmoid(Da))^gamma
//   focal weight    wf = (1 - sigmoid(D_unnormalized))^gamma
//   cNLL            -pw/Lw gated on the reference still beating the policy
//                        on the chosen response and score_w >= tau_good
//
// All variants are losses to minimize; gradients returned are d(loss)/d(pw)
// and d(loss)/d(pl) with pw, pl the total (unnormalized) log-probs.

namespace prefopt {

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow or catastrophic cancellation. Uses the
// softplus identity log sigmoid(x) = -softplus(-x); for |x| > 30 the first
// order tail expansion is already exact to double precision.
inline double stable_log_sigmoid(double x) {
    if (!std::isfinite(x)) throw DomainError("stable_log_sigmoid: non-finite input");
    if (x > 30.0) return -std::exp(-x);
    if (x < -30.0) return x - std::exp(x);
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

enum class Variant { dpo, dpo_ln, ref_free_margin, focal_raw, omni };

enum class CnllGateMode { indicator, sign };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::dpo: return "dpo";
        case Variant::dpo_ln: return "dpo_ln";
        case Variant::ref_free_margin: return "ref_free_margin";
        case Variant::focal_raw: return "focal_raw";
        case Variant::omni: return "omni";
    }
    throw DomainError("to_string: bad Variant");
}

inline const char* to_string(CnllGateMode m) {
    return m == CnllGateMode::indicator ? "indicator" : "sign";
}

struct HyperParams {
    double beta = 2.0;
    double eta = 0.7;
    double gamma = 3.0;
    double tau_ref = 0.8;
    double tau_good = 3.2;
    double lambda_nll = 0.001;
    bool length_normalized = true;
    bool enable_w_qual = true;
    bool enable_w_perf = true;
    CnllGateMode cnll_gate_mode = CnllGateMode::indicator;
    Variant variant = Variant::omni;

    void validate() const {
        if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be positive");
        if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be positive");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be >= 0");
        if (!std::isfinite(tau_ref)) throw ConfigError("tau_ref must be finite");
        if (!std::isfinite(tau_good)) throw ConfigError("tau_good must be finite");
        if (!(lambda_nll >= 0.0) || !std::isfinite(lambda_nll)) throw ConfigError("lambda_nll must be >= 0");
        if (variant == Variant::omni && !length_normalized) {
            throw ConfigError("omni requires length_normalized=true");
        }
    }
};

// Each variant is defined on a specific margin form; running dpo on
// normalized margins (or omni on raw ones) would silently change the
// objective, so mismatches are configuration errors.
inline bool variant_wants_length_norm(Variant v) {
    return v == Variant::dpo_ln || v == Variant::ref_free_margin || v == Variant::omni;
}

inline HyperParams hp_for_variant(HyperParams hp, Variant v) {
    hp.variant = v;
    hp.length_normalized = variant_wants_length_norm(v);
    return hp;
}

inline void check_variant_consistency(const HyperParams& hp) {
    if (hp.length_normalized != variant_wants_length_norm(hp.variant)) {
        throw ConfigError(std::string("variant ") + to_string(hp.variant) +
                          (hp.length_normalized ? " requires length_normalized=false"
                                                : " requires length_normalized=true"));
    }
}

struct PreferencePair {
    std::string pair_id;
    double policy_logp_w = 0.0;
    double policy_logp_l = 0.0;
    double ref_logp_w = 0.0;
    double ref_logp_l = 0.0;
    int len_w = 0;
    int len_l = 0;
    double score_w = 0.0;
    double score_l = 0.0;

    void validate() const {
        if (len_w < 1) throw DegenerateSequenceError("pair " + pair_id + ": len_w must be >= 1");
        if (len_l < 1) throw DegenerateSequenceError("pair " + pair_id + ": len_l must be >= 1");
        for (double v : {policy_logp_w, policy_logp_l, ref_logp_w, ref_logp_l}) {
            if (!std::isfinite(v)) throw DomainError("pair " + pair_id + ": non-finite log-prob");
        }
        if (!std::isfinite(score_w) || !std::isfinite(score_l)) {
            throw DomainError("pair " + pair_id + ": non-finite score");
        }
    }
};

inline double implicit_reward(double policy_logp, double ref_logp, int len, const HyperParams& hp) {
    if (len < 1) throw DegenerateSequenceError("implicit_reward: len must be >= 1");
    if (!std::isfinite(policy_logp) || !std::isfinite(ref_logp)) {
        throw DomainError("implicit_reward: non-finite log-prob");
    }
    const double diff = policy_logp - ref_logp;
    return hp.length_normalized ? hp.beta / static_cast<double>(len) * diff : hp.beta * diff;
}

inline double reward_margin(const PreferencePair& p, const HyperParams& hp) {
    return implicit_reward(p.policy_logp_w, p.ref_logp_w, p.len_w, hp) -
           implicit_reward(p.policy_logp_l, p.ref_logp_l, p.len_l, hp);
}

inline double quality_weight(double score_w, double score_l, double eta) {
    if (!std::isfinite(score_w) || !std::isfinite(score_l)) {
        throw DomainError("quality_weight: non-finite score");
    }
    if (!(eta > 0.0)) throw ConfigError("quality_weight: eta must be positive");
    return sigmoid(eta * (score_w - score_l));
}

namespace detail {

// (1 - sigmoid(x))^gamma evaluated as exp(gamma * log sigmoid(-x)). Exact 1
// at gamma = 0 and no 1-sigmoid cancellation when x is very negative.
inline double one_minus_sigmoid_pow(double x, double gamma) {
    return std::exp(gamma * stable_log_sigmoid(-x));
}

inline double unnormalized_margin(const PreferencePair& p, const HyperParams& hp) {
    return hp.beta * ((p.policy_logp_w - p.ref_logp_w) - (p.policy_logp_l - p.ref_logp_l));
}

inline double adjusted_margin(const PreferencePair& p, const HyperParams& hp) {
    return hp.beta * p.policy_logp_w / static_cast<double>(p.len_w) -
           hp.beta * p.policy_logp_l / static_cast<double>(p.len_l) - hp.tau_ref;
}

// Shared bracket of the focal-style gradient: (1-s(a))^g * (1-s(d) - g*s(a)*log s(d))
// with a the margin the weight saw and d the margin the log-sigmoid loss saw.
// For focal_raw they coincide; for omni a is the adjusted policy margin.
inline double focal_bracket(double weight_margin, double loss_margin, double gamma) {
    const double w = one_minus_sigmoid_pow(weight_margin, gamma);
    return w * (sigmoid(-loss_margin) - gamma * sigmoid(weight_margin) * stable_log_sigmoid(loss_margin));
}

} // namespace detail

// Raw focal weight on the unnormalized reward margin, independent of
// hp.length_normalized by definition.
inline double focal_weight_raw(const PreferencePair& p, const HyperParams& hp) {
    p.validate();
    return detail::one_minus_sigmoid_pow(detail::unnormalized_margin(p, hp), hp.gamma);
}

// Performance weight: down-weights pairs the policy already separates by
// more than tau_ref on normalized log-probs. Reference-free on purpose.
inline double perf_weight(const PreferencePair& p, const HyperParams& hp) {
    p.validate();
    if (!hp.length_normalized) throw ConfigError("perf_weight requires length_normalized=true");
    return detail::one_minus_sigmoid_pow(detail::adjusted_margin(p, hp), hp.gamma);
}

struct CnllTerm {
    double value = 0.0; // unscaled by lambda
    bool active = false;
};

// Calibrated NLL on the chosen response: only pushes when the reference
// still assigns it more mass than the policy and the response is actually
// good. In sign mode the indicator becomes sign(ref - policy), so an
// overshooting policy is pulled back toward the reference.
inline CnllTerm cnll_term(const PreferencePair& p, const HyperParams& hp) {
    p.validate();
    const bool score_ok = p.score_w >= hp.tau_good;
    const double norm_nll = -p.policy_logp_w / static_cast<double>(p.len_w);
    if (hp.cnll_gate_mode == CnllGateMode::indicator) {
        const bool active = score_ok && p.ref_logp_w > p.policy_logp_w;
        return {active ? norm_nll : 0.0, active};
    }
    double s = 0.0;
    if (score_ok) {
        const double d = p.ref_logp_w - p.policy_logp_w;
        s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
    return {s * norm_nll, s != 0.0};
}

// Signed gate coefficient the cNLL term contributes to the chosen-side
// gradient: 0/1 in indicator mode, -1/0/1 in sign mode.
inline double cnll_gate(const PreferencePair& p, const HyperParams& hp) {
    const CnllTerm t = cnll_term(p, hp);
    if (!t.active) return 0.0;
    if (hp.cnll_gate_mode == CnllGateMode::indicator) return 1.0;
    return p.ref_logp_w > p.policy_logp_w ? 1.0 : -1.0;
}

struct LossBreakdown {
    double reward_margin = 0.0; // the margin this variant's loss saw
    double policy_margin = 0.0; // beta * (pw/Lw - pl/Ll), diagnostic
    double w_qual = 1.0;
    double w_perf = 1.0; // focal weight for focal_raw, perf weight for omni
    bool cnll_active = false;
    double cnll_value = 0.0; // unscaled by lambda
    double loss = 0.0;
    double gc_pos = 0.0;
    double gc_neg = 0.0;
};

struct PairGradients {
    double d_policy_logp_w = 0.0;
    double d_policy_logp_l = 0.0;
};

struct GradientCoefficients {
    double pos = 0.0;
    double neg = 0.0;
};

// Per-sample gradient coefficients in the unified form
//   d(loss) = -GC_pos/Lw * d(pw) + GC_neg/Ll * d(pl)   (normalized variants)
//   d(loss) = -beta*GC_pos * d(pw) + beta*GC_neg * d(pl) (raw variants, GC beta-free)
// The simple variants are conventionally reported beta-free; omni includes
// beta so the cNLL offset lambda is on the same scale.
inline GradientCoefficients gradient_coefficients(const PreferencePair& p, const HyperParams& hp) {
    p.validate();
    hp.validate();
    check_variant_consistency(hp);
    switch (hp.variant) {
        case Variant::dpo: {
            const double c = sigmoid(-detail::unnormalized_margin(p, hp));
            return {c, c};
        }
        case Variant::dpo_ln: {
            const double c = sigmoid(-reward_margin(p, hp));
            return {c, c};
        }
        case Variant::ref_free_margin: {
            const double c = sigmoid(-detail::adjusted_margin(p, hp));
            return {c, c};
        }
        case Variant::focal_raw: {
            const double d = detail::unnormalized_margin(p, hp);
            const double c = detail::focal_bracket(d, d, hp.gamma);
            return {c, c};
        }
        case Variant::omni: {
            const double dr = reward_margin(p, hp);
            const double wq = hp.enable_w_qual ? quality_weight(p.score_w, p.score_l, hp.eta) : 1.0;
            const double k = hp.enable_w_perf
                                 ? detail::focal_bracket(detail::adjusted_margin(p, hp), dr, hp.gamma)
                                 : sigmoid(-dr);
            const double neg = hp.beta * wq * k;
            return {neg + hp.lambda_nll * cnll_gate(p, hp), neg};
        }
    }
    throw DomainError("gradient_coefficients: bad variant");
}

inline LossBreakdown pair_loss(const PreferencePair& p, const HyperParams& hp) {
    p.validate();
    hp.validate();
    check_variant_consistency(hp);

    LossBreakdown out;
    out.policy_margin = hp.beta * (p.policy_logp_w / static_cast<double>(p.len_w) -
                                   p.policy_logp_l / static_cast<double>(p.len_l));

    switch (hp.variant) {
        case Variant::dpo:
        case Variant::dpo_ln: {
            out.reward_margin = reward_margin(p, hp);
            out.loss = -stable_log_sigmoid(out.reward_margin);
            break;
        }
        case Variant::ref_free_margin: {
            // Diagnostic margin stays the true reward margin; the loss runs
            // on the reference-free adjusted one.
            out.reward_margin = reward_margin(p, hp);
            out.loss = -stable_log_sigmoid(detail::adjusted_margin(p, hp));
            break;
        }
        case Variant::focal_raw: {
            out.reward_margin = reward_margin(p, hp);
            out.w_perf = focal_weight_raw(p, hp);
            out.loss = out.w_perf * -stable_log_sigmoid(out.reward_margin);
            break;
        }
        case Variant::omni: {
            out.reward_margin = reward_margin(p, hp);
            if (hp.enable_w_qual) out.w_qual = quality_weight(p.score_w, p.score_l, hp.eta);
            if (hp.enable_w_perf) out.w_perf = perf_weight(p, hp);
            const CnllTerm t = cnll_term(p, hp);
            out.cnll_active = t.active;
            out.cnll_value = t.value;
            out.loss = out.w_qual * out.w_perf * -stable_log_sigmoid(out.reward_margin) +
                       hp.lambda_nll * t.value;
            break;
        }
    }

    const GradientCoefficients gc = gradient_coefficients(p, hp);
    out.gc_pos = gc.pos;
    out.gc_neg = gc.neg;
    return out;
}

// Closed-form gradients, written out per variant rather than routed through
// gradient_coefficients so the two stay independently checkable.
inline PairGradients pair_gradients(const PreferencePair& p, const HyperParams& hp) {
    p.validate();
    hp.validate();
    check_variant_consistency(hp);

    const double lw = static_cast<double>(p.len_w);
    const double ll = static_cast<double>(p.len_l);

    switch (hp.variant) {
        case Variant::dpo: {
            const double s = sigmoid(-detail::unnormalized_margin(p, hp));
            return {-hp.beta * s, hp.beta * s};
        }
        case Variant::dpo_ln: {
            const double s = sigmoid(-reward_margin(p, hp));
            return {-hp.beta / lw * s, hp.beta / ll * s};
        }
        case Variant::ref_free_margin: {
            const double s = sigmoid(-detail::adjusted_margin(p, hp));
            return {-hp.beta / lw * s, hp.beta / ll * s};
        }
        case Variant::focal_raw: {
            const double d = detail::unnormalized_margin(p, hp);
            const double w = detail::one_minus_sigmoid_pow(d, hp.gamma);
            const double b = w * (sigmoid(-d) - hp.gamma * sigmoid(d) * stable_log_sigmoid(d));
            return {-hp.beta * b, hp.beta * b};
        }
        case Variant::omni: {
            const double dr = reward_margin(p, hp);
            const double wq = hp.enable_w_qual ? quality_weight(p.score_w, p.score_l, hp.eta) : 1.0;
            double k;
            if (hp.enable_w_perf) {
                const double da = detail::adjusted_margin(p, hp);
                const double wp = detail::one_minus_sigmoid_pow(da, hp.gamma);
                k = wp * (sigmoid(-dr) - hp.gamma * sigmoid(da) * stable_log_sigmoid(dr));
            } else {
                k = sigmoid(-dr);
            }
            const double base = hp.beta * wq * k;
            const double gate = cnll_gate(p, hp);
            return {-(base + hp.lambda_nll * gate) / lw, base / ll};
        }
    }
    throw DomainError("pair_gradients: bad variant");
}

struct BatchLoss {
    double mean_loss = 0.0;
    std::vector<LossBreakdown> breakdowns;
};

inline BatchLoss batch_loss(std::span<const PreferencePair> pairs, const HyperParams& hp) {
    if (pairs.empty()) throw DomainError("batch_loss: empty batch");
    BatchLoss out;
    out.breakdowns.reserve(pairs.size());
    double sum = 0.0;
    for (const PreferencePair& p : pairs) {
        out.breakdowns.push_back(pair_loss(p, hp));
        sum += out.breakdowns.back().loss;
    }
    out.mean_loss = sum / static_cast<double>(pairs.size());
    return out;
}

} // namespace prefopt

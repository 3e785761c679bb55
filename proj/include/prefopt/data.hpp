#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefopt/errors.hpp"
#include "prefopt/loss.hpp"
#include "prefopt/policy.hpp"
#include "prefopt/rng.hpp"

// Synthetic preference data and its JSONL serialization. Two record kinds
// share one file format:
//   raw:         pair_id, prompt, chosen, rejected, score_w, score_l
//   precomputed: pair_id, policy_logp_w/l, ref_logp_w/l, len_w, len_l,
//                score_w, score_l (token arrays dropped)
// A file's kind is detected from its first record.

namespace prefopt {

struct RawExample {
    std::string pair_id;
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
    double score_w = 0.0;
    double score_l = 0.0;

    void validate() const {
        if (chosen.empty()) throw DegenerateSequenceError("pair " + pair_id + ": empty chosen response");
        if (rejected.empty()) throw DegenerateSequenceError("pair " + pair_id + ": empty rejected response");
        if (!std::isfinite(score_w) || !std::isfinite(score_l)) {
            throw DomainError("pair " + pair_id + ": non-finite score");
        }
    }

    bool operator==(const RawExample&) const = default;
};

struct GenConfig {
    int vocab_size = 16;
    int prompt_len = 4;
    int response_len_min = 6;
    int response_len_max = 12;
    int n_pairs = 2000;
    std::uint64_t seed = 42;
    double teacher_gap = 4.0;  // sharpness multiplier separating the teachers
    double score_noise = 0.25; // stddev of noise on the per-token quality gap
    double label_noise = 0.3;  // probability a pair's labels get swapped

    void validate() const {
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (prompt_len < 1) throw ConfigError("prompt_len must be >= 1");
        if (response_len_min < 1) throw ConfigError("response_len_min must be >= 1");
        if (response_len_max < response_len_min) throw ConfigError("response_len_max must be >= response_len_min");
        if (n_pairs < 1) throw ConfigError("n_pairs must be >= 1");
        if (!(teacher_gap >= 0.0) || !std::isfinite(teacher_gap)) throw ConfigError("teacher_gap must be >= 0");
        if (!(score_noise >= 0.0) || !std::isfinite(score_noise)) throw ConfigError("score_noise must be >= 0");
        if (!(label_noise >= 0.0) || !(label_noise <= 1.0)) throw ConfigError("label_noise must be in [0, 1]");
    }
};

namespace detail {

// Maps the per-token teacher log-likelihood gap onto the 0..5 score scale.
// The slope is tuned so clean-data chosen scores cluster a bit above the
// cnll gate threshold while rejected ones land well below it.
inline double squash_score(double gap) {
    constexpr double scale = 0.9;
    return 5.0 * sigmoid(scale * gap);
}

} // namespace detail

// Two bigram teachers share one random logit table; the good one sharpens it
// by (1 + teacher_gap). Chosen responses are sampled from the good teacher,
// rejected ones from the bad teacher, and scores are the squashed per-token
// log-likelihood gap between the teachers plus optional noise. label_noise
// swaps a pair's responses and scores after scoring, producing genuinely
// mislabeled preferences.
inline std::vector<RawExample> generate_synthetic(const GenConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    NGramPolicy bad(cfg.vocab_size, 1);
    for (double& v : bad.logits()) v = rng.normal();
    NGramPolicy good = bad;
    for (double& v : good.logits()) v *= 1.0 + cfg.teacher_gap;

    std::vector<RawExample> out;
    out.reserve(static_cast<std::size_t>(cfg.n_pairs));
    for (int i = 0; i < cfg.n_pairs; ++i) {
        RawExample ex;
        char id[16];
        std::snprintf(id, sizeof id, "pair-%06d", i);
        ex.pair_id = id;

        ex.prompt.resize(static_cast<std::size_t>(cfg.prompt_len));
        for (int& t : ex.prompt) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));

        const auto sample_response = [&](const NGramPolicy& teacher, std::vector<int>& resp) {
            resp.resize(static_cast<std::size_t>(rng.int_in(cfg.response_len_min, cfg.response_len_max)));
            std::vector<int> history = ex.prompt;
            for (int& t : resp) {
                t = sample_next_token(teacher, history, rng);
                history.push_back(t);
            }
        };
        sample_response(good, ex.chosen);
        sample_response(bad, ex.rejected);

        const auto teacher_gap_per_token = [&](const std::vector<int>& resp) {
            return (good.sequence_logp(ex.prompt, resp) - bad.sequence_logp(ex.prompt, resp)) /
                   static_cast<double>(resp.size());
        };
        ex.score_w = detail::squash_score(teacher_gap_per_token(ex.chosen) + cfg.score_noise * rng.normal());
        ex.score_l = detail::squash_score(teacher_gap_per_token(ex.rejected) + cfg.score_noise * rng.normal());

        if (rng.uniform() < cfg.label_noise) {
            std::swap(ex.chosen, ex.rejected);
            std::swap(ex.score_w, ex.score_l);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

// Scores both responses under the policy and a frozen reference, producing
// the flat records the loss layer consumes.
inline std::vector<PreferencePair> attach_logps(const std::vector<RawExample>& examples,
                                                const NGramPolicy& policy,
                                                const NGramPolicy& reference) {
    std::vector<PreferencePair> out;
    out.reserve(examples.size());
    for (const RawExample& ex : examples) {
        ex.validate();
        PreferencePair p;
        p.pair_id = ex.pair_id;
        p.policy_logp_w = policy.sequence_logp(ex.prompt, ex.chosen);
        p.policy_logp_l = policy.sequence_logp(ex.prompt, ex.rejected);
        p.ref_logp_w = reference.sequence_logp(ex.prompt, ex.chosen);
        p.ref_logp_l = reference.sequence_logp(ex.prompt, ex.rejected);
        p.len_w = static_cast<int>(ex.chosen.size());
        p.len_l = static_cast<int>(ex.rejected.size());
        p.score_w = ex.score_w;
        p.score_l = ex.score_l;
        out.push_back(std::move(p));
    }
    return out;
}

using Dataset = std::variant<std::vector<RawExample>, std::vector<PreferencePair>>;

namespace detail {

inline const std::vector<std::string>& raw_fields() {
    static const std::vector<std::string> f = {"pair_id", "prompt", "chosen",
                                               "rejected", "score_w", "score_l"};
    return f;
}

inline const std::vector<std::string>& pair_fields() {
    static const std::vector<std::string> f = {"pair_id", "policy_logp_w", "policy_logp_l",
                                               "ref_logp_w", "ref_logp_l", "len_w",
                                               "len_l", "score_w", "score_l"};
    return f;
}

inline void check_fields(const nlohmann::json& j, const std::vector<std::string>& required,
                         bool strict, const std::string& where) {
    for (const std::string& f : required) {
        if (!j.contains(f)) throw SchemaError(where + ": missing required field \"" + f + "\"");
    }
    if (strict) {
        for (const auto& [key, value] : j.items()) {
            if (std::find(required.begin(), required.end(), key) == required.end()) {
                throw SchemaError(where + ": unknown field \"" + key + "\" (strict mode)");
            }
        }
    }
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw SchemaError(where + ": field \"" + key + "\" has the wrong type");
    }
}

inline void check_tokens(const std::vector<int>& toks, const std::string& key, const std::string& where) {
    for (int t : toks) {
        if (t < 0) throw SchemaError(where + ": " + key + " contains a negative token");
    }
}

inline RawExample raw_from_json(const nlohmann::json& j, bool strict, const std::string& where) {
    check_fields(j, raw_fields(), strict, where);
    RawExample ex;
    ex.pair_id = get_field<std::string>(j, "pair_id", where);
    ex.prompt = get_field<std::vector<int>>(j, "prompt", where);
    ex.chosen = get_field<std::vector<int>>(j, "chosen", where);
    ex.rejected = get_field<std::vector<int>>(j, "rejected", where);
    ex.score_w = get_field<double>(j, "score_w", where);
    ex.score_l = get_field<double>(j, "score_l", where);
    check_tokens(ex.prompt, "prompt", where);
    check_tokens(ex.chosen, "chosen", where);
    check_tokens(ex.rejected, "rejected", where);
    if (ex.chosen.empty()) throw SchemaError(where + ": chosen must be non-empty");
    if (ex.rejected.empty()) throw SchemaError(where + ": rejected must be non-empty");
    if (!std::isfinite(ex.score_w) || !std::isfinite(ex.score_l)) {
        throw SchemaError(where + ": scores must be finite");
    }
    return ex;
}

inline PreferencePair pair_from_json(const nlohmann::json& j, bool strict, const std::string& where) {
    check_fields(j, pair_fields(), strict, where);
    PreferencePair p;
    p.pair_id = get_field<std::string>(j, "pair_id", where);
    p.policy_logp_w = get_field<double>(j, "policy_logp_w", where);
    p.policy_logp_l = get_field<double>(j, "policy_logp_l", where);
    p.ref_logp_w = get_field<double>(j, "ref_logp_w", where);
    p.ref_logp_l = get_field<double>(j, "ref_logp_l", where);
    p.len_w = get_field<int>(j, "len_w", where);
    p.len_l = get_field<int>(j, "len_l", where);
    p.score_w = get_field<double>(j, "score_w", where);
    p.score_l = get_field<double>(j, "score_l", where);
    if (p.len_w < 1) throw SchemaError(where + ": len_w must be >= 1");
    if (p.len_l < 1) throw SchemaError(where + ": len_l must be >= 1");
    for (double v : {p.policy_logp_w, p.policy_logp_l, p.ref_logp_w, p.ref_logp_l}) {
        if (!std::isfinite(v)) throw SchemaError(where + ": log-probs must be finite");
    }
    if (!std::isfinite(p.score_w) || !std::isfinite(p.score_l)) {
        throw SchemaError(where + ": scores must be finite");
    }
    return p;
}

inline nlohmann::json to_json(const RawExample& ex) {
    return nlohmann::json{{"pair_id", ex.pair_id}, {"prompt", ex.prompt},
                          {"chosen", ex.chosen},   {"rejected", ex.rejected},
                          {"score_w", ex.score_w}, {"score_l", ex.score_l}};
}

inline nlohmann::json to_json(const PreferencePair& p) {
    return nlohmann::json{{"pair_id", p.pair_id},
                          {"policy_logp_w", p.policy_logp_w},
                          {"policy_logp_l", p.policy_logp_l},
                          {"ref_logp_w", p.ref_logp_w},
                          {"ref_logp_l", p.ref_logp_l},
                          {"len_w", p.len_w},
                          {"len_l", p.len_l},
                          {"score_w", p.score_w},
                          {"score_l", p.score_l}};
}

template <typename T>
void save_jsonl_impl(const std::vector<T>& records, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const T& r : records) out << to_json(r).dump() << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace detail

inline void save_jsonl(const std::vector<RawExample>& records, const std::filesystem::path& path) {
    detail::save_jsonl_impl(records, path);
}

inline void save_jsonl(const std::vector<PreferencePair>& records, const std::filesystem::path& path) {
    detail::save_jsonl_impl(records, path);
}

// Loads a JSONL dataset, detecting raw vs precomputed from the first record.
// strict=true rejects unknown fields; strict=false ignores them.
inline Dataset load_jsonl(const std::filesystem::path& path, bool strict = true) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());

    std::vector<RawExample> raws;
    std::vector<PreferencePair> pairs;
    bool decided = false;
    bool precomputed = false;

    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
        if (!j.is_object()) throw SchemaError(where + ": record must be a JSON object");
        if (!decided) {
            precomputed = j.contains("policy_logp_w");
            decided = true;
        }
        if (precomputed) {
            pairs.push_back(detail::pair_from_json(j, strict, where));
        } else {
            raws.push_back(detail::raw_from_json(j, strict, where));
        }
    }
    if (!decided) throw SchemaError(path.string() + ": no records");
    if (precomputed) return pairs;
    return raws;
}

inline std::vector<RawExample> load_raw_jsonl(const std::filesystem::path& path, bool strict = true) {
    Dataset d = load_jsonl(path, strict);
    if (!std::holds_alternative<std::vector<RawExample>>(d)) {
        throw SchemaError(path.string() + ": expected raw records, found precomputed ones");
    }
    return std::get<std::vector<RawExample>>(std::move(d));
}

inline std::vector<PreferencePair> load_pair_jsonl(const std::filesystem::path& path, bool strict = true) {
    Dataset d = load_jsonl(path, strict);
    if (!std::holds_alternative<std::vector<PreferencePair>>(d)) {
        throw SchemaError(path.string() + ": expected precomputed records, found raw ones");
    }
    return std::get<std::vector<PreferencePair>>(std::move(d));
}

} // namespace prefopt

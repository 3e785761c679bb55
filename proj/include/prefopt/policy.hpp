#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefopt/errors.hpp"
#include "prefopt/rng.hpp"

namespace prefopt {

// Tabular n-gram policy: one logit row per context, softmax over the next
// token. Contexts are the last `context_order` tokens; positions before the
// sequence start are padded with token 0, which keeps the table a fixed
// vocab^order x vocab rectangle and makes every position differentiable.
class NGramPolicy {
public:
    NGramPolicy(int vocab_size, int context_order)
        : vocab_(vocab_size), order_(context_order) {
        if (vocab_ < 2) throw ConfigError("NGramPolicy: vocab_size must be >= 2");
        if (order_ < 1 || order_ > 3) throw ConfigError("NGramPolicy: context_order must be in [1, 3]");
        std::size_t contexts = 1;
        for (int i = 0; i < order_; ++i) contexts *= static_cast<std::size_t>(vocab_);
        logits_.assign(contexts * static_cast<std::size_t>(vocab_), 0.0);
    }

    static NGramPolicy random(int vocab_size, int context_order, std::uint64_t seed, double scale = 1.0) {
        NGramPolicy p(vocab_size, context_order);
        Rng rng(seed);
        for (double& v : p.logits_) v = scale * rng.normal();
        return p;
    }

    int vocab_size() const { return vocab_; }
    int context_order() const { return order_; }
    std::size_t num_contexts() const { return logits_.size() / static_cast<std::size_t>(vocab_); }
    std::size_t num_params() const { return logits_.size(); }

    std::vector<double>& logits() { return logits_; }
    const std::vector<double>& logits() const { return logits_; }

    // history = every token before the position being predicted (prompt
    // included); only the last `order` entries matter.
    std::size_t context_id(std::span<const int> history) const {
        std::size_t id = 0;
        for (int k = order_; k >= 1; --k) {
            const int tok = history.size() >= static_cast<std::size_t>(k)
                                ? history[history.size() - static_cast<std::size_t>(k)]
                                : 0;
            check_token(tok);
            id = id * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(tok);
        }
        return id;
    }

    // Log-probability of the whole response given the prompt: sum of
    // next-token log-softmax terms over response positions only.
    double sequence_logp(std::span<const int> prompt, std::span<const int> response) const {
        if (response.empty()) throw DegenerateSequenceError("sequence_logp: empty response");
        for (int t : prompt) check_token(t);
        for (int t : response) check_token(t);

        std::vector<int> history(prompt.begin(), prompt.end());
        history.reserve(prompt.size() + response.size());
        double total = 0.0;
        for (int tok : response) {
            const std::size_t ctx = context_id(history);
            total += row_log_prob(ctx, tok);
            history.push_back(tok);
        }
        return total;
    }

    std::vector<double> next_token_log_probs(std::span<const int> history) const {
        for (int t : history) check_token(t);
        const std::size_t ctx = context_id(history);
        const double lse = row_lse(ctx);
        std::vector<double> out(static_cast<std::size_t>(vocab_));
        for (int i = 0; i < vocab_; ++i) {
            out[static_cast<std::size_t>(i)] = logits_[ctx * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(i)] - lse;
        }
        return out;
    }

    // Adds coeff * d(sequence_logp)/d(logits) into grad. Softmax rows give
    // the familiar (onehot - prob) per visited context. With normalize the
    // contribution is divided by the response length.
    void accumulate_sequence_gradient(std::span<const int> prompt, std::span<const int> response,
                                      double coeff, bool normalize, std::vector<double>& grad) const {
        if (response.empty()) throw DegenerateSequenceError("accumulate_sequence_gradient: empty response");
        if (grad.size() != logits_.size()) {
            throw DomainError("accumulate_sequence_gradient: grad buffer has wrong size");
        }
        for (int t : prompt) check_token(t);
        for (int t : response) check_token(t);

        const double scale = normalize ? coeff / static_cast<double>(response.size()) : coeff;
        std::vector<int> history(prompt.begin(), prompt.end());
        history.reserve(prompt.size() + response.size());
        std::vector<double> probs(static_cast<std::size_t>(vocab_));
        for (int tok : response) {
            const std::size_t ctx = context_id(history);
            row_probs(ctx, probs);
            double* g = grad.data() + ctx * static_cast<std::size_t>(vocab_);
            for (int i = 0; i < vocab_; ++i) g[i] -= scale * probs[static_cast<std::size_t>(i)];
            g[tok] += scale;
            history.push_back(tok);
        }
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json j;
        j["format_version"] = 1;
        j["vocab_size"] = vocab_;
        j["context_order"] = order_;
        j["logits"] = logits_;
        std::ofstream out(path);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out << j.dump() << '\n';
        if (!out) throw IoError("write failed for " + path.string());
    }

    static NGramPolicy load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("vocab_size") || !j.contains("context_order") || !j.contains("logits")) {
            throw SchemaError(path.string() + ": checkpoint needs vocab_size, context_order, logits");
        }
        int vocab = 0;
        int order = 0;
        std::vector<double> logits;
        try {
            if (j.value("format_version", 1) != 1) {
                throw SchemaError(path.string() + ": unsupported format_version");
            }
            vocab = j.at("vocab_size").get<int>();
            order = j.at("context_order").get<int>();
            logits = j.at("logits").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(path.string() + ": " + e.what());
        }
        NGramPolicy p(vocab, order);
        if (logits.size() != p.logits_.size()) {
            throw SchemaError(path.string() + ": logits length does not match vocab_size^context_order * vocab_size");
        }
        for (double v : logits) {
            if (!std::isfinite(v)) throw SchemaError(path.string() + ": non-finite logit");
        }
        p.logits_ = std::move(logits);
        return p;
    }

    bool operator==(const NGramPolicy& other) const = default;

private:
    void check_token(int tok) const {
        if (tok < 0 || tok >= vocab_) {
            throw DomainError("token " + std::to_string(tok) + " outside vocab of size " + std::to_string(vocab_));
        }
    }

    double row_lse(std::size_t ctx) const {
        const double* row = logits_.data() + ctx * static_cast<std::size_t>(vocab_);
        double m = row[0];
        for (int i = 1; i < vocab_; ++i) m = std::max(m, row[i]);
        double s = 0.0;
        for (int i = 0; i < vocab_; ++i) s += std::exp(row[i] - m);
        return m + std::log(s);
    }

    double row_log_prob(std::size_t ctx, int tok) const {
        return logits_[ctx * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(tok)] - row_lse(ctx);
    }

    void row_probs(std::size_t ctx, std::vector<double>& out) const {
        const double* row = logits_.data() + ctx * static_cast<std::size_t>(vocab_);
        double m = row[0];
        for (int i = 1; i < vocab_; ++i) m = std::max(m, row[i]);
        double s = 0.0;
        for (int i = 0; i < vocab_; ++i) {
            out[static_cast<std::size_t>(i)] = std::exp(row[i] - m);
            s += out[static_cast<std::size_t>(i)];
        }
        for (int i = 0; i < vocab_; ++i) out[static_cast<std::size_t>(i)] /= s;
    }

    int vocab_;
    int order_;
    std::vector<double> logits_;
};

// Samples one next token from the policy's softmax row. Lives here so data
// generation and any demo sampling share one implementation.
inline int sample_next_token(const NGramPolicy& policy, std::span<const int> history, Rng& rng) {
    const std::vector<double> logp = policy.next_token_log_probs(history);
    const double u = rng.uniform();
    double cum = 0.0;
    for (std::size_t i = 0; i < logp.size(); ++i) {
        cum += std::exp(logp[i]);
        if (u < cum) return static_cast<int>(i);
    }
    return policy.vocab_size() - 1; // rounding leftovers land on the last token
}

} // namespace prefopt

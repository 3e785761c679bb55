#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefopt/data.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/loss.hpp"
#include "prefopt/trainer.hpp"

// Flat key=value configuration shared by all subcommands. Precedence is
// compiled-in defaults < config file < --set overrides < named flags; the
// resolved result is echoed into every manifest.

namespace prefopt {

using KvPairs = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(const std::string& s) {
    const std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline double parse_double_value(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key " + key + ": expected a number, got \"" + value + "\"");
    }
}

inline long long parse_int_value(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key " + key + ": expected an integer, got \"" + value + "\"");
    }
}

inline std::uint64_t parse_u64_value(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key " + key + ": expected an unsigned integer, got \"" + value + "\"");
    }
}

inline bool parse_bool_value(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw UsageError("config key " + key + ": expected true/false, got \"" + value + "\"");
}

} // namespace detail

inline Variant parse_variant(const std::string& s) {
    if (s == "dpo") return Variant::dpo;
    if (s == "dpo_ln") return Variant::dpo_ln;
    if (s == "ref_free_margin") return Variant::ref_free_margin;
    if (s == "focal_raw") return Variant::focal_raw;
    if (s == "omni") return Variant::omni;
    throw UsageError("unknown variant \"" + s + "\" (expected dpo, dpo_ln, ref_free_margin, focal_raw, omni)");
}

inline Schedule parse_schedule(const std::string& s) {
    if (s == "cosine") return Schedule::cosine;
    if (s == "constant") return Schedule::constant;
    throw UsageError("unknown schedule \"" + s + "\" (expected cosine or constant)");
}

inline CnllGateMode parse_gate_mode(const std::string& s) {
    if (s == "indicator") return CnllGateMode::indicator;
    if (s == "sign") return CnllGateMode::sign;
    throw UsageError("unknown cnll_gate_mode \"" + s + "\" (expected indicator or sign)");
}

// Reads key = value lines. '#' starts a comment (whole-line or trailing);
// blank lines are skipped. Returned in file order so later lines win.
inline KvPairs parse_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    KvPairs out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = detail::trim(line);
        if (t.empty()) continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": empty key");
        }
        out.emplace_back(key, value);
    }
    return out;
}

// Splits "key=value" (as passed to --set) into a pair.
inline std::pair<std::string, std::string> parse_kv_arg(const std::string& arg) {
    const std::size_t eq = arg.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got \"" + arg + "\"");
    const std::string key = detail::trim(arg.substr(0, eq));
    if (key.empty()) throw UsageError("--set expects key=value, got \"" + arg + "\"");
    return {key, detail::trim(arg.substr(eq + 1))};
}

// Every tunable in one place. Defaults here are the shipped defaults; the
// checked-in configs/default.cfg restates them.
struct RunConfig {
    // objective
    Variant variant = Variant::omni;
    double beta = 2.0;
    double eta = 0.7;
    double gamma = 3.0;
    double tau_ref = 0.8;
    double tau_good = 3.2;
    double lambda_nll = 0.001;
    std::optional<bool> length_normalized; // unset = follow the variant
    bool enable_w_qual = true;
    bool enable_w_perf = true;
    CnllGateMode cnll_gate_mode = CnllGateMode::indicator;

    // optimizer
    int steps = 2000;
    int batch_size = 64;
    double lr_peak = 0.05;
    double warmup_ratio = 0.1;
    Schedule schedule = Schedule::cosine;
    int eval_every = 50;
    std::optional<double> grad_clip;

    // data
    int vocab_size = 16;
    int prompt_len = 4;
    int response_len_min = 6;
    int response_len_max = 12;
    int n_pairs = 2000;
    double teacher_gap = 4.0;
    double score_noise = 0.25;
    double label_noise = 0.3;
    std::uint64_t seed = 42;
    double eval_fraction = 0.5;

    // policy
    int context_order = 1;
    double init_scale = 0.5;

    // grad-check
    double gc_epsilon = 1e-5;
    int gc_coords = 64;
    int gc_pairs = 100;

    // curves
    double curve_delta_min = -8.0;
    double curve_delta_max = 8.0;
    double curve_delta_step = 0.25;
    std::string curve_gammas = "0,0.5,1,2,3,5";

    // analyze
    bool median_split = true;

    void apply(const std::string& key, const std::string& value) {
        using namespace detail;
        if (key == "variant") variant = parse_variant(value);
        else if (key == "beta") beta = parse_double_value(key, value);
        else if (key == "eta") eta = parse_double_value(key, value);
        else if (key == "gamma") gamma = parse_double_value(key, value);
        else if (key == "tau_ref") tau_ref = parse_double_value(key, value);
        else if (key == "tau_good") tau_good = parse_double_value(key, value);
        else if (key == "lambda_nll") lambda_nll = parse_double_value(key, value);
        else if (key == "length_normalized") {
            if (value == "auto") length_normalized.reset();
            else length_normalized = parse_bool_value(key, value);
        }
        else if (key == "enable_w_qual") enable_w_qual = parse_bool_value(key, value);
        else if (key == "enable_w_perf") enable_w_perf = parse_bool_value(key, value);
        else if (key == "cnll_gate_mode") cnll_gate_mode = parse_gate_mode(value);
        else if (key == "steps") steps = static_cast<int>(parse_int_value(key, value));
        else if (key == "batch_size") batch_size = static_cast<int>(parse_int_value(key, value));
        else if (key == "lr_peak") lr_peak = parse_double_value(key, value);
        else if (key == "warmup_ratio") warmup_ratio = parse_double_value(key, value);
        else if (key == "schedule") schedule = parse_schedule(value);
        else if (key == "eval_every") eval_every = static_cast<int>(parse_int_value(key, value));
        else if (key == "grad_clip") {
            if (value == "none") grad_clip.reset();
            else grad_clip = parse_double_value(key, value);
        }
        else if (key == "vocab_size") vocab_size = static_cast<int>(parse_int_value(key, value));
        else if (key == "prompt_len") prompt_len = static_cast<int>(parse_int_value(key, value));
        else if (key == "response_len_min") response_len_min = static_cast<int>(parse_int_value(key, value));
        else if (key == "response_len_max") response_len_max = static_cast<int>(parse_int_value(key, value));
        else if (key == "n_pairs") n_pairs = static_cast<int>(parse_int_value(key, value));
        else if (key == "teacher_gap") teacher_gap = parse_double_value(key, value);
        else if (key == "score_noise") score_noise = parse_double_value(key, value);
        else if (key == "label_noise") label_noise = parse_double_value(key, value);
        else if (key == "seed") seed = parse_u64_value(key, value);
        else if (key == "eval_fraction") eval_fraction = parse_double_value(key, value);
        else if (key == "context_order") context_order = static_cast<int>(parse_int_value(key, value));
        else if (key == "init_scale") init_scale = parse_double_value(key, value);
        else if (key == "gc_epsilon") gc_epsilon = parse_double_value(key, value);
        else if (key == "gc_coords") gc_coords = static_cast<int>(parse_int_value(key, value));
        else if (key == "gc_pairs") gc_pairs = static_cast<int>(parse_int_value(key, value));
        else if (key == "curve_delta_min") curve_delta_min = parse_double_value(key, value);
        else if (key == "curve_delta_max") curve_delta_max = parse_double_value(key, value);
        else if (key == "curve_delta_step") curve_delta_step = parse_double_value(key, value);
        else if (key == "curve_gammas") curve_gammas = value;
        else if (key == "median_split") median_split = parse_bool_value(key, value);
        else throw UsageError("unknown config key \"" + key + "\"");
    }

    void apply(const KvPairs& kvs) {
        for (const auto& [k, v] : kvs) apply(k, v);
    }

    bool resolved_length_normalized() const {
        return length_normalized ? *length_normalized : variant_wants_length_norm(variant);
    }

    HyperParams hyperparams() const {
        HyperParams hp;
        hp.beta = beta;
        hp.eta = eta;
        hp.gamma = gamma;
        hp.tau_ref = tau_ref;
        hp.tau_good = tau_good;
        hp.lambda_nll = lambda_nll;
        hp.length_normalized = resolved_length_normalized();
        hp.enable_w_qual = enable_w_qual;
        hp.enable_w_perf = enable_w_perf;
        hp.cnll_gate_mode = cnll_gate_mode;
        hp.variant = variant;
        return hp;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.hp = hyperparams();
        tc.steps = steps;
        tc.batch_size = batch_size;
        tc.lr_peak = lr_peak;
        tc.warmup_ratio = warmup_ratio;
        tc.schedule = schedule;
        tc.eval_every = eval_every;
        tc.seed = seed;
        tc.grad_clip = grad_clip;
        return tc;
    }

    GenConfig gen_config() const {
        GenConfig gc;
        gc.vocab_size = vocab_size;
        gc.prompt_len = prompt_len;
        gc.response_len_min = response_len_min;
        gc.response_len_max = response_len_max;
        gc.n_pairs = n_pairs;
        gc.seed = seed;
        gc.teacher_gap = teacher_gap;
        gc.score_noise = score_noise;
        gc.label_noise = label_noise;
        return gc;
    }

    std::vector<double> curve_gamma_list() const {
        std::vector<double> out;
        std::string rest = curve_gammas;
        while (!rest.empty()) {
            const std::size_t comma = rest.find(',');
            const std::string tok = detail::trim(rest.substr(0, comma));
            if (!tok.empty()) out.push_back(detail::parse_double_value("curve_gammas", tok));
            if (comma == std::string::npos) break;
            rest.erase(0, comma + 1);
        }
        if (out.empty()) throw UsageError("curve_gammas resolved to an empty list");
        return out;
    }

    // Fully resolved echo for the manifest; nlohmann objects keep keys
    // sorted, which keeps the serialized form stable.
    nlohmann::json to_json() const {
        nlohmann::json j;
        j["variant"] = to_string(variant);
        j["beta"] = beta;
        j["eta"] = eta;
        j["gamma"] = gamma;
        j["tau_ref"] = tau_ref;
        j["tau_good"] = tau_good;
        j["lambda_nll"] = lambda_nll;
        j["length_normalized"] = resolved_length_normalized();
        j["enable_w_qual"] = enable_w_qual;
        j["enable_w_perf"] = enable_w_perf;
        j["cnll_gate_mode"] = to_string(cnll_gate_mode);
        j["steps"] = steps;
        j["batch_size"] = batch_size;
        j["lr_peak"] = lr_peak;
        j["warmup_ratio"] = warmup_ratio;
        j["schedule"] = to_string(schedule);
        j["eval_every"] = eval_every;
        if (grad_clip) j["grad_clip"] = *grad_clip;
        else j["grad_clip"] = "none";
        j["vocab_size"] = vocab_size;
        j["prompt_len"] = prompt_len;
        j["response_len_min"] = response_len_min;
        j["response_len_max"] = response_len_max;
        j["n_pairs"] = n_pairs;
        j["teacher_gap"] = teacher_gap;
        j["score_noise"] = score_noise;
        j["label_noise"] = label_noise;
        j["seed"] = seed;
        j["eval_fraction"] = eval_fraction;
        j["context_order"] = context_order;
        j["init_scale"] = init_scale;
        j["gc_epsilon"] = gc_epsilon;
        j["gc_coords"] = gc_coords;
        j["gc_pairs"] = gc_pairs;
        j["curve_delta_min"] = curve_delta_min;
        j["curve_delta_max"] = curve_delta_max;
        j["curve_delta_step"] = curve_delta_step;
        j["curve_gammas"] = curve_gammas;
        j["median_split"] = median_split;
        return j;
    }
};

} // namespace prefopt

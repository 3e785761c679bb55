#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "prefopt/analysis.hpp"
#include "prefopt/config.hpp"
#include "prefopt/csv.hpp"
#include "prefopt/data.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/loss.hpp"
#include "prefopt/manifest.hpp"
#include "prefopt/policy.hpp"
#include "prefopt/trainer.hpp"

// Subcommand front end. Every run resolves one RunConfig (defaults < config
// file < --set < named flags), writes its artifacts plus a manifest into
// --out, and prints a one-line summary. Exit codes: 0 success, 2 usage,
// 1 anything else, each failure with a machine-readable error line on
// stderr.

namespace prefopt::cli {

inline constexpr double kGradCheckTolerance = 1e-5;

namespace detail {

namespace fs = std::filesystem;

struct SubArgs {
    std::string config_path;
    std::vector<std::string> sets;
    KvPairs flag_overrides;
    std::string out_dir;
    std::string data_path;
    std::string eval_data_path;
    std::string model_path;
    std::string ref_path;
};

// Named flags are sugar for --set key=value and win over it.
inline void add_common_options(CLI::App* sub, SubArgs& a, bool needs_out) {
    sub->add_option("--config", a.config_path, "key = value config file");
    sub->add_option("--set", a.sets, "override a config key (key=value, repeatable)");
    auto* out = sub->add_option("--out", a.out_dir, "output directory");
    if (needs_out) out->required();

    const auto sugar = [sub, &a](const std::string& flag, const std::string& key) {
        sub->add_option_function<std::string>(
            flag, [&a, key](const std::string& v) { a.flag_overrides.emplace_back(key, v); },
            "shorthand for --set " + key + "=VALUE");
    };
    sugar("--variant", "variant");
    sugar("--beta", "beta");
    sugar("--eta", "eta");
    sugar("--gamma", "gamma");
    sugar("--tau-ref", "tau_ref");
    sugar("--tau-good", "tau_good");
    sugar("--lambda", "lambda_nll");
    sugar("--seed", "seed");
    sugar("--steps", "steps");
    sugar("--batch-size", "batch_size");
    sugar("--lr", "lr_peak");
    sugar("--n-pairs", "n_pairs");
    sugar("--context-order", "context_order");
}

inline RunConfig resolve_config(const SubArgs& a) {
    RunConfig rc;
    if (!a.config_path.empty()) rc.apply(parse_kv_file(a.config_path));
    for (const std::string& s : a.sets) {
        const auto [k, v] = parse_kv_arg(s);
        rc.apply(k, v);
    }
    rc.apply(a.flag_overrides);
    return rc;
}

inline fs::path ensure_out_dir(const SubArgs& a) {
    const fs::path dir(a.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

inline void check_vocab_covers(const std::vector<RawExample>& examples, int vocab_size) {
    for (const RawExample& ex : examples) {
        const auto bad = [vocab_size](const std::vector<int>& toks) {
            return std::any_of(toks.begin(), toks.end(), [vocab_size](int t) { return t >= vocab_size; });
        };
        if (bad(ex.prompt) || bad(ex.chosen) || bad(ex.rejected)) {
            throw UsageError("pair " + ex.pair_id + " contains tokens outside vocab_size=" +
                             std::to_string(vocab_size) + "; raise vocab_size to match the data");
        }
    }
}

inline int cmd_gen_data(const SubArgs& a) {
    const RunConfig rc = resolve_config(a);
    const fs::path out = ensure_out_dir(a);

    const std::vector<RawExample> data = generate_synthetic(rc.gen_config());
    const fs::path data_path = out / "data.jsonl";
    save_jsonl(data, data_path);
    write_manifest(out, "gen-data", rc.to_json(), rc.seed, {}, {data_path});

    double margin_sum = 0.0;
    for (const RawExample& ex : data) margin_sum += ex.score_w - ex.score_l;
    std::cout << "gen-data: n_pairs=" << data.size()
              << " mean_score_margin=" << format_double(margin_sum / static_cast<double>(data.size()))
              << " out=" << data_path.string() << "\n";
    return 0;
}

inline int cmd_train(const SubArgs& a) {
    const RunConfig rc = resolve_config(a);
    const fs::path out = ensure_out_dir(a);

    std::vector<fs::path> inputs;
    std::vector<RawExample> all;
    if (!a.data_path.empty()) {
        all = load_raw_jsonl(a.data_path);
        inputs.push_back(a.data_path);
    } else {
        all = generate_synthetic(rc.gen_config());
    }
    check_vocab_covers(all, rc.vocab_size);

    std::vector<RawExample> train_ex, eval_ex;
    if (!a.eval_data_path.empty()) {
        train_ex = std::move(all);
        eval_ex = load_raw_jsonl(a.eval_data_path);
        check_vocab_covers(eval_ex, rc.vocab_size);
        inputs.push_back(a.eval_data_path);
    } else {
        if (!(rc.eval_fraction >= 0.0 && rc.eval_fraction < 1.0)) {
            throw UsageError("eval_fraction must be in [0, 1)");
        }
        const std::size_t n_eval = static_cast<std::size_t>(
            std::llround(rc.eval_fraction * static_cast<double>(all.size())));
        train_ex.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_eval));
        eval_ex.assign(all.end() - static_cast<std::ptrdiff_t>(n_eval), all.end());
    }
    if (train_ex.empty()) throw UsageError("training split is empty");

    const NGramPolicy initial =
        NGramPolicy::random(rc.vocab_size, rc.context_order, rc.seed + 1, rc.init_scale);
    const TrainResult res = train(train_ex, eval_ex, initial, rc.train_config());

    const fs::path train_path = out / "train.jsonl";
    const fs::path eval_path = out / "eval.jsonl";
    const fs::path model_path = out / "model.json";
    const fs::path ref_path = out / "reference.json";
    const fs::path metrics_path = out / "metrics.csv";
    const fs::path evalcsv_path = out / "eval.csv";
    save_jsonl(train_ex, train_path);
    save_jsonl(eval_ex, eval_path);
    res.model.save(model_path);
    res.reference.save(ref_path);
    res.metrics.write_train_csv(metrics_path);
    res.metrics.write_eval_csv(evalcsv_path);
    write_manifest(out, "train", rc.to_json(), rc.seed, inputs,
                   {train_path, eval_path, model_path, ref_path, metrics_path, evalcsv_path});

    std::cout << "train: steps=" << rc.steps
              << " final_train_loss=" << format_double(res.metrics.steps.back().train_loss);
    if (!res.metrics.evals.empty()) {
        std::cout << " final_eval_loss=" << format_double(res.metrics.final_eval().eval_loss)
                  << " min_eval_loss=" << format_double(res.metrics.min_eval().eval_loss)
                  << "@step=" << res.metrics.min_eval().step;
    }
    std::cout << " out=" << out.string() << "\n";
    return 0;
}

// Loads --data as raw or precomputed records. Raw records need --model and
// --ref to produce log-probs; precomputed ones carry their own and must not
// be given checkpoints that would silently be ignored.
inline std::vector<PreferencePair> load_pairs_for(const SubArgs& a, const RunConfig& rc,
                                                  std::vector<fs::path>& inputs) {
    if (a.data_path.empty()) throw UsageError("--data is required");
    inputs.push_back(a.data_path);
    Dataset ds = load_jsonl(a.data_path);
    if (std::holds_alternative<std::vector<PreferencePair>>(ds)) {
        if (!a.model_path.empty() || !a.ref_path.empty()) {
            throw UsageError("--model/--ref are meaningless for precomputed data");
        }
        return std::get<std::vector<PreferencePair>>(std::move(ds));
    }
    if (a.model_path.empty() || a.ref_path.empty()) {
        throw UsageError("raw data needs --model and --ref checkpoints");
    }
    const auto& raw = std::get<std::vector<RawExample>>(ds);
    check_vocab_covers(raw, rc.vocab_size);
    const NGramPolicy model = NGramPolicy::load(a.model_path);
    const NGramPolicy reference = NGramPolicy::load(a.ref_path);
    inputs.push_back(a.model_path);
    inputs.push_back(a.ref_path);
    return attach_logps(raw, model, reference);
}

inline int cmd_eval(const SubArgs& a) {
    const RunConfig rc = resolve_config(a);
    const fs::path out = ensure_out_dir(a);

    std::vector<fs::path> inputs;
    const std::vector<PreferencePair> pairs = load_pairs_for(a, rc, inputs);
    const double mean = batch_loss(pairs, rc.hyperparams()).mean_loss;

    const fs::path summary_path = out / "eval.json";
    {
        nlohmann::json j{{"mean_loss", mean}, {"n_pairs", pairs.size()}};
        std::ofstream f(summary_path);
        if (!f) throw IoError("cannot open " + summary_path.string() + " for writing");
        f << j.dump(2) << '\n';
    }
    write_manifest(out, "eval", rc.to_json(), rc.seed, inputs, {summary_path});

    std::cout << "eval: mean_loss=" << format_double(mean) << " n_pairs=" << pairs.size() << "\n";
    return 0;
}

inline int cmd_grad_check(const SubArgs& a) {
    const RunConfig rc = resolve_config(a);
    const fs::path out = ensure_out_dir(a);

    GenConfig gc = rc.gen_config();
    gc.n_pairs = rc.gc_pairs;
    const std::vector<RawExample> examples = generate_synthetic(gc);
    const NGramPolicy model =
        NGramPolicy::random(rc.vocab_size, rc.context_order, rc.seed + 11, rc.init_scale);

    const std::vector<GradCheckResult> results = grad_check_all_variants(
        examples, rc.hyperparams(), model, rc.gc_epsilon, rc.gc_coords, rc.seed + 7);

    double worst = 0.0;
    nlohmann::json per_variant = nlohmann::json::object();
    for (const GradCheckResult& r : results) {
        worst = std::max(worst, r.max_err);
        per_variant[to_string(r.variant)] = r.max_err;
        std::cout << "grad-check: variant=" << to_string(r.variant)
                  << " max_err=" << format_double(r.max_err) << " coords=" << r.coords_checked << "\n";
    }
    const bool ok = worst <= kGradCheckTolerance;

    const fs::path summary_path = out / "grad_check.json";
    {
        nlohmann::json j{{"max_err", worst},
                         {"tolerance", kGradCheckTolerance},
                         {"status", ok ? "pass" : "fail"},
                         {"per_variant", per_variant}};
        std::ofstream f(summary_path);
        if (!f) throw IoError("cannot open " + summary_path.string() + " for writing");
        f << j.dump(2) << '\n';
    }
    write_manifest(out, "grad-check", rc.to_json(), rc.seed, {}, {summary_path});

    std::cout << "grad-check: max_err=" << format_double(worst)
              << " tolerance=" << format_double(kGradCheckTolerance)
              << " status=" << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? 0 : 1;
}

inline int cmd_curves(const SubArgs& a) {
    const RunConfig rc = resolve_config(a);
    const fs::path out = ensure_out_dir(a);

    if (!(rc.curve_delta_step > 0.0)) throw UsageError("curve_delta_step must be positive");
    if (!(rc.curve_delta_min <= rc.curve_delta_max)) {
        throw UsageError("curve_delta_min must be <= curve_delta_max");
    }
    std::vector<double> deltas;
    for (double d = rc.curve_delta_min; d <= rc.curve_delta_max + 1e-12; d += rc.curve_delta_step) {
        deltas.push_back(d);
    }
    const std::vector<double> gammas = rc.curve_gamma_list();
    const CurveTable table = gradient_curve(deltas, gammas);

    const fs::path curve_path = out / "curves.csv";
    write_curve_csv(table, curve_path);
    write_manifest(out, "curves", rc.to_json(), rc.seed, {}, {curve_path});

    std::cout << "curves: deltas=" << deltas.size() << " gammas=" << gammas.size()
              << " out=" << curve_path.string() << "\n";
    return 0;
}

inline int cmd_analyze(const SubArgs& a) {
    const RunConfig rc = resolve_config(a);
    const fs::path out = ensure_out_dir(a);

    std::vector<fs::path> inputs;
    const std::vector<PreferencePair> pairs = load_pairs_for(a, rc, inputs);

    const HyperParams hp = rc.hyperparams();
    const MarginStudy study = margin_study(pairs, hp, rc.median_split);
    // Weight distributions are a property of the dual-weighted objective, so
    // they are always computed under the omni form of the hyperparameters.
    const WeightStatsReport weights = weight_stats(pairs, hp_for_variant(hp, Variant::omni));

    const fs::path margins_path = out / "margins.csv";
    const fs::path weights_path = out / "weights.csv";
    write_margins_csv(study, margins_path);
    write_weight_stats_csv(weights, weights_path);
    write_manifest(out, "analyze", rc.to_json(), rc.seed, inputs, {margins_path, weights_path});

    std::cout << "analyze: rho=" << format_double(study.rho) << " n_pairs=" << pairs.size()
              << " out=" << out.string() << "\n";
    return 0;
}

inline void report_error(const char* type, const std::string& message) {
    std::cerr << "error: " << nlohmann::json{{"type", type}, {"message", message}}.dump() << "\n";
}

} // namespace detail

// Parses and runs one invocation; args excludes the program name. Returns
// the process exit code instead of calling exit so tests can drive it
// in-process.
inline int run_cli(std::vector<std::string> args) {
    using detail::SubArgs;

    CLI::App app{"preference-optimization laboratory"};
    app.require_subcommand(1);

    SubArgs gen_args, train_args, eval_args, gc_args, curve_args, an_args;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic preference dataset");
    detail::add_common_options(gen, gen_args, true);

    CLI::App* trainc = app.add_subcommand("train", "train a policy");
    detail::add_common_options(trainc, train_args, true);
    trainc->add_option("--data", train_args.data_path, "raw JSONL dataset (default: synthesize)");
    trainc->add_option("--eval-data", train_args.eval_data_path, "raw JSONL eval dataset (default: split --data)");

    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint or precomputed dataset");
    detail::add_common_options(evalc, eval_args, true);
    evalc->add_option("--data", eval_args.data_path, "JSONL dataset, raw or precomputed")->required();
    evalc->add_option("--model", eval_args.model_path, "policy checkpoint (raw data only)");
    evalc->add_option("--ref", eval_args.ref_path, "reference checkpoint (raw data only)");

    CLI::App* gcc = app.add_subcommand("grad-check", "finite-difference check of all variant gradients");
    detail::add_common_options(gcc, gc_args, true);
    gcc->add_option_function<std::string>(
        "--epsilon", [&gc_args](const std::string& v) { gc_args.flag_overrides.emplace_back("gc_epsilon", v); },
        "shorthand for --set gc_epsilon=VALUE");
    gcc->add_option_function<std::string>(
        "--coords", [&gc_args](const std::string& v) { gc_args.flag_overrides.emplace_back("gc_coords", v); },
        "shorthand for --set gc_coords=VALUE");
    gcc->add_option_function<std::string>(
        "--pairs", [&gc_args](const std::string& v) { gc_args.flag_overrides.emplace_back("gc_pairs", v); },
        "shorthand for --set gc_pairs=VALUE");

    CLI::App* curves = app.add_subcommand("curves", "tabulate focal gradient coefficient curves");
    detail::add_common_options(curves, curve_args, true);

    CLI::App* an = app.add_subcommand("analyze", "margin quadrants, rank correlation, weight stats");
    detail::add_common_options(an, an_args, true);
    an->add_option("--data", an_args.data_path, "JSONL dataset, raw or precomputed")->required();
    an->add_option("--model", an_args.model_path, "policy checkpoint (raw data only)");
    an->add_option("--ref", an_args.ref_path, "reference checkpoint (raw data only)");
    an->add_option_function<std::string>(
        "--split",
        [&an_args](const std::string& v) {
            if (v == "median") an_args.flag_overrides.emplace_back("median_split", "true");
            else if (v == "zero") an_args.flag_overrides.emplace_back("median_split", "false");
            else throw UsageError("--split expects median or zero");
        },
        "quadrant thresholds: median or zero");

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
        if (gen->parsed()) return detail::cmd_gen_data(gen_args);
        if (trainc->parsed()) return detail::cmd_train(train_args);
        if (evalc->parsed()) return detail::cmd_eval(eval_args);
        if (gcc->parsed()) return detail::cmd_grad_check(gc_args);
        if (curves->parsed()) return detail::cmd_curves(curve_args);
        if (an->parsed()) return detail::cmd_analyze(an_args);
        detail::report_error("usage", "no subcommand given");
        return 2;
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        detail::report_error("usage", e.what());
        return 2;
    } catch (const UsageError& e) {
        detail::report_error("usage", e.what());
        return 2;
    } catch (const TrainingDiverged& e) {
        detail::report_error("diverged", e.what());
        return 1;
    } catch (const Error& e) {
        detail::report_error("run", e.what());
        return 1;
    } catch (const std::exception& e) {
        detail::report_error("internal", e.what());
        return 1;
    }
}

inline int run_cli(int argc, char** argv) {
    return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

} // namespace prefopt::cli

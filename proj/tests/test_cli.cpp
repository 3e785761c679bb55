#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefopt/cli.hpp"

using namespace prefopt;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

// Drives the front end in-process with both streams captured.
CliResult run(std::vector<std::string> args) {
    std::ostringstream out, err;
    std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
    std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
    CliResult r;
    try {
        r.code = cli::run_cli(std::move(args));
    } catch (...) {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
        throw;
    }
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path fresh_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / "prefopt_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_lines(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in);
    int n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

nlohmann::json manifest_of(const fs::path& dir) {
    return nlohmann::json::parse(read_file(dir / "manifest.json"));
}

} // namespace

TEST_CASE("gen-data writes the dataset and its manifest") {
    const fs::path dir = fresh_dir("gen");
    const CliResult r = run({"gen-data", "--out", dir.string(), "--set", "n_pairs=40", "--seed", "5"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.rfind("gen-data: n_pairs=40", 0) == 0);

    REQUIRE(fs::exists(dir / "data.jsonl"));
    REQUIRE(count_lines(dir / "data.jsonl") == 40);

    const nlohmann::json m = manifest_of(dir);
    REQUIRE(m["command"] == "gen-data");
    REQUIRE(m["seed"] == 5);
    REQUIRE(m["config"]["n_pairs"] == 40);
    REQUIRE(m["inputs"].empty());
    REQUIRE(m["outputs"]["data.jsonl"] == hash_file_hex(dir / "data.jsonl"));
}

TEST_CASE("identical invocations produce byte-identical artifacts") {
    const fs::path a = fresh_dir("rerun_a");
    const fs::path b = fresh_dir("rerun_b");
    const std::vector<std::string> common = {"--set", "n_pairs=25", "--set", "seed=11"};

    for (const fs::path& dir : {a, b}) {
        std::vector<std::string> args = {"gen-data", "--out", dir.string()};
        args.insert(args.end(), common.begin(), common.end());
        REQUIRE(run(args).code == 0);
    }
    REQUIRE(read_file(a / "data.jsonl") == read_file(b / "data.jsonl"));
    REQUIRE(read_file(a / "manifest.json") == read_file(b / "manifest.json"));
}

TEST_CASE("train runs end to end on synthesized data") {
    const fs::path dir = fresh_dir("train");
    const CliResult r = run({"train", "--out", dir.string(), "--set", "n_pairs=60",
                             "--set", "steps=8", "--set", "batch_size=16",
                             "--set", "eval_fraction=0.25", "--set", "eval_every=4"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.rfind("train: steps=8", 0) == 0);
    REQUIRE(r.out.find("final_eval_loss=") != std::string::npos);

    for (const char* name : {"train.jsonl", "eval.jsonl", "model.json", "reference.json",
                             "metrics.csv", "eval.csv", "manifest.json"}) {
        INFO(name);
        REQUIRE(fs::exists(dir / name));
    }
    REQUIRE(count_lines(dir / "train.jsonl") == 45);
    REQUIRE(count_lines(dir / "eval.jsonl") == 15);
    REQUIRE(count_lines(dir / "metrics.csv") == 9); // header + one row per step

    // The reference checkpoint is the untouched initial policy.
    const NGramPolicy ref = NGramPolicy::load(dir / "reference.json");
    REQUIRE(ref == NGramPolicy::random(16, 1, 43, 0.5)); // seed + 1
    const NGramPolicy model = NGramPolicy::load(dir / "model.json");
    REQUIRE_FALSE(model == ref);

    const nlohmann::json m = manifest_of(dir);
    REQUIRE(m["command"] == "train");
    REQUIRE(m["outputs"].size() == 6);
}

TEST_CASE("train reruns reproduce the checkpoint byte for byte") {
    const fs::path a = fresh_dir("train_rerun_a");
    const fs::path b = fresh_dir("train_rerun_b");
    for (const fs::path& dir : {a, b}) {
        const CliResult r = run({"train", "--out", dir.string(), "--set", "n_pairs=40",
                                 "--set", "steps=6", "--set", "batch_size=8"});
        REQUIRE(r.code == 0);
    }
    REQUIRE(read_file(a / "model.json") == read_file(b / "model.json"));
    REQUIRE(read_file(a / "metrics.csv") == read_file(b / "metrics.csv"));
    REQUIRE(read_file(a / "manifest.json") == read_file(b / "manifest.json"));
}

TEST_CASE("train accepts explicit data and eval files") {
    const fs::path gen_dir = fresh_dir("train_input");
    REQUIRE(run({"gen-data", "--out", gen_dir.string(), "--set", "n_pairs=30"}).code == 0);
    const std::string data = (gen_dir / "data.jsonl").string();

    const fs::path dir = fresh_dir("train_files");
    const CliResult r = run({"train", "--out", dir.string(), "--data", data, "--eval-data", data,
                             "--set", "steps=4", "--set", "batch_size=10"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(count_lines(dir / "train.jsonl") == 30);

    const nlohmann::json m = manifest_of(dir);
    REQUIRE(m["inputs"].size() == 1); // same path for both roles collapses to one key
    REQUIRE(m["inputs"][data] == hash_file_hex(data));
}

TEST_CASE("eval handles raw and precomputed datasets") {
    const fs::path setup = fresh_dir("eval_setup");
    REQUIRE(run({"train", "--out", setup.string(), "--set", "n_pairs=40", "--set", "steps=4",
                 "--set", "batch_size=8", "--set", "eval_fraction=0"}).code == 0);
    const std::string data = (setup / "train.jsonl").string();
    const std::string model = (setup / "model.json").string();
    const std::string ref = (setup / "reference.json").string();

    SECTION("raw data needs both checkpoints") {
        const fs::path dir = fresh_dir("eval_raw");
        const CliResult r =
            run({"eval", "--out", dir.string(), "--data", data, "--model", model, "--ref", ref});
        INFO(r.err);
        REQUIRE(r.code == 0);
        const nlohmann::json summary = nlohmann::json::parse(read_file(dir / "eval.json"));
        REQUIRE(summary["n_pairs"] == 40);

        const std::vector<PreferencePair> pairs =
            attach_logps(load_raw_jsonl(data), NGramPolicy::load(model), NGramPolicy::load(ref));
        REQUIRE(summary["mean_loss"].get<double>() ==
                Catch::Approx(batch_loss(pairs, HyperParams{}).mean_loss).epsilon(1e-12));

        REQUIRE(run({"eval", "--out", dir.string(), "--data", data}).code == 2);
    }
    SECTION("precomputed data refuses checkpoints") {
        const std::vector<PreferencePair> pairs =
            attach_logps(load_raw_jsonl(data), NGramPolicy::load(model), NGramPolicy::load(ref));
        const fs::path dir = fresh_dir("eval_pre");
        const fs::path pre = dir / "pairs.jsonl";
        save_jsonl(pairs, pre);

        const CliResult ok = run({"eval", "--out", dir.string(), "--data", pre.string()});
        INFO(ok.err);
        REQUIRE(ok.code == 0);
        const nlohmann::json summary = nlohmann::json::parse(read_file(dir / "eval.json"));
        REQUIRE(summary["mean_loss"].get<double>() ==
                Catch::Approx(batch_loss(pairs, HyperParams{}).mean_loss).epsilon(1e-12));

        const CliResult bad =
            run({"eval", "--out", dir.string(), "--data", pre.string(), "--model", model});
        REQUIRE(bad.code == 2);
        REQUIRE(bad.err.find("meaningless") != std::string::npos);
    }
}

TEST_CASE("grad-check passes at the shipped tolerance") {
    const fs::path dir = fresh_dir("gc");
    const CliResult r = run({"grad-check", "--out", dir.string(), "--set", "gc_pairs=12",
                             "--set", "gc_coords=12", "--set", "vocab_size=8"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("status=PASS") != std::string::npos);

    const nlohmann::json summary = nlohmann::json::parse(read_file(dir / "grad_check.json"));
    REQUIRE(summary["status"] == "pass");
    REQUIRE(summary["max_err"].get<double>() <= cli::kGradCheckTolerance);
    REQUIRE(summary["per_variant"].size() == 5);
}

TEST_CASE("curves tabulates the configured grid") {
    const fs::path dir = fresh_dir("curves");
    const CliResult r = run({"curves", "--out", dir.string(), "--set", "curve_delta_min=-2",
                             "--set", "curve_delta_max=2", "--set", "curve_delta_step=1",
                             "--set", "curve_gammas=0,3"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(count_lines(dir / "curves.csv") == 6);
    std::ifstream in(dir / "curves.csv");
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "delta,gamma_0,gamma_3");
}

TEST_CASE("analyze writes margins and weight stats") {
    const fs::path setup = fresh_dir("an_setup");
    REQUIRE(run({"train", "--out", setup.string(), "--set", "n_pairs=30", "--set", "steps=4",
                 "--set", "batch_size=8", "--set", "eval_fraction=0"}).code == 0);
    const std::string data = (setup / "train.jsonl").string();
    const std::string model = (setup / "model.json").string();
    const std::string ref = (setup / "reference.json").string();

    const fs::path dir = fresh_dir("an");
    const CliResult r = run({"analyze", "--out", dir.string(), "--data", data, "--model", model,
                             "--ref", ref, "--split", "zero"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.rfind("analyze: rho=", 0) == 0);
    REQUIRE(count_lines(dir / "margins.csv") == 31);
    REQUIRE(count_lines(dir / "weights.csv") == 3);

    const nlohmann::json m = manifest_of(dir);
    REQUIRE(m["config"]["median_split"] == false);
    REQUIRE(m["inputs"].size() == 3);

    REQUIRE(run({"analyze", "--out", dir.string(), "--data", data, "--model", model, "--ref", ref,
                 "--split", "bogus"}).code == 2);
}

TEST_CASE("usage problems exit with code 2 and a typed error line") {
    const fs::path dir = fresh_dir("usage");
    const auto expect_usage = [&](std::vector<std::string> args) {
        const CliResult r = run(std::move(args));
        INFO(r.err);
        REQUIRE(r.code == 2);
        REQUIRE(r.err.rfind("error: {", 0) == 0);
        REQUIRE(r.err.find("\"type\":\"usage\"") != std::string::npos);
    };
    expect_usage({"no-such-command"});
    expect_usage({});
    expect_usage({"gen-data"}); // --out is required
    expect_usage({"gen-data", "--out", dir.string(), "--set", "no_such_key=1"});
    expect_usage({"gen-data", "--out", dir.string(), "--set", "variant=bogus"});
    expect_usage({"gen-data", "--out", dir.string(), "--set", "beta"});
    expect_usage({"eval", "--out", dir.string()}); // --data is required
}

TEST_CASE("runtime problems exit with code 1") {
    const fs::path dir = fresh_dir("runtime");
    const CliResult missing = run({"eval", "--out", dir.string(), "--data", "/no/such/file.jsonl"});
    REQUIRE(missing.code == 1);
    REQUIRE(missing.err.find("\"type\":\"run\"") != std::string::npos);

    const fs::path bad_cfg = dir / "bad.cfg";
    std::ofstream(bad_cfg) << "beta 2.0\n";
    const CliResult malformed =
        run({"gen-data", "--out", dir.string(), "--config", bad_cfg.string()});
    REQUIRE(malformed.code == 1);
    REQUIRE(malformed.err.find("bad.cfg:1") != std::string::npos);
}

TEST_CASE("help prints the subcommand list and exits cleanly") {
    const CliResult r = run({"--help"});
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("gen-data") != std::string::npos);
    REQUIRE(r.out.find("grad-check") != std::string::npos);
}

TEST_CASE("later sources override earlier ones") {
    const fs::path dir = fresh_dir("precedence");
    const fs::path cfg = dir / "run.cfg";
    std::ofstream(cfg) << "beta = 1.0 # overridden twice below\nn_pairs = 30\n";

    const CliResult r = run({"gen-data", "--out", dir.string(), "--config", cfg.string(),
                             "--set", "beta=3.0", "--beta", "4.0"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    const nlohmann::json m = manifest_of(dir);
    REQUIRE(m["config"]["beta"] == 4.0);    // named flag beats --set
    REQUIRE(m["config"]["n_pairs"] == 30);  // file beats the default
    REQUIRE(m["config"]["gamma"] == 3.0);   // untouched default

    const fs::path dir2 = fresh_dir("precedence2");
    const CliResult r2 = run({"gen-data", "--out", dir2.string(), "--config", cfg.string(),
                              "--set", "beta=3.0"});
    REQUIRE(r2.code == 0);
    REQUIRE(manifest_of(dir2)["config"]["beta"] == 3.0); // --set beats the file
}

TEST_CASE("shipped default config restates the compiled defaults") {
    const fs::path cfg = fs::path(__FILE__).parent_path().parent_path() / "configs" / "default.cfg";
    RunConfig from_file;
    from_file.apply(parse_kv_file(cfg));
    REQUIRE(from_file.to_json() == RunConfig{}.to_json());
}

TEST_CASE("config value parsing") {
    RunConfig rc;
    SECTION("rejects malformed values with the offending key named") {
        try {
            rc.apply("beta", "fast");
            FAIL("expected UsageError");
        } catch (const UsageError& e) {
            REQUIRE(std::string(e.what()).find("beta") != std::string::npos);
        }
        REQUIRE_THROWS_AS(rc.apply("steps", "2.5"), UsageError);
        REQUIRE_THROWS_AS(rc.apply("enable_w_qual", "maybe"), UsageError);
        REQUIRE_THROWS_AS(rc.apply("schedule", "linear"), UsageError);
        REQUIRE_THROWS_AS(rc.apply("cnll_gate_mode", "soft"), UsageError);
    }
    SECTION("length normalization follows the variant until forced") {
        REQUIRE(rc.resolved_length_normalized()); // omni default
        rc.apply("variant", "dpo");
        REQUIRE_FALSE(rc.resolved_length_normalized());
        rc.apply("length_normalized", "true");
        REQUIRE(rc.resolved_length_normalized());
        rc.apply("length_normalized", "auto");
        REQUIRE_FALSE(rc.resolved_length_normalized());
    }
    SECTION("gamma lists tolerate spacing") {
        rc.apply("curve_gammas", " 0, 0.5 ,2 ");
        REQUIRE(rc.curve_gamma_list() == std::vector<double>{0.0, 0.5, 2.0});
        rc.apply("curve_gammas", " , ");
        REQUIRE_THROWS_AS(rc.curve_gamma_list(), UsageError);
    }
    SECTION("grad_clip accepts none") {
        rc.apply("grad_clip", "1.5");
        REQUIRE(rc.train_config().grad_clip == 1.5);
        rc.apply("grad_clip", "none");
        REQUIRE_FALSE(rc.train_config().grad_clip.has_value());
    }
}

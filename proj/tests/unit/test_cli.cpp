// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mosld/checkpoint.hpp"
#include "mosld/cli.hpp"
#include "mosld/config.hpp"
#include "mosld/error.hpp"
#include "mosld/manifest.hpp"

using namespace mosld;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny test experiment
data_seed = 3

[backbone]
n_layers = 1
d_model = 16
n_heads = 2
vocab = 64
context = 12

[adapter]
rank = 2
alpha = 4.0
dropout = 0.1
experts = [3]
top_k = 2

[tasks]
seq_len = 3
n_train = 40
n_test = 20
modulus = 10

[pretrain]
examples_per_task = 20
epochs = 2

[train]
lr = 3e-3
epochs = 1
batch_size = 16
)";

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_cli(args, out, err);
    return Run{code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("mosld_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    [[nodiscard]] const fs::path& path() const { return path_; }
    [[nodiscard]] std::string str(const std::string& sub = "") const { return (path_ / sub).string(); }

private:
    fs::path path_;
};

std::string write_config(const TempDir& dir, const std::string& text, const std::string& name = "exp.toml") {
    std::ofstream(dir.path() / name) << text;
    return dir.str(name);
}

std::string without_line(const std::string& text, const std::string& prefix) {
    std::istringstream in(text);
    std::string out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind(prefix, 0) != 0) {
            out += line + "\n";
        }
    }
    return out;
}

std::string manifest_of(const std::string& config_text) {
    return git_blob_hash(canonical_config(experiment_from(parse_config(config_text))));
}

}  // namespace

TEST_CASE("config parsing", "[cli][config]") {
    const ConfigDoc doc = parse_config(kTinyConfig);
    CHECK(doc.has("backbone", "d_model"));
    CHECK(doc.has("", "data_seed"));
    const ExperimentConfig cfg = experiment_from(doc);
    CHECK(cfg.backbone.d_model == 16);
    CHECK(cfg.adapter.rank == 2);
    CHECK(cfg.adapter.drop_p == 0.1);
    CHECK(cfg.allocation.per_layer == std::vector<std::size_t>{3});
    CHECK(cfg.suite.in_domain.size() == 4);
    CHECK(cfg.data_seed == 3);
    CHECK_NOTHROW(cfg.validate());

    CHECK_THROWS_WITH(parse_config("[backbone]\nd_model = \n", "f.toml"), ContainsSubstring("f.toml:2"));
    CHECK_THROWS_WITH(parse_config("[a]\nx = 1\nx = 2\n"), ContainsSubstring("duplicate key 'a.x'"));
    CHECK_THROWS_WITH(parse_config("[a\n"), ContainsSubstring("malformed section"));
    CHECK_THROWS_WITH(experiment_from(parse_config(std::string(kTinyConfig) + "bogus = 1\n")),
                      ContainsSubstring("unknown field 'train.bogus'"));
    CHECK_THROWS_WITH(experiment_from(parse_config(without_line(kTinyConfig, "d_model"))),
                      ContainsSubstring("backbone.d_model"));
    CHECK_THROWS_WITH(experiment_from(parse_config("[adapter]\nrank = 2\n")), ContainsSubstring("[backbone]"));

    std::string typed = kTinyConfig;
    typed.replace(typed.find("rank = 2"), 8, "rank = \"two\"");
    CHECK_THROWS_WITH(experiment_from(parse_config(typed)), ContainsSubstring("adapter.rank"));

    ConfigDoc both = parse_config(kTinyConfig);
    apply_override(both, "adapter.allocation=uniform");
    CHECK_THROWS_WITH(experiment_from(both), ContainsSubstring("mutually exclusive"));
}

TEST_CASE("config arrays and comments", "[cli][config]") {
    const ConfigDoc doc = parse_config("x = [1, 2,\n  3]  # three\n[s]\nflag = true\nname = \"a # b\"\nr = -1.5e-3\n");
    const auto& arr = std::get<ConfigArray>(doc.sections.at("").at("x").v);
    CHECK(arr.size() == 3);
    CHECK(std::get<std::int64_t>(arr[2].v) == 3);
    CHECK(std::get<bool>(doc.sections.at("s").at("flag").v));
    CHECK(std::get<std::string>(doc.sections.at("s").at("name").v) == "a # b");
    CHECK(std::get<double>(doc.sections.at("s").at("r").v) == -1.5e-3);
}

TEST_CASE("overrides change the effective config and its hash", "[cli][config]") {
    ConfigDoc doc = parse_config(kTinyConfig);
    const std::string before = canonical_config(experiment_from(doc));
    apply_override(doc, "train.lr=1e-2");
    apply_override(doc, "train.optimizer=sgd");
    apply_override(doc, "adapter.experts=[2]");
    const ExperimentConfig cfg = experiment_from(doc);
    CHECK(cfg.train.lr == 1e-2);
    CHECK(cfg.train.optimizer == OptimizerKind::SGD);
    CHECK(cfg.allocation.per_layer == std::vector<std::size_t>{2});
    CHECK(canonical_config(cfg) != before);
    CHECK_THROWS_AS(apply_override(doc, "train.lr"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "train.=1"), ConfigError);
    ConfigDoc stray = doc;
    apply_override(stray, "lr=1");
    CHECK_THROWS_WITH(experiment_from(stray), ContainsSubstring("unknown field 'lr'"));

    // The canonical form is a fixed point of parsing.
    const ExperimentConfig again = experiment_from(parse_config(canonical_config(cfg)));
    CHECK(canonical_config(again) == canonical_config(cfg));
}

TEST_CASE("pretrain reports schema errors with exit 2", "[cli]") {
    TempDir dir;
    const std::string cfg = write_config(dir, without_line(kTinyConfig, "d_model"));
    const Run r = cli({"--out", dir.str("out"), "pretrain", "-c", cfg});
    CHECK(r.code == kExitConfig);
    CHECK_THAT(r.err, ContainsSubstring("backbone.d_model"));
    CHECK_FALSE(fs::exists(dir.path() / "out" / "base" / "base.ckpt"));

    CHECK(cli({"pretrain", "-c", dir.str("missing.toml")}).code == kExitConfig);
    CHECK(cli({"pretrain"}).code == kExitConfig);
    CHECK(cli({"frobnicate"}).code == kExitConfig);
}

TEST_CASE("pretrain is deterministic and stamps its outputs", "[cli]") {
    TempDir dir;
    const std::string cfg = write_config(dir, kTinyConfig);
    REQUIRE(cli({"--out", dir.str("a"), "pretrain", "-c", cfg}).code == kExitOk);
    REQUIRE(cli({"--out", dir.str("b"), "pretrain", "-c", cfg}).code == kExitOk);
    const std::string ckpt_a = slurp(dir.path() / "a" / "base" / "base.ckpt");
    CHECK(ckpt_a == slurp(dir.path() / "b" / "base" / "base.ckpt"));
    CHECK(slurp(dir.path() / "a" / "base" / "pretrain.csv") == slurp(dir.path() / "b" / "base" / "pretrain.csv"));

    const std::string hash = manifest_of(kTinyConfig);
    const Checkpoint ck = decode_checkpoint(ckpt_a);
    CHECK(ck.meta.at("manifest_hash") == hash);
    CHECK(ck.meta.at("tool_version") == tool_version());
    CHECK_FALSE(ck.tensors.empty());
    CHECK_THAT(slurp(dir.path() / "a" / "base" / "pretrain.csv"), ContainsSubstring(hash + "," + tool_version()));
    CHECK_THAT(slurp(dir.path() / "a" / "base" / "manifest.json"), ContainsSubstring(hash));

    // A flag override is a different manifest.
    REQUIRE(cli({"--out", dir.str("c"), "pretrain", "-c", cfg, "--set", "pretrain.epochs=1"}).code == kExitOk);
    CHECK(slurp(dir.path() / "c" / "base" / "base.ckpt") != ckpt_a);
}

TEST_CASE("finetune needs a base and a valid arm", "[cli]") {
    TempDir dir;
    const std::string cfg = write_config(dir, kTinyConfig);
    const std::string out = dir.str("out");
    Run r = cli({"--out", out, "finetune", "-c", cfg, "--arm", "lora", "--setting", "single:copy"});
    CHECK(r.code == kExitMissingArtifact);
    CHECK_THAT(r.err, ContainsSubstring("base.ckpt"));

    REQUIRE(cli({"--out", out, "pretrain", "-c", cfg}).code == kExitOk);
    r = cli({"--out", out, "finetune", "-c", cfg, "--arm", "qlora", "--setting", "mixture"});
    CHECK(r.code == kExitConfig);
    CHECK_THAT(r.err, ContainsSubstring("fp, lora, mola, mosl, mosld"));
    CHECK(cli({"--out", out, "finetune", "-c", cfg, "--arm", "lora", "--setting", "single:succ"}).code == kExitConfig);

    r = cli({"--out", out, "finetune", "-c", cfg, "--arm", "lora", "--setting", "single:copy", "--seed", "2"});
    REQUIRE(r.code == kExitOk);
    const fs::path lora = fs::path(out) / "runs" / "lora_single-copy_seed2";
    CHECK(fs::exists(lora / "adapter.ckpt"));
    const std::string hash = manifest_of(kTinyConfig);
    CHECK_THAT(slurp(lora / "metrics.csv"), ContainsSubstring(hash + "," + tool_version() + ",lora,single:copy,2,"));
    CHECK(decode_checkpoint(slurp(lora / "adapter.ckpt")).meta.at("manifest_hash") == hash);

    REQUIRE(cli({"--out", out, "finetune", "-c", cfg, "--arm", "mosld", "--setting", "mixture"}).code == kExitOk);
    const std::string metrics = slurp(fs::path(out) / "runs" / "mosld_mixture_seed1" / "metrics.csv");
    for (const char* col : {"acc_copy", "acc_reverse", "acc_sort", "acc_mod_add", "ood_acc", "routing_cv"}) {
        CHECK_THAT(metrics, ContainsSubstring(col));
    }
    CHECK_THAT(slurp(fs::path(out) / "runs" / "mosld_mixture_seed1" / "routing.csv"), ContainsSubstring(hash));
}

TEST_CASE("output root precedence", "[cli]") {
    TempDir dir;
    const std::string cfg = write_config(dir, kTinyConfig);
    ::setenv("MOSLD_OUT_DIR", dir.str("env").c_str(), 1);
    REQUIRE(cli({"export-data", "-c", cfg}).code == kExitOk);
    CHECK(fs::exists(dir.path() / "env" / "data" / "copy_train.tsv"));
    CHECK(fs::exists(dir.path() / "env" / "data" / "succ_test.tsv"));
    REQUIRE(cli({"--out", dir.str("flag"), "export-data", "-c", cfg}).code == kExitOk);
    CHECK(fs::exists(dir.path() / "flag" / "data" / "copy_train.tsv"));
    ::unsetenv("MOSLD_OUT_DIR");
}

TEST_CASE("compare outputs are reproducible", "[cli]") {
    TempDir dir;
    const std::string cfg = write_config(dir, kTinyConfig);
    const std::vector<std::string> tail{"compare", "-c", cfg, "--arms", "lora,mosld", "--seeds", "1,2",
                                        "--settings", "single:copy,single:sort,mixture"};
    auto run = [&](const std::string& out) {
        std::vector<std::string> args{"--out", out};
        args.insert(args.end(), tail.begin(), tail.end());
        return cli(args);
    };
    const Run a = run(dir.str("a"));
    REQUIRE(a.code == kExitOk);
    CHECK_THAT(a.out, ContainsSubstring("lora: mixture - single >= 0 in"));
    CHECK_THAT(a.out, ContainsSubstring("mosld: mixture - single >= 0 in"));
    REQUIRE(run(dir.str("b")).code == kExitOk);
    for (const char* f : {"results.csv", "deltas.csv", "routing.csv", "summary.md"}) {
        CAPTURE(f);
        const std::string first = slurp(dir.path() / "a" / "compare" / f);
        CHECK(first == slurp(dir.path() / "b" / "compare" / f));
        CHECK_THAT(first, ContainsSubstring(manifest_of(kTinyConfig)));
    }
    const std::string results = slurp(dir.path() / "a" / "compare" / "results.csv");
    CHECK(std::count(results.begin(), results.end(), '\n') == 1 + 2 * 3 * 2);
}

TEST_CASE("count-params", "[cli]") {
    Run r = cli({"count-params"});
    REQUIRE(r.code == kExitOk);
    CHECK_THAT(r.out, ContainsSubstring("4194304"));
    CHECK_THAT(r.out, ContainsSubstring("(1A+5B)*32"));
    CHECK_THAT(r.out, ContainsSubstring("5.312"));

    r = cli({"count-params", "--format", "csv", "--methods", "lora,mosld"});
    REQUIRE(r.code == kExitOk);
    CHECK_THAT(r.out, ContainsSubstring("lora,(1A+1B)*32,"));
    CHECK_THAT(r.out, ContainsSubstring("mosld,(1A+5B)*32,"));

    CHECK(cli({"count-params", "--layers", "abc"}).code == kExitConfig);
    CHECK(cli({"count-params", "--rank"}).code == kExitConfig);
    CHECK(cli({"count-params", "--format", "xml"}).code == kExitConfig);
    CHECK(cli({"count-params", "--no-such-flag"}).code == kExitConfig);
    CHECK(cli({"count-params", "--layers", "0"}).code == kExitConfig);
    CHECK(cli({"count-params", "--methods", "lora,bogus"}).code == kExitConfig);
}

TEST_CASE("installed binary maps errors to exit codes", "[cli]") {
    TempDir dir;
    const std::string bad = write_config(dir, without_line(kTinyConfig, "d_model"));
    auto status = [&](const std::string& args) {
        const std::string cmd = std::string(MOSLD_CLI_PATH) + " " + args + " > " + dir.str("log") + " 2>&1";
        const int raw = std::system(cmd.c_str());
        REQUIRE(WIFEXITED(raw));
        return WEXITSTATUS(raw);
    };
    CHECK(status("count-params --format csv") == 0);
    CHECK(status("--out " + dir.str("o") + " pretrain -c " + bad) == 2);
    CHECK_THAT(slurp(dir.path() / "log"), ContainsSubstring("backbone.d_model"));
    CHECK(status("--out " + dir.str("o") + " finetune -c " + write_config(dir, kTinyConfig) +
                 " --arm lora --setting mixture") == 3);
    CHECK(status("count-params --layers x") == 2);
}

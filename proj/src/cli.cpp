// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mosld/accounting.hpp"
#include "mosld/checkpoint.hpp"
#include "mosld/config.hpp"
#include "mosld/error.hpp"
#include "mosld/manifest.hpp"
#include "mosld/trainer.hpp"

namespace mosld {
namespace {

namespace fs = std::filesystem;

struct Common {
    std::string out_flag;
    std::string config_path;
    std::vector<std::string> overrides;
};

fs::path output_root(const Common& c) {
    if (!c.out_flag.empty()) {
        return c.out_flag;
    }
    if (const char* env = std::getenv("MOSLD_OUT_DIR"); env != nullptr && *env != '\0') {
        return env;
    }
    return "mosld_out";
}

void write_text(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw MissingArtifactError("cannot open " + path.string() + " for writing");
    }
    f << content;
}

struct Loaded {
    ExperimentConfig cfg;
    RunManifest manifest;
};

Loaded load(const Common& c, const std::string& command, std::uint64_t seed, const fs::path& out_dir) {
    ConfigDoc doc = load_config_file(c.config_path);
    for (const std::string& o : c.overrides) {
        apply_override(doc, o);
    }
    Loaded l{experiment_from(doc), {}};
    l.manifest.config_path = c.config_path;
    l.manifest.canonical_config = canonical_config(l.cfg);
    l.manifest.config_hash = git_blob_hash(l.manifest.canonical_config);
    l.manifest.command = command;
    l.manifest.seed = seed;
    l.manifest.output_dir = out_dir;
    l.manifest.started_at = utc_timestamp();
    return l;
}

void finish(RunManifest& m) {
    m.finished_at = utc_timestamp();
    write_text(m.output_dir / "manifest.json", m.to_json());
}

CheckpointMeta meta_of(const Stamp& s, const std::string& kind) {
    return CheckpointMeta{{"kind", kind}, {"manifest_hash", s.manifest_hash}, {"tool_version", s.version}};
}

fs::path base_dir(const fs::path& root) { return root / "base"; }

BaseModel load_base(const fs::path& root, const ExperimentConfig& cfg) {
    const fs::path path = base_dir(root) / "base.ckpt";
    if (!fs::exists(path)) {
        throw MissingArtifactError("base checkpoint not found at " + path.string() + "; run `mosld pretrain` first");
    }
    const Checkpoint ck = read_checkpoint(path);
    return BaseModel::from_records(cfg.backbone, ck.tensors);
}

std::string fmt(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(6) << v;
    return s.str();
}

std::string run_dir_name(Arm arm, const Setting& setting, std::uint64_t seed) {
    std::string s = setting.name();
    std::replace(s.begin(), s.end(), ':', '-');
    return to_string(arm) + "_" + s + "_seed" + std::to_string(seed);
}

// ---- pretrain ----

int cmd_pretrain(const Common& c, std::ostream& out) {
    const fs::path dir = base_dir(output_root(c));
    Loaded l = load(c, "pretrain", 0, dir);
    l.manifest.seed = l.cfg.data_seed;
    const Stamp stamp = l.manifest.stamp();
    const SuiteData data = generate_suite(l.cfg.suite, l.cfg.data_seed);
    const PretrainResult pre = pretrain_base(l.cfg, data);
    const std::string hash = base_hash(pre.base);

    write_checkpoint(dir / "base.ckpt", pre.base.to_records(), meta_of(stamp, "base"));
    std::ostringstream csv;
    csv << "manifest_hash,tool_version,base_hash,initial_loss,final_loss";
    for (const TaskSpec& t : l.cfg.suite.in_domain) {
        csv << ",acc_" << t.name();
    }
    csv << ",macro\n"
        << stamp.manifest_hash << "," << stamp.version << "," << hash << "," << fmt(pre.initial_loss) << ","
        << fmt(pre.final_loss);
    for (const TaskSpec& t : l.cfg.suite.in_domain) {
        csv << "," << fmt(pre.test_accuracy.per_task.at(t.name()));
    }
    csv << "," << fmt(pre.test_accuracy.macro) << "\n";
    write_text(dir / "pretrain.csv", csv.str());
    finish(l.manifest);

    out << "pretrained base " << hash << ": loss " << fmt(pre.initial_loss) << " -> " << fmt(pre.final_loss)
        << ", test macro accuracy " << fmt(pre.test_accuracy.macro) << "\n"
        << "wrote " << (dir / "base.ckpt").string() << "\n";
    return kExitOk;
}

// ---- finetune ----

int cmd_finetune(const Common& c, const std::string& arm_name, const std::string& setting_name, std::uint64_t seed,
                 std::ostream& out) {
    const Arm arm = parse_arm(arm_name);
    const Setting setting = Setting::parse(setting_name);
    const fs::path root = output_root(c);
    const fs::path dir = root / "runs" / run_dir_name(arm, setting, seed);
    Loaded l = load(c, "finetune --arm " + to_string(arm) + " --setting " + setting.name() +
                           " --seed " + std::to_string(seed),
                    seed, dir);
    const Stamp stamp = l.manifest.stamp();
    const BaseModel base = load_base(root, l.cfg);
    const SuiteData data = generate_suite(l.cfg.suite, l.cfg.data_seed);

    FinetuneOutput run = [&] {
        try {
            return finetune(arm, setting, l.cfg, base, data, seed);
        } catch (const TrainingDiverged& e) {
            write_checkpoint(dir / "last_good.ckpt", e.last_good(), meta_of(stamp, "last_good"));
            throw;
        }
    }();
    const std::vector<RunResult> rows{run.result};
    write_text(dir / "metrics.csv", results_csv(rows, l.cfg.suite, stamp));
    write_text(dir / "routing.csv", routing_csv(rows, stamp));
    const std::vector<TensorRecord> weights =
        arm == Arm::FP ? run.model.base.to_records() : run.model.adapter_records();
    write_checkpoint(dir / (arm == Arm::FP ? "model.ckpt" : "adapter.ckpt"), weights, meta_of(stamp, "adapter"));
    finish(l.manifest);

    out << to_string(arm) << " " << setting.name() << " seed " << seed << ": macro accuracy " << fmt(run.result.macro);
    for (const auto& [task, acc] : run.result.per_task) {
        out << ", " << task << " " << fmt(acc);
    }
    out << "\nwrote " << dir.string() << "\n";
    return kExitOk;
}

// ---- compare ----

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> items;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            items.push_back(item);
        }
    }
    return items;
}

int cmd_compare(const Common& c, const std::string& arms_arg, const std::vector<std::uint64_t>& seeds,
                const std::string& settings_arg, std::ostream& out) {
    std::vector<Arm> arms;
    for (const std::string& a : split_list(arms_arg)) {
        arms.push_back(parse_arm(a));
    }
    if (arms.empty() || seeds.empty()) {
        throw ConfigError("compare needs at least one arm and one seed");
    }
    const fs::path root = output_root(c);
    const fs::path dir = root / "compare";
    Loaded l = load(c, "compare --arms " + arms_arg, seeds.front(), dir);
    const Stamp stamp = l.manifest.stamp();

    std::vector<Setting> settings;
    if (settings_arg.empty()) {
        settings = default_settings(l.cfg.suite);
    } else {
        for (const std::string& s : split_list(settings_arg)) {
            settings.push_back(Setting::parse(s));
        }
    }

    const SuiteData data = generate_suite(l.cfg.suite, l.cfg.data_seed);
    BaseModel base = [&] {
        if (fs::exists(base_dir(root) / "base.ckpt")) {
            return load_base(root, l.cfg);
        }
        out << "no base checkpoint found, pretraining\n";
        PretrainResult pre = pretrain_base(l.cfg, data);
        write_checkpoint(base_dir(root) / "base.ckpt", pre.base.to_records(), meta_of(stamp, "base"));
        return std::move(pre.base);
    }();

    const GridResult grid = run_grid(arms, settings, seeds, l.cfg, base, data);
    write_text(dir / "results.csv", results_csv(grid.rows, l.cfg.suite, stamp));
    write_text(dir / "deltas.csv", deltas_csv(grid.deltas, stamp));
    write_text(dir / "routing.csv", routing_csv(grid.rows, stamp));
    write_text(dir / "summary.md", summary_markdown(grid, l.cfg.suite, stamp));
    finish(l.manifest);

    out << grid.rows.size() << " runs\n";
    for (Arm arm : arms) {
        std::size_t up = 0;
        std::size_t n = 0;
        double sum = 0.0;
        for (const DeltaRow& d : grid.deltas) {
            if (d.arm == arm) {
                up += d.delta >= 0.0 ? 1 : 0;
                sum += d.delta;
                ++n;
            }
        }
        if (n == 0) {
            continue;
        }
        out << to_string(arm) << ": mixture - single >= 0 in " << up << "/" << n << " seeds, mean delta "
            << fmt(sum / static_cast<double>(n)) << "\n";
    }
    out << "wrote " << dir.string() << "\n";
    return kExitOk;
}

// ---- count-params ----

struct GeometryFlags {
    GeometrySpec geom = GeometrySpec::reference();
    std::string per_layer;
    std::string methods = "lora,mola,mosl,mosld";
    std::string format = "md";
    std::string output;
};

int cmd_count_params(const GeometryFlags& f, std::ostream& out) {
    GeometrySpec g = f.geom;
    if (!f.per_layer.empty()) {
        g.experts_per_layer.clear();
        for (const std::string& s : split_list(f.per_layer)) {
            std::size_t pos = 0;
            unsigned long long v = 0;
            try {
                v = std::stoull(s, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != s.size() || s.front() == '-') {
                throw ConfigError("--experts-per-layer: '" + s + "' is not a non-negative integer");
            }
            g.experts_per_layer.push_back(v);
        }
    }
    g.validate();
    std::vector<Arm> methods;
    for (const std::string& m : split_list(f.methods)) {
        methods.push_back(parse_arm(m));
    }
    const std::vector<ParamReport> rows = report_table(g, methods);

    std::ostringstream geom_desc;
    geom_desc << "layers=" << g.layers << " d_in=" << g.d_in << " d_out=" << g.d_out << " rank=" << g.rank
              << " targets=" << g.targets << " experts=" << g.expert_total() << " top_k=" << g.top_k
              << " base=" << g.base_params;
    const Stamp stamp{git_blob_hash(geom_desc.str())};

    std::string text;
    if (f.format == "csv") {
        std::istringstream in(report_csv(rows));
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            text += (header ? "manifest_hash,tool_version," : stamp.manifest_hash + "," + stamp.version + ",") + line +
                    "\n";
            header = false;
        }
    } else {
        text = report_markdown(rows);
        const ParamReport* lora = nullptr;
        for (const ParamReport& r : rows) {
            if (r.method == Arm::LoRA) {
                lora = &r;
            }
        }
        if (lora != nullptr && lora->trainable > 0) {
            text += "\nTrainable ratio vs LoRA:";
            for (const ParamReport& r : rows) {
                std::ostringstream s;
                s << std::fixed << std::setprecision(4)
                  << static_cast<double>(r.trainable) / static_cast<double>(lora->trainable);
                text += " " + to_string(r.method) + " " + s.str() + ";";
            }
            text.back() = '\n';
        }
        text += "\n" + geom_desc.str() + "\nmanifest " + stamp.manifest_hash + ", " + stamp.version + "\n";
    }
    if (f.output.empty()) {
        out << text;
    } else {
        write_text(f.output, text);
        out << "wrote " << f.output << "\n";
    }
    return kExitOk;
}

// ---- export-data ----

int cmd_export_data(const Common& c, std::ostream& out) {
    const fs::path dir = output_root(c) / "data";
    Loaded l = load(c, "export-data", 0, dir);
    l.manifest.seed = l.cfg.data_seed;
    const SuiteData data = generate_suite(l.cfg.suite, l.cfg.data_seed);
    std::size_t files = 0;
    auto text = [](const DatasetSplit& split) {
        std::ostringstream s;
        write_dataset_text(s, split);
        return s.str();
    };
    auto dump = [&](const std::string& name, const TaskData& td) {
        write_text(dir / (name + "_train.tsv"), text(td.train));
        write_text(dir / (name + "_test.tsv"), text(td.test));
        files += 2;
        if (!td.validation.examples.empty()) {
            write_text(dir / (name + "_validation.tsv"), text(td.validation));
            ++files;
        }
    };
    for (const auto& [kind, td] : data.tasks) {
        dump(to_string(kind), td);
    }
    if (data.ood) {
        dump(to_string(TaskKind::Succ), *data.ood);
    }
    finish(l.manifest);
    out << "wrote " << files << " files to " << dir.string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Mixture of shared low-rank adapters: training, comparison and parameter accounting", "mosld"};
    app.set_version_flag("--version", tool_version());
    app.require_subcommand(1);
    Common common;
    app.add_option("--out", common.out_flag, "Output root (default: $MOSLD_OUT_DIR, else ./mosld_out)");

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config_path, "Experiment config file")->required();
        sub->add_option("--set", common.overrides, "Override a config field, e.g. --set train.lr=1e-3");
    };

    CLI::App* pretrain = app.add_subcommand("pretrain", "Pretrain the frozen base model");
    add_config(pretrain);

    std::string arm_name;
    std::string setting_name;
    std::uint64_t seed = 1;
    CLI::App* ft = app.add_subcommand("finetune", "Fine-tune one method arm on top of the base");
    add_config(ft);
    ft->add_option("--arm", arm_name, "fp, lora, mola, mosl or mosld")->required();
    ft->add_option("--setting", setting_name, "mixture or single:<task>")->required();
    ft->add_option("--seed", seed, "Run seed");

    std::string arms_arg = "lora,mosld";
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string settings_arg;
    CLI::App* cmp = app.add_subcommand("compare", "Run the single vs mixture grid and summarize deltas");
    add_config(cmp);
    cmp->add_option("--arms", arms_arg, "Comma-separated arms");
    cmp->add_option("--seeds", seeds, "Run seeds")->delimiter(',');
    cmp->add_option("--settings", settings_arg, "Comma-separated settings (default: every single task + mixture)");

    GeometryFlags gf;
    CLI::App* cp = app.add_subcommand("count-params", "Trainable and forward parameter counts per method");
    cp->add_option("--layers", gf.geom.layers, "Transformer layers");
    cp->add_option("--d-in", gf.geom.d_in, "Projection input dim");
    cp->add_option("--d-out", gf.geom.d_out, "Projection output dim");
    cp->add_option("--rank", gf.geom.rank, "Adapter rank");
    cp->add_option("--targets", gf.geom.targets, "Adapted projections per layer");
    cp->add_option("--experts", gf.geom.experts, "Experts per layer");
    cp->add_option("--experts-per-layer", gf.per_layer, "Comma-separated expert counts, one per layer");
    cp->add_option("--top-k", gf.geom.top_k, "Experts selected per token");
    cp->add_option("--base-params", gf.geom.base_params, "Base model size");
    cp->add_option("--methods", gf.methods, "Comma-separated arms");
    cp->add_option("--format", gf.format, "md or csv")->check(CLI::IsMember({"md", "csv"}));
    cp->add_option("-o,--output", gf.output, "Write to file instead of stdout");

    CLI::App* ex = app.add_subcommand("export-data", "Write the generated task splits as TSV");
    add_config(ex);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*pretrain) {
            return cmd_pretrain(common, out);
        }
        if (*ft) {
            return cmd_finetune(common, arm_name, setting_name, seed, out);
        }
        if (*cmp) {
            return cmd_compare(common, arms_arg, seeds, settings_arg, out);
        }
        if (*cp) {
            return cmd_count_params(gf, out);
        }
        if (*ex) {
            return cmd_export_data(common, out);
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const MissingArtifactError& e) {
        err << "missing artifact: " << e.what() << "\n";
        return kExitMissingArtifact;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitConfig;
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_cli(args, std::cout, std::cerr);
}

}  // namespace mosld

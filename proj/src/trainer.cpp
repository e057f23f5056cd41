// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "mosld/checkpoint.hpp"
#include "mosld/error.hpp"
#include "mosld/manifest.hpp"
#include "mosld/ops.hpp"

namespace mosld {
namespace {

struct PackedBatch {
    std::vector<std::vector<std::size_t>> seqs;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> targets;
};

PackedBatch pack(const DatasetSplit& data, std::span<const std::size_t> indices) {
    PackedBatch b;
    std::size_t offset = 0;
    for (std::size_t idx : indices) {
        const Example& e = data.examples[idx];
        b.seqs.push_back(e.input_tokens());
        const auto pos = e.answer_positions();
        for (std::size_t j = 0; j < pos.size(); ++j) {
            b.rows.push_back(offset + pos[j]);
            b.targets.push_back(e.answer[j]);
        }
        offset += b.seqs.back().size();
    }
    return b;
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

DatasetSplit concat_tests(const SuiteData& data, const Setting& setting) {
    DatasetSplit out{{}, SplitKind::Test, setting.task};
    for (const auto& [kind, td] : data.tasks) {
        if (setting.is_mixture() || *setting.task == kind) {
            out.examples.insert(out.examples.end(), td.test.examples.begin(), td.test.examples.end());
        }
    }
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) {
        throw ConfigError("train.lr must be > 0");
    }
    if (epochs == 0) {
        throw ConfigError("train.epochs must be >= 1");
    }
    if (batch_size == 0) {
        throw ConfigError("train.batch_size must be >= 1");
    }
    if (!(balance_weight >= 0.0)) {
        throw ConfigError("train.balance_weight must be >= 0");
    }
}

void ExperimentConfig::validate() const {
    backbone.validate();
    adapter.validate();
    allocation.validate(backbone.n_layers);
    train.validate();
    if (adapter.rank > backbone.d_model) {
        throw ConfigError("adapter.rank exceeds backbone.d_model");
    }
    if (suite.in_domain.empty()) {
        throw ConfigError("tasks: at least one in-domain task is required");
    }
    std::set<TaskKind> seen;
    for (const TaskSpec& t : suite.in_domain) {
        if (t.kind == TaskKind::Succ) {
            throw ConfigError("tasks: succ is reserved for out-of-domain evaluation");
        }
        if (!seen.insert(t.kind).second) {
            throw ConfigError("tasks: '" + t.name() + "' listed twice");
        }
        t.validate(backbone.vocab, backbone.context);
        if (pretrain.examples_per_task > t.n_train) {
            throw ConfigError("pretrain.examples_per_task exceeds tasks.n_train");
        }
    }
    if (suite.ood) {
        suite.ood->validate(backbone.vocab, backbone.context);
    }
    if (pretrain.epochs == 0 || pretrain.batch_size == 0 || !(pretrain.lr > 0.0)) {
        throw ConfigError("pretrain: epochs, batch_size and lr must be positive");
    }
}

void Optimizer::step(std::span<Parameter* const> params, std::span<const Matrix> grads) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i]->value().data();
        auto g = grads[i].data();
        if (kind_ == OptimizerKind::SGD) {
            for (std::size_t j = 0; j < w.size(); ++j) {
                w[j] -= lr_ * g[j];
            }
            continue;
        }
        auto [it, fresh] = state_.try_emplace(params[i]);
        if (fresh) {
            it->second.m = Matrix(params[i]->value().rows(), params[i]->value().cols());
            it->second.v = Matrix(params[i]->value().rows(), params[i]->value().cols());
        }
        auto m = it->second.m.data();
        auto v = it->second.v.data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
        }
    }
}

std::string Setting::name() const { return task ? "single:" + to_string(*task) : "mixture"; }

Setting Setting::parse(const std::string& text) {
    if (text == "mixture") {
        return Setting::mixture();
    }
    const std::string prefix = "single:";
    if (text.rfind(prefix, 0) == 0) {
        const TaskKind k = parse_task(text.substr(prefix.size()));
        if (k == TaskKind::Succ) {
            throw ConfigError("setting: succ is evaluation-only and cannot be trained on");
        }
        return Setting::single(k);
    }
    throw ConfigError("unknown setting '" + text + "' (expected 'mixture' or 'single:<task>')");
}

SuiteData generate_suite(const TaskSuite& suite, std::uint64_t seed) {
    const Rng root(seed);
    SuiteData data;
    for (const TaskSpec& spec : suite.in_domain) {
        Rng r = root.split(10 + static_cast<std::uint64_t>(spec.kind));
        data.tasks.emplace(spec.kind, gen_task(spec, r));
    }
    if (suite.ood) {
        Rng r = root.split(99);
        data.ood = gen_task(*suite.ood, r);
    }
    return data;
}

double eval_loss(const AdaptedModel& model, const DatasetSplit& data, std::size_t limit) {
    const std::size_t n = std::min(limit, data.examples.size());
    constexpr std::size_t kBatch = 64;
    double total = 0.0;
    std::size_t count = 0;
    const Rng eval_rng(0);
    for (std::size_t start = 0; start < n; start += kBatch) {
        std::vector<std::size_t> idx(std::min(n, start + kBatch) - start);
        std::iota(idx.begin(), idx.end(), start);
        const PackedBatch b = pack(data, idx);
        Tape t;
        const ForwardTrace tr = forward(t, model, b.seqs, Mode::Eval, eval_rng, b.rows);
        total += cross_entropy(t.value(tr.logits), b.targets) * static_cast<double>(b.targets.size());
        count += b.targets.size();
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

TrainStats train(AdaptedModel& model, const DatasetSplit& data, const TrainConfig& cfg, const Rng& rng) {
    cfg.validate();
    if (data.examples.empty()) {
        throw UsageError("train: empty training split");
    }
    TrainStats stats;
    stats.initial_loss = eval_loss(model, data);
    const std::vector<Parameter*> params = model.trainable_parameters();
    Optimizer opt(cfg.optimizer, cfg.lr);
    std::vector<std::size_t> order(data.examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<Matrix> grads(params.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = rng.split(epoch);
        shuffle_rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const PackedBatch b = pack(data, std::span(order).subspan(start, end - start));
            Tape t;
            const Rng step_rng = rng.split(1'000'000 + stats.steps);
            const ForwardTrace tr = forward(t, model, b.seqs, Mode::Train, step_rng, b.rows);
            const Var ce = ops::cross_entropy(t, tr.logits, b.targets);
            const Var loss = ops::add(t, ce, ops::scale(t, tr.aux, cfg.balance_weight));
            const double value = t.value(loss)(0, 0);
            if (!std::isfinite(value)) {
                std::vector<TensorRecord> snapshot;
                for (const Parameter* p : params) {
                    snapshot.push_back(TensorRecord::from_matrix(p->name(), p->value()));
                }
                throw TrainingDiverged("training objective became " + std::to_string(value) + " at step " +
                                           std::to_string(stats.steps),
                                       std::move(snapshot));
            }
            t.backward(loss);
            for (std::size_t i = 0; i < params.size(); ++i) {
                grads[i] = t.gradient(*params[i]);
            }
            opt.step(params, grads);
            stats.loss_trace.push_back(value);
            stats.final_aux = t.value(tr.aux)(0, 0);
            ++stats.steps;
        }
    }
    stats.final_loss = eval_loss(model, data);
    if (!std::isfinite(stats.final_loss)) {
        throw NumericalError("final training loss is not finite");
    }
    return stats;
}

PretrainResult pretrain_base(const ExperimentConfig& cfg, const SuiteData& data) {
    const Rng root(cfg.data_seed);
    Rng init_rng = root.split(7);
    AdaptedModel model = bare_model(build_backbone(cfg.backbone, init_rng));
    model.base.set_trainable(true);

    std::vector<DatasetSplit> slices;
    for (const auto& [kind, td] : data.tasks) {
        if (kind == TaskKind::Succ) {
            throw UsageError("pretrain_base: the succ probe must not be used for pretraining");
        }
        DatasetSplit s{{}, SplitKind::Train, kind};
        const std::size_t n = std::min(cfg.pretrain.examples_per_task, td.train.examples.size());
        s.examples.assign(td.train.examples.begin(), td.train.examples.begin() + static_cast<std::ptrdiff_t>(n));
        slices.push_back(std::move(s));
    }
    Rng mix_rng = root.split(8);
    DatasetSplit train_set;
    if (slices.size() == 1) {
        train_set = slices.front();
    } else {
        train_set = make_mixture(slices, mix_rng);
    }

    TrainConfig tc;
    tc.lr = cfg.pretrain.lr;
    tc.epochs = cfg.pretrain.epochs;
    tc.batch_size = cfg.pretrain.batch_size;
    tc.balance_weight = 0.0;
    tc.optimizer = OptimizerKind::Adam;
    const TrainStats stats = train(model, train_set, tc, root.split(9));

    PretrainResult out;
    out.initial_loss = stats.initial_loss;
    out.final_loss = stats.final_loss;
    out.test_accuracy = accuracy(model, concat_tests(data, Setting::mixture()));
    model.base.set_trainable(false);
    out.base = std::move(model.base);
    return out;
}

AdaptedModel prepare_arm(const BaseModel& base, Arm arm, const ExperimentConfig& cfg, const Rng& rng) {
    Rng init = rng;
    AdapterHyper hyper = cfg.adapter;
    switch (arm) {
        case Arm::FP: {
            AdaptedModel m = bare_model(base);
            m.base.set_trainable(true);
            return m;
        }
        case Arm::LoRA: {
            hyper.drop_p = 0.0;
            const ExpertAllocation single = ExpertAllocation::preset("single", base.config().n_layers, 1);
            return attach_adapters(base, single, hyper, init, AdapterLayout{Sharing::Shared, false});
        }
        case Arm::MoLA:
            hyper.drop_p = 0.0;
            return attach_adapters(base, cfg.allocation, hyper, init, AdapterLayout{Sharing::Independent, true});
        case Arm::MoSL:
            hyper.drop_p = 0.0;
            return attach_adapters(base, cfg.allocation, hyper, init, AdapterLayout{Sharing::Shared, true});
        case Arm::MoSLD:
            if (!cfg.train.dropout) {
                hyper.drop_p = 0.0;
            }
            return attach_adapters(base, cfg.allocation, hyper, init, AdapterLayout{Sharing::Shared, true});
    }
    throw InternalError("prepare_arm: unhandled arm");
}

std::vector<SiteRouting> routing_stats(const AdaptedModel& model, const DatasetSplit& split) {
    struct Acc {
        std::vector<double> assignments;
        std::vector<double> prob_sum;
        std::size_t tokens = 0;
        std::size_t total_assignments = 0;
    };
    std::map<SiteKey, Acc> acc;
    constexpr std::size_t kBatch = 64;
    const Rng eval_rng(0);
    for (std::size_t start = 0; start < split.examples.size(); start += kBatch) {
        std::vector<std::vector<std::size_t>> seqs;
        for (std::size_t i = start; i < std::min(split.examples.size(), start + kBatch); ++i) {
            seqs.push_back(split.examples[i].input_tokens());
        }
        Tape t;
        const ForwardTrace tr = forward(t, model, seqs, Mode::Eval, eval_rng);
        for (const auto& [key, gate] : tr.gates) {
            Acc& a = acc[key];
            a.assignments.resize(gate.n_experts, 0.0);
            a.prob_sum.resize(gate.n_experts, 0.0);
            const Matrix& p = t.value(gate.probs);
            for (std::size_t i = 0; i < p.rows(); ++i) {
                for (std::size_t j : gate.selected[i]) {
                    a.assignments[j] += 1.0;
                    ++a.total_assignments;
                }
                for (std::size_t j = 0; j < gate.n_experts; ++j) {
                    a.prob_sum[j] += p(i, j);
                }
            }
            a.tokens += p.rows();
        }
    }
    std::vector<SiteRouting> out;
    for (auto& [key, a] : acc) {
        SiteRouting r{key, {}};
        r.stats.n_experts = a.assignments.size();
        r.stats.n_tokens = a.tokens;
        for (std::size_t j = 0; j < a.assignments.size(); ++j) {
            r.stats.token_fraction.push_back(a.assignments[j] / static_cast<double>(a.total_assignments));
            r.stats.mean_prob.push_back(a.prob_sum[j] / static_cast<double>(a.tokens));
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::string base_hash(const BaseModel& base) {
    const auto records = base.to_records();
    return git_blob_hash(encode_checkpoint(records));
}

FinetuneOutput finetune(Arm arm, const Setting& setting, const ExperimentConfig& cfg, const BaseModel& base,
                        const SuiteData& data, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const Rng root(seed);
    AdaptedModel model = prepare_arm(base, arm, cfg, root.split(1));

    DatasetSplit train_set;
    if (setting.is_mixture()) {
        std::vector<DatasetSplit> trains;
        for (const auto& [kind, td] : data.tasks) {
            trains.push_back(td.train);
        }
        Rng mix_rng = root.split(2);
        train_set = trains.size() == 1 ? trains.front() : make_mixture(trains, mix_rng);
    } else {
        auto it = data.tasks.find(*setting.task);
        if (it == data.tasks.end()) {
            throw ConfigError("finetune: task '" + to_string(*setting.task) + "' is not part of the suite");
        }
        train_set = it->second.train;
    }

    RunResult r;
    r.arm = arm;
    r.setting = setting;
    r.seed = seed;
    r.base_hash = base_hash(base);
    r.train = train(model, train_set, cfg.train, root.split(3));

    const DatasetSplit eval_set = concat_tests(data, setting);
    const AccuracyTable acc = accuracy(model, eval_set);
    r.per_task = acc.per_task;
    r.macro = acc.macro;
    if (data.ood) {
        r.ood_accuracy = accuracy(model, data.ood->test).macro;
    }
    r.routing = routing_stats(model, eval_set);
    double cv = 0.0;
    for (const SiteRouting& s : r.routing) {
        cv += coefficient_of_variation(s.stats.token_fraction);
    }
    r.routing_cv = r.routing.empty() ? 0.0 : cv / static_cast<double>(r.routing.size());
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return FinetuneOutput{std::move(r), std::move(model)};
}

std::vector<DeltaRow> compute_deltas(std::span<const RunResult> rows) {
    std::map<std::pair<Arm, std::uint64_t>, std::pair<std::vector<double>, std::optional<double>>> groups;
    for (const RunResult& r : rows) {
        auto& g = groups[{r.arm, r.seed}];
        if (r.setting.is_mixture()) {
            g.second = r.macro;
        } else {
            g.first.push_back(r.per_task.at(to_string(*r.setting.task)));
        }
    }
    std::vector<DeltaRow> out;
    for (const auto& [key, g] : groups) {
        if (g.first.empty() || !g.second) {
            continue;
        }
        DeltaRow d{key.first, key.second, 0.0, *g.second, 0.0};
        d.single_mean = std::accumulate(g.first.begin(), g.first.end(), 0.0) / static_cast<double>(g.first.size());
        d.delta = d.mixture_macro - d.single_mean;
        out.push_back(d);
    }
    return out;
}

std::vector<Setting> default_settings(const TaskSuite& suite) {
    std::vector<Setting> s;
    for (const TaskSpec& t : suite.in_domain) {
        s.push_back(Setting::single(t.kind));
    }
    s.push_back(Setting::mixture());
    return s;
}

GridResult run_grid(std::span<const Arm> arms, std::span<const Setting> settings, std::span<const std::uint64_t> seeds,
                    const ExperimentConfig& cfg, const BaseModel& base, const SuiteData& data) {
    GridResult g;
    g.base_hash = base_hash(base);
    for (std::uint64_t seed : seeds) {
        for (Arm arm : arms) {
            for (const Setting& s : settings) {
                g.rows.push_back(finetune(arm, s, cfg, base, data, seed).result);
            }
        }
    }
    g.deltas = compute_deltas(g.rows);
    return g;
}

GridResult run_grid(std::span<const Arm> arms, std::span<const Setting> settings, std::span<const std::uint64_t> seeds,
                    const ExperimentConfig& cfg) {
    cfg.validate();
    const SuiteData data = generate_suite(cfg.suite, cfg.data_seed);
    const PretrainResult pre = pretrain_base(cfg, data);
    return run_grid(arms, settings, seeds, cfg, pre.base, data);
}

std::string results_csv(std::span<const RunResult> rows, const TaskSuite& suite, const Stamp& stamp) {
    std::ostringstream s;
    s << "manifest_hash,tool_version,arm,setting,seed";
    for (const TaskSpec& t : suite.in_domain) {
        s << ",acc_" << t.name();
    }
    s << ",macro,ood_acc,initial_loss,final_loss,final_aux,routing_cv,base_hash\n";
    for (const RunResult& r : rows) {
        s << stamp.manifest_hash << "," << stamp.version << "," << to_string(r.arm) << "," << r.setting.name() << ","
          << r.seed;
        for (const TaskSpec& t : suite.in_domain) {
            auto it = r.per_task.find(t.name());
            s << "," << (it == r.per_task.end() ? "" : fmt(it->second));
        }
        s << "," << fmt(r.macro) << "," << (r.ood_accuracy ? fmt(*r.ood_accuracy) : "") << ","
          << fmt(r.train.initial_loss) << "," << fmt(r.train.final_loss) << "," << fmt(r.train.final_aux) << ","
          << fmt(r.routing_cv) << "," << r.base_hash << "\n";
    }
    return s.str();
}

std::string deltas_csv(std::span<const DeltaRow> rows, const Stamp& stamp) {
    std::ostringstream s;
    s << "manifest_hash,tool_version,arm,seed,single_mean,mixture_macro,delta\n";
    for (const DeltaRow& d : rows) {
        s << stamp.manifest_hash << "," << stamp.version << "," << to_string(d.arm) << "," << d.seed << ","
          << fmt(d.single_mean) << "," << fmt(d.mixture_macro) << "," << fmt(d.delta) << "\n";
    }
    return s.str();
}

std::string routing_csv(std::span<const RunResult> rows, const Stamp& stamp) {
    std::ostringstream s;
    s << "manifest_hash,tool_version,arm,setting,seed,layer,target,expert,f_k,p_k\n";
    for (const RunResult& r : rows) {
        for (const SiteRouting& site : r.routing) {
            for (std::size_t k = 0; k < site.stats.n_experts; ++k) {
                s << stamp.manifest_hash << "," << stamp.version << "," << to_string(r.arm) << ","
                  << r.setting.name() << "," << r.seed << "," << site.site.layer << "," << to_string(site.site.target)
                  << "," << k << "," << fmt(site.stats.token_fraction[k]) << "," << fmt(site.stats.mean_prob[k])
                  << "\n";
            }
        }
    }
    return s.str();
}

std::string summary_markdown(const GridResult& grid, const TaskSuite& suite, const Stamp& stamp) {
    // Mean over seeds of per-task accuracy, one "single" and one "mixture" row per arm.
    std::vector<Arm> arms;
    for (const RunResult& r : grid.rows) {
        if (std::find(arms.begin(), arms.end(), r.arm) == arms.end()) {
            arms.push_back(r.arm);
        }
    }
    std::ostringstream s;
    s << "| Method | Setting |";
    for (const TaskSpec& t : suite.in_domain) {
        s << " " << t.name() << " |";
    }
    s << " Avg |\n|---|---|";
    for (std::size_t i = 0; i < suite.in_domain.size(); ++i) {
        s << "---:|";
    }
    s << "---:|\n";
    for (Arm arm : arms) {
        std::map<std::string, std::vector<double>> single;
        std::map<std::string, std::vector<double>> mixture;
        for (const RunResult& r : grid.rows) {
            if (r.arm != arm) {
                continue;
            }
            if (r.setting.is_mixture()) {
                for (const auto& [task, a] : r.per_task) {
                    mixture[task].push_back(a);
                }
            } else {
                const std::string task = to_string(*r.setting.task);
                single[task].push_back(r.per_task.at(task));
            }
        }
        auto mean = [](const std::vector<double>& v) {
            return v.empty() ? NAN : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        };
        auto row = [&](const char* label, const std::map<std::string, std::vector<double>>& m, bool with_delta) {
            s << "| " << to_string(arm) << " | " << label << " |";
            double sum = 0.0;
            double sum_single = 0.0;
            std::size_t n = 0;
            for (const TaskSpec& t : suite.in_domain) {
                auto it = m.find(t.name());
                if (it == m.end()) {
                    s << " - |";
                    continue;
                }
                const double v = 100.0 * mean(it->second);
                s << " " << fmt(v, 2);
                auto sit = single.find(t.name());
                if (with_delta && sit != single.end()) {
                    const double d = v - 100.0 * mean(sit->second);
                    s << " (" << (d >= 0 ? "+" : "") << fmt(d, 2) << ")";
                    sum_single += 100.0 * mean(sit->second);
                }
                s << " |";
                sum += v;
                ++n;
            }
            const double avg = n ? sum / static_cast<double>(n) : NAN;
            s << " " << fmt(avg, 2);
            if (with_delta && n) {
                const double d = avg - sum_single / static_cast<double>(n);
                s << " (" << (d >= 0 ? "+" : "") << fmt(d, 2) << ")";
            }
            s << " |\n";
        };
        if (!single.empty()) {
            row("single", single, false);
        }
        if (!mixture.empty()) {
            row("mixture", mixture, true);
        }
    }
    s << "\nMixture minus single, per seed:\n\n| Method | Seed | Single mean | Mixture | Delta |\n|---|---:|---:|---:|---:|\n";
    for (const DeltaRow& d : grid.deltas) {
        s << "| " << to_string(d.arm) << " | " << d.seed << " | " << fmt(100.0 * d.single_mean, 2) << " | "
          << fmt(100.0 * d.mixture_macro, 2) << " | " << (d.delta >= 0 ? "+" : "") << fmt(100.0 * d.delta, 2)
          << " |\n";
    }
    s << "\nbase " << grid.base_hash << ", manifest " << stamp.manifest_hash << ", " << stamp.version << "\n";
    return s.str();
}

}  // namespace mosld

// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "mosld/error.hpp"
#include "mosld/trainer.hpp"

using namespace mosld;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

ExperimentConfig tiny_experiment() {
    ExperimentConfig c;
    c.backbone.n_layers = 2;
    c.backbone.d_model = 16;
    c.backbone.n_heads = 2;
    c.backbone.vocab = 64;
    c.backbone.context = 12;
    c.adapter.rank = 2;
    c.adapter.alpha = 4.0;
    c.adapter.drop_p = 0.2;
    c.allocation = ExpertAllocation{{3, 2}, 2};
    c.suite = default_suite(3, 48, 24, 10);
    c.pretrain.examples_per_task = 24;
    c.pretrain.epochs = 3;
    c.pretrain.batch_size = 16;
    c.train.lr = 3e-3;
    c.train.epochs = 2;
    c.train.batch_size = 16;
    return c;
}

struct Fixture {
    ExperimentConfig cfg = tiny_experiment();
    SuiteData data = generate_suite(cfg.suite, cfg.data_seed);
    BaseModel base = pretrain_base(cfg, data).base;
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

std::vector<TensorRecord> trainable_records(AdaptedModel& m) {
    std::vector<TensorRecord> out;
    for (const Parameter* p : m.trainable_parameters()) {
        out.push_back(TensorRecord::from_matrix(p->name(), p->value()));
    }
    return out;
}

RunResult row(Arm arm, Setting s, std::uint64_t seed, std::map<std::string, double> acc, double macro) {
    RunResult r;
    r.arm = arm;
    r.setting = s;
    r.seed = seed;
    r.per_task = std::move(acc);
    r.macro = macro;
    return r;
}

}  // namespace

TEST_CASE("setting names round trip", "[trainer]") {
    CHECK(Setting::parse("mixture").is_mixture());
    CHECK(Setting::parse("single:reverse") == Setting::single(TaskKind::Reverse));
    CHECK(Setting::single(TaskKind::ModAdd).name() == "single:mod_add");
    CHECK(Setting::parse(Setting::mixture().name()) == Setting::mixture());
    CHECK_THROWS_AS(Setting::parse("single:succ"), ConfigError);
    CHECK_THROWS_AS(Setting::parse("single:"), ConfigError);
    CHECK_THROWS_AS(Setting::parse("both"), ConfigError);
}

TEST_CASE("config validation", "[trainer]") {
    CHECK_NOTHROW(tiny_experiment().validate());
    auto bad = [](auto mutate) {
        ExperimentConfig c = tiny_experiment();
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.train.lr = 0.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.train.epochs = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.train.balance_weight = -1.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.adapter.rank = 17; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.allocation.per_layer = {2, 2, 2}; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.suite.in_domain.clear(); }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.suite.in_domain.push_back(*c.suite.ood); }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.suite.in_domain.push_back(c.suite.in_domain[0]); }).validate(),
                    ConfigError);
    CHECK_THROWS_AS(bad([](ExperimentConfig& c) { c.pretrain.examples_per_task = 49; }).validate(), ConfigError);
}

TEST_CASE("optimizer steps", "[trainer]") {
    Parameter p("w", Matrix(1, 3, std::vector<double>{1.0, -2.0, 0.5}));
    const std::vector<Parameter*> params{&p};
    const std::vector<Matrix> grads{Matrix(1, 3, std::vector<double>{0.5, -4.0, 0.0})};

    Optimizer sgd(OptimizerKind::SGD, 0.1);
    sgd.step(params, grads);
    CHECK_THAT(p.value()(0, 0), WithinAbs(0.95, 1e-15));
    CHECK_THAT(p.value()(0, 1), WithinAbs(-1.6, 1e-15));
    CHECK(p.value()(0, 2) == 0.5);

    // Bias-corrected first Adam step moves by lr * g / (|g| + eps).
    Parameter q("w", Matrix(1, 3, std::vector<double>{1.0, -2.0, 0.5}));
    const std::vector<Parameter*> qs{&q};
    Optimizer adam(OptimizerKind::Adam, 0.01);
    adam.step(qs, grads);
    CHECK_THAT(q.value()(0, 0), WithinAbs(1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-12));
    CHECK_THAT(q.value()(0, 1), WithinAbs(-2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-12));
    CHECK(q.value()(0, 2) == 0.5);
}

TEST_CASE("suite generation is seeded", "[trainer]") {
    const ExperimentConfig c = tiny_experiment();
    const SuiteData a = generate_suite(c.suite, 3);
    const SuiteData b = generate_suite(c.suite, 3);
    const SuiteData other = generate_suite(c.suite, 4);
    CHECK(a.tasks.size() == 4);
    REQUIRE(a.ood.has_value());
    CHECK(a.tasks.count(TaskKind::Succ) == 0);
    for (const auto& [kind, td] : a.tasks) {
        CHECK(td.train.examples == b.tasks.at(kind).train.examples);
        CHECK(td.test.examples == b.tasks.at(kind).test.examples);
        CHECK(td.train.examples != other.tasks.at(kind).train.examples);
    }
}

TEST_CASE("pretraining reduces loss and freezes the base", "[trainer]") {
    const ExperimentConfig c = tiny_experiment();
    const SuiteData data = generate_suite(c.suite, c.data_seed);
    const PretrainResult r = pretrain_base(c, data);
    CHECK(r.final_loss < r.initial_loss);
    for (const Parameter* p : r.base.parameters()) {
        CHECK_FALSE(p->trainable());
    }
    CHECK(r.test_accuracy.per_task.size() == 4);
    CHECK(base_hash(r.base) == base_hash(fixture().base));
    CHECK(base_hash(r.base).size() == 40);
}

TEST_CASE("trainable sets per arm", "[trainer]") {
    const Fixture& f = fixture();
    const Rng rng(1);
    const std::size_t base_count = f.base.parameter_count();

    AdaptedModel fp = prepare_arm(f.base, Arm::FP, f.cfg, rng);
    CHECK(fp.sites.empty());
    CHECK(fp.trainable_count() == base_count);

    for (Arm arm : {Arm::LoRA, Arm::MoLA, Arm::MoSL, Arm::MoSLD}) {
        AdaptedModel m = prepare_arm(f.base, arm, f.cfg, rng);
        CAPTURE(to_string(arm));
        CHECK(m.sites.size() == 4);
        for (const Parameter* p : m.base.parameters()) {
            CHECK_FALSE(p->trainable());
        }
        std::size_t adapter_total = 0;
        for (const Parameter* p : m.adapter_parameters()) {
            CHECK(p->trainable());
            adapter_total += p->value().size();
        }
        CHECK(m.trainable_count() == adapter_total);
        for (const auto& [key, site] : m.sites) {
            const std::size_t n = arm == Arm::LoRA ? 1 : f.cfg.allocation.per_layer[key.layer];
            CHECK(site.n_experts() == n);
            CHECK(site.has_router() == (arm != Arm::LoRA));
            CHECK(site.generals().size() == (arm == Arm::MoLA ? n : 1));
            CHECK(site.hyper().drop_p == (arm == Arm::MoSLD ? f.cfg.adapter.drop_p : 0.0));
        }
    }

    ExperimentConfig no_drop = f.cfg;
    no_drop.train.dropout = false;
    const AdaptedModel m = prepare_arm(f.base, Arm::MoSLD, no_drop, rng);
    for (const auto& [key, site] : m.sites) {
        CHECK(site.hyper().drop_p == 0.0);
    }
}

TEST_CASE("fine-tuning leaves the base untouched", "[trainer]") {
    const Fixture& f = fixture();
    const std::string before = base_hash(f.base);
    for (Arm arm : {Arm::LoRA, Arm::MoSLD}) {
        const FinetuneOutput out = finetune(arm, Setting::mixture(), f.cfg, f.base, f.data, 1);
        CHECK(base_hash(out.model.base) == before);
        CHECK(out.result.base_hash == before);
    }
    CHECK(base_hash(f.base) == before);

    FinetuneOutput full = finetune(Arm::FP, Setting::single(TaskKind::Copy), f.cfg, f.base, f.data, 1);
    CHECK(base_hash(full.model.base) != before);
    CHECK(base_hash(f.base) == before);
}

TEST_CASE("fine-tuning reduces training loss", "[trainer]") {
    const Fixture& f = fixture();
    for (Arm arm : kAllArms) {
        const FinetuneOutput out = finetune(arm, Setting::mixture(), f.cfg, f.base, f.data, 2);
        CAPTURE(to_string(arm));
        CHECK(out.result.train.final_loss < out.result.train.initial_loss);
        CHECK(std::isfinite(out.result.macro));
        CHECK(out.result.per_task.size() == 4);
        CHECK(out.result.ood_accuracy.has_value());
        CHECK(out.result.train.steps == out.result.train.loss_trace.size());
    }
}

TEST_CASE("runs are deterministic per seed", "[trainer]") {
    const Fixture& f = fixture();
    FinetuneOutput a = finetune(Arm::MoSLD, Setting::single(TaskKind::Sort), f.cfg, f.base, f.data, 5);
    FinetuneOutput b = finetune(Arm::MoSLD, Setting::single(TaskKind::Sort), f.cfg, f.base, f.data, 5);
    FinetuneOutput c = finetune(Arm::MoSLD, Setting::single(TaskKind::Sort), f.cfg, f.base, f.data, 6);
    CHECK(a.model.adapter_records() == b.model.adapter_records());
    CHECK(a.result.train.loss_trace == b.result.train.loss_trace);
    CHECK(a.result.per_task == b.result.per_task);
    CHECK(a.model.adapter_records() != c.model.adapter_records());
}

TEST_CASE("MoSLD without dropout equals MoSL", "[trainer]") {
    const Fixture& f = fixture();
    ExperimentConfig cfg = f.cfg;
    cfg.adapter.drop_p = 0.0;
    FinetuneOutput mosl = finetune(Arm::MoSL, Setting::mixture(), cfg, f.base, f.data, 3);
    FinetuneOutput mosld = finetune(Arm::MoSLD, Setting::mixture(), cfg, f.base, f.data, 3);
    CHECK(mosl.model.adapter_records() == mosld.model.adapter_records());
    CHECK(mosl.result.train.loss_trace == mosld.result.train.loss_trace);
    CHECK(mosl.result.macro == mosld.result.macro);

    cfg.adapter.drop_p = 0.3;
    FinetuneOutput dropped = finetune(Arm::MoSLD, Setting::mixture(), cfg, f.base, f.data, 3);
    CHECK(dropped.model.adapter_records() != mosl.model.adapter_records());
}

TEST_CASE("router-less arms carry no balance loss", "[trainer]") {
    const Fixture& f = fixture();
    const FinetuneOutput lora = finetune(Arm::LoRA, Setting::mixture(), f.cfg, f.base, f.data, 1);
    CHECK(lora.result.train.final_aux == 0.0);
    CHECK(lora.result.routing.empty());
    CHECK(lora.result.routing_cv == 0.0);

    const FinetuneOutput mosld = finetune(Arm::MoSLD, Setting::mixture(), f.cfg, f.base, f.data, 1);
    CHECK(mosld.result.train.final_aux > 0.0);
    CHECK(mosld.result.routing.size() == 4);
    for (const SiteRouting& r : mosld.result.routing) {
        double fsum = 0.0;
        double psum = 0.0;
        for (std::size_t k = 0; k < r.stats.n_experts; ++k) {
            fsum += r.stats.token_fraction[k];
            psum += r.stats.mean_prob[k];
        }
        CHECK_THAT(fsum, WithinAbs(1.0, 1e-12));
        CHECK_THAT(psum, WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("non-finite objective aborts with the last good state", "[trainer]") {
    const Fixture& f = fixture();
    AdaptedModel m = prepare_arm(f.base, Arm::MoSLD, f.cfg, Rng(1));
    const std::vector<TensorRecord> initial = trainable_records(m);
    m.base.layers()[0].wq.value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        (void)train(m, f.data.tasks.at(TaskKind::Copy).train, f.cfg.train, Rng(2));
        FAIL("expected TrainingDiverged");
    } catch (const TrainingDiverged& e) {
        CHECK_THAT(std::string(e.what()), ContainsSubstring("step 0"));
        CHECK(e.last_good() == initial);
    }
}

TEST_CASE("delta arithmetic", "[trainer]") {
    const std::vector<RunResult> rows{
        row(Arm::LoRA, Setting::single(TaskKind::Copy), 1, {{"copy", 0.9}, {"reverse", 0.1}}, 0.5),
        row(Arm::LoRA, Setting::single(TaskKind::Reverse), 1, {{"copy", 0.2}, {"reverse", 0.6}}, 0.4),
        row(Arm::LoRA, Setting::mixture(), 1, {{"copy", 0.8}, {"reverse", 0.5}}, 0.65),
        row(Arm::MoSLD, Setting::single(TaskKind::Copy), 1, {{"copy", 0.7}}, 0.7),
        row(Arm::MoSLD, Setting::single(TaskKind::Reverse), 1, {{"reverse", 0.3}}, 0.3),
        row(Arm::MoSLD, Setting::mixture(), 1, {{"copy", 0.6}, {"reverse", 0.6}}, 0.6),
        row(Arm::MoSLD, Setting::single(TaskKind::Copy), 2, {{"copy", 0.5}}, 0.5),
        row(Arm::MoSLD, Setting::mixture(), 2, {{"copy", 0.25}}, 0.25),
    };
    const std::vector<DeltaRow> d = compute_deltas(rows);
    REQUIRE(d.size() == 3);
    for (const DeltaRow& r : d) {
        if (r.arm == Arm::LoRA) {
            CHECK_THAT(r.single_mean, WithinAbs(0.75, 1e-12));
            CHECK_THAT(r.delta, WithinAbs(-0.1, 1e-12));
        } else if (r.seed == 1) {
            CHECK_THAT(r.single_mean, WithinAbs(0.5, 1e-12));
            CHECK_THAT(r.delta, WithinAbs(0.1, 1e-12));
        } else {
            CHECK_THAT(r.delta, WithinAbs(-0.25, 1e-12));
        }
        CHECK_THAT(r.delta, WithinAbs(r.mixture_macro - r.single_mean, 1e-12));
    }
}

TEST_CASE("grid covers arms x settings x seeds", "[trainer]") {
    const Fixture& f = fixture();
    ExperimentConfig cfg = f.cfg;
    cfg.train.epochs = 1;
    const std::vector<Setting> settings = default_settings(cfg.suite);
    REQUIRE(settings.size() == 5);
    CHECK(settings.back().is_mixture());
    const std::vector<Arm> arms{Arm::LoRA, Arm::MoSLD};
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    const GridResult g = run_grid(arms, settings, seeds, cfg, f.base, f.data);
    // One single run per in-domain task plus the mixture, for each arm and seed.
    CHECK(g.rows.size() == 30);
    CHECK(g.deltas.size() == 6);
    CHECK(g.base_hash == base_hash(f.base));

    const Stamp stamp{"abc123", "9.9.9"};
    const std::string csv = results_csv(g.rows, cfg.suite, stamp);
    std::size_t lines = 0;
    for (char ch : csv) {
        lines += ch == '\n' ? 1 : 0;
    }
    CHECK(lines == 31);
    CHECK_THAT(csv, ContainsSubstring("abc123,9.9.9,mosld,mixture,3,"));
    CHECK_THAT(deltas_csv(g.deltas, stamp), ContainsSubstring("abc123,9.9.9,"));
    CHECK_THAT(routing_csv(g.rows, stamp), ContainsSubstring("abc123,9.9.9,mosld,"));
    const std::string md = summary_markdown(g, cfg.suite, stamp);
    CHECK_THAT(md, ContainsSubstring("abc123"));
    CHECK_THAT(md, ContainsSubstring("| lora"));
}

// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>

#include "mosld/backbone.hpp"
#include "mosld/checkpoint.hpp"
#include "mosld/error.hpp"
#include "reference_lora.hpp"
#include "test_helpers.hpp"

using namespace mosld;
using testing::random_matrix;

namespace {

BackboneConfig small_config() {
    BackboneConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.vocab = 20;
    c.context = 12;
    return c;
}

BaseModel small_base(std::uint64_t seed) {
    Rng rng(seed);
    return build_backbone(small_config(), rng);
}

AdapterHyper hyper(std::size_t rank, double p) {
    AdapterHyper h;
    h.rank = rank;
    h.drop_p = p;
    return h;
}

void randomize_b(AdaptedModel& m, Rng& rng) {
    for (auto& [key, site] : m.sites) {
        for (Parameter& b : site.experts()) {
            b.value() = random_matrix(b.value().rows(), b.value().cols(), rng, 0.3);
        }
    }
}

testing::PlainLoraMap plain_map(const AdaptedModel& m) {
    testing::PlainLoraMap out;
    for (const auto& [key, site] : m.sites) {
        testing::PlainLora p;
        p.rank = site.hyper().rank;
        p.scaling = site.hyper().scaling();
        const Matrix& a = site.a_shared().value();
        const Matrix& b = site.experts()[0].value();
        p.a.assign(a.data().begin(), a.data().end());
        p.b.assign(b.data().begin(), b.data().end());
        out[{key.layer, key.target == Target::Q ? 0 : 1}] = p;
    }
    return out;
}

double max_diff(const Matrix& m, const std::vector<std::vector<double>>& rows) {
    double worst = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        worst = std::max(worst, max_abs_diff(m.row(i), rows[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("forward shapes and determinism", "[backbone]") {
    const BaseModel base = small_base(1);
    const std::vector<std::size_t> one{3};
    const Matrix l1 = base_logits(base, one);
    CHECK(l1.rows() == 1);
    CHECK(l1.cols() == 20);
    const std::vector<std::size_t> tokens{1, 5, 7, 2, 19, 0};
    CHECK(base_logits(base, tokens) == base_logits(small_base(1), tokens));
    CHECK(base_logits(base, tokens) != base_logits(small_base(2), tokens));
    CHECK(l1.all_finite());
}

TEST_CASE("forward validates tokens and context", "[backbone]") {
    const BaseModel base = small_base(1);
    CHECK_THROWS_AS(base_logits(base, std::vector<std::size_t>{1, 20}), DataError);
    CHECK_THROWS_AS(base_logits(base, std::vector<std::size_t>(13, 1)), DataError);
    CHECK_THROWS_AS(base_logits(base, std::vector<std::size_t>{}), DataError);
}

TEST_CASE("causality", "[backbone]") {
    const BaseModel base = small_base(3);
    std::vector<std::size_t> tokens{4, 9, 1, 15, 6, 2, 8};
    const Matrix before = base_logits(base, tokens);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        std::vector<std::size_t> changed = tokens;
        changed[t + 1] = (changed[t + 1] + 7) % 20;
        const Matrix after = base_logits(base, changed);
        for (std::size_t p = 0; p <= t; ++p) {
            CHECK(max_abs_diff(after.row(p), before.row(p)) <= 1e-12);
        }
        CHECK(max_abs_diff(after.row(t + 1), before.row(t + 1)) > 0.0);
    }
}

TEST_CASE("packed batch equals separate forwards", "[backbone]") {
    const BaseModel base = small_base(4);
    const AdaptedModel bare = bare_model(base);
    const std::vector<std::vector<std::size_t>> seqs{{1, 2, 3}, {7}, {5, 5, 9, 11, 0}};
    Tape t;
    const ForwardTrace tr = forward(t, bare, seqs, Mode::Eval, Rng(0));
    const Matrix& packed = t.value(tr.logits);
    std::size_t row = 0;
    for (const auto& s : seqs) {
        const Matrix alone = base_logits(base, s);
        for (std::size_t i = 0; i < s.size(); ++i, ++row) {
            CHECK(max_abs_diff(packed.row(row), alone.row(i)) <= 1e-12);
        }
    }
}

TEST_CASE("attach_adapters layout", "[backbone]") {
    BackboneConfig c = small_config();
    c.n_layers = 4;
    Rng rng(5);
    const BaseModel base = build_backbone(c, rng);
    ExpertAllocation alloc{{2, 4, 6, 8}, 2};
    const AdaptedModel m = attach_adapters(base, alloc, hyper(4, 0.1), rng);
    CHECK(m.sites.size() == 8);
    for (const auto& [key, site] : m.sites) {
        CHECK(site.n_experts() == alloc.per_layer[key.layer]);
        CHECK(site.has_router());
    }
    for (const Parameter* p : m.base.parameters()) {
        CHECK_FALSE(p->trainable());
    }
    const AdaptedModel lora =
        attach_adapters(base, ExpertAllocation{{1, 1, 1, 1}, 1}, hyper(4, 0.0), rng, AdapterLayout{Sharing::Shared, false});
    for (const auto& [key, site] : lora.sites) {
        CHECK(site.n_experts() == 1);
        CHECK_FALSE(site.has_router());
    }
    CHECK(m.sites.begin()->first.name() == "layer0.q");
    AdapterHyper dup = hyper(4, 0.0);
    dup.targets = {Target::Q, Target::Q};
    CHECK_THROWS_AS(attach_adapters(base, alloc, dup, rng), ConfigError);
}

TEST_CASE("zero-delta at attach", "[backbone][property]") {
    const BaseModel base = small_base(6);
    Rng rng(7);
    const AdaptedModel m = attach_adapters(base, ExpertAllocation{{3, 2}, 2}, hyper(4, 0.2), rng);
    const std::vector<std::size_t> tokens{3, 1, 4, 1, 5, 9, 2, 6};
    const Matrix expected = base_logits(base, tokens);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        const ForwardResult r = forward(m, tokens, mode, Rng(9));
        CHECK(max_abs_diff(r.logits, expected) <= 1e-12);
        CHECK(std::isfinite(r.aux));
    }
}

TEST_CASE("single-expert model matches the reference LoRA forward", "[backbone]") {
    const BaseModel base = small_base(8);
    Rng rng(9);
    const std::vector<std::size_t> tokens{2, 7, 7, 1, 13, 4};
    for (bool router : {false, true}) {
        AdaptedModel m = attach_adapters(base, ExpertAllocation{{1, 1}, 1}, hyper(3, 0.0), rng,
                                         AdapterLayout{Sharing::Shared, router});
        randomize_b(m, rng);
        const Matrix ours = forward(m, tokens, Mode::Train, Rng(1)).logits;
        CHECK(max_diff(ours, testing::reference_logits(base, plain_map(m), tokens)) <= 1e-12);
        CHECK(max_diff(base_logits(base, tokens), testing::reference_logits(base, {}, tokens)) <= 1e-12);
    }
}

TEST_CASE("eval forward is deterministic and train dropout is seeded", "[backbone]") {
    const BaseModel base = small_base(10);
    Rng rng(11);
    AdaptedModel m = attach_adapters(base, ExpertAllocation{{4, 2}, 2}, hyper(4, 0.3), rng);
    randomize_b(m, rng);
    const std::vector<std::size_t> tokens{1, 2, 3, 4, 5};
    CHECK(forward(m, tokens, Mode::Eval, Rng(1)).logits == forward(m, tokens, Mode::Eval, Rng(2)).logits);
    CHECK(forward(m, tokens, Mode::Train, Rng(1)).logits == forward(m, tokens, Mode::Train, Rng(1)).logits);
    CHECK(forward(m, tokens, Mode::Train, Rng(1)).logits != forward(m, tokens, Mode::Train, Rng(2)).logits);
}

TEST_CASE("end-to-end gradient of CE plus balance loss", "[backbone][grad]") {
    const BaseModel base = small_base(12);
    Rng rng(13);
    AdaptedModel m = attach_adapters(base, ExpertAllocation{{4, 3}, 2}, hyper(3, 0.0), rng);
    randomize_b(m, rng);
    const std::vector<std::vector<std::size_t>> seqs{{1, 4, 9, 2}, {3, 3, 7}};
    const std::vector<std::size_t> rows{1, 2, 3, 5, 6};
    const std::vector<std::size_t> targets{4, 9, 2, 3, 7};
    const double lambda = 0.01;
    auto loss_of = [&](Tape& t) {
        const ForwardTrace tr = forward(t, m, seqs, Mode::Eval, Rng(0), rows);
        return ops::add(t, ops::cross_entropy(t, tr.logits, targets), ops::scale(t, tr.aux, lambda));
    };
    Tape t;
    t.backward(loss_of(t));
    SharedLoraLayer& site = m.sites.at(SiteKey{0, Target::V});
    for (Parameter* p : {&site.a_shared(), &site.experts()[1], &site.router()}) {
        INFO(p->name());
        const Matrix analytic = t.gradient(*p);
        const Matrix saved = p->value();
        const Matrix numeric = finite_diff_grad(
            [&](const Matrix& v) {
                p->value() = v;
                Tape probe;
                return probe.value(loss_of(probe))(0, 0);
            },
            saved);
        p->value() = saved;
        CHECK(relative_error(analytic, numeric) <= 1e-4);
    }
    for (const Parameter* p : m.base.parameters()) {
        CHECK(t.gradient(*p) == Matrix(p->value().rows(), p->value().cols()));
    }
}

TEST_CASE("checkpoint round trip", "[checkpoint]") {
    const BaseModel base = small_base(14);
    const auto records = base.to_records();
    const CheckpointMeta meta{{"manifest_hash", "abc"}, {"tool_version", "x"}};
    const std::string bytes = encode_checkpoint(records, meta);
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back.meta == meta);
    CHECK(back.tensors == records);
    const BaseModel rebuilt = BaseModel::from_records(base.config(), back.tensors);
    const std::vector<std::size_t> tokens{1, 2, 3};
    CHECK(base_logits(rebuilt, tokens) == base_logits(base, tokens));
    CHECK(encode_checkpoint(rebuilt.to_records(), meta) == bytes);

    CHECK_THROWS_AS(decode_checkpoint("NOPE"), DataError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    auto missing = records;
    missing.pop_back();
    CHECK_THROWS_AS(BaseModel::from_records(base.config(), missing), DataError);
    BackboneConfig other = base.config();
    other.d_model = 8;
    CHECK_THROWS_AS(BaseModel::from_records(other, records), DataError);

    const auto dir = std::filesystem::temp_directory_path() / "mosld_ckpt_test";
    std::filesystem::remove_all(dir);
    write_checkpoint(dir / "nested" / "base.ckpt", records, meta);
    CHECK(read_checkpoint(dir / "nested" / "base.ckpt").tensors == records);
    CHECK_THROWS_AS(read_checkpoint(dir / "absent.ckpt"), MissingArtifactError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("adapter records round trip", "[checkpoint]") {
    const BaseModel base = small_base(15);
    Rng rng(16);
    AdaptedModel m = attach_adapters(base, ExpertAllocation{{2, 2}, 2}, hyper(2, 0.0), rng);
    randomize_b(m, rng);
    const auto records = m.adapter_records();
    Rng rng2(17);
    AdaptedModel fresh = attach_adapters(base, ExpertAllocation{{2, 2}, 2}, hyper(2, 0.0), rng2);
    fresh.load_adapter_records(records);
    const std::vector<std::size_t> tokens{5, 6, 7};
    CHECK(forward(fresh, tokens, Mode::Eval, Rng(0)).logits == forward(m, tokens, Mode::Eval, Rng(0)).logits);
    auto broken = records;
    broken.front().dims = {1, 1};
    broken.front().data = {0.0};
    CHECK_THROWS_AS(fresh.load_adapter_records(broken), DataError);
}

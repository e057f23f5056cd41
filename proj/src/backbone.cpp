// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/backbone.hpp"

#include <cmath>
#include <unordered_map>

#include "mosld/error.hpp"
#include "mosld/ops.hpp"

namespace mosld {
namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double sigma, Rng rng) {
    return gaussian_matrix(rows, cols, sigma, rng);
}

double inv_sqrt(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

}  // namespace

void BackboneConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || vocab == 0 || context == 0 || ffn_mult == 0) {
        throw ConfigError("backbone: all sizes must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("backbone: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
}

BaseModel::BaseModel(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    const std::size_t f = cfg.ffn_mult * d;
    const double resid = inv_sqrt(2 * cfg.n_layers);
    tok_emb_ = Parameter("tok_emb", gaussian(cfg.vocab, d, 1.0, rng.split(1)));
    pos_emb_ = Parameter("pos_emb", gaussian(cfg.context, d, 0.5, rng.split(2)));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Rng lr = rng.split(100 + l);
        layers_.push_back(LayerWeights{
            Parameter(p + "norm1", Matrix(1, d, 1.0)),
            Parameter(p + "wq", gaussian(d, d, inv_sqrt(d), lr.split(1))),
            Parameter(p + "wk", gaussian(d, d, inv_sqrt(d), lr.split(2))),
            Parameter(p + "wv", gaussian(d, d, inv_sqrt(d), lr.split(3))),
            Parameter(p + "wo", gaussian(d, d, inv_sqrt(d) * resid, lr.split(4))),
            Parameter(p + "norm2", Matrix(1, d, 1.0)),
            Parameter(p + "w_up", gaussian(f, d, inv_sqrt(d), lr.split(5))),
            Parameter(p + "w_down", gaussian(d, f, inv_sqrt(f) * resid, lr.split(6))),
        });
    }
    final_norm_ = Parameter("final_norm", Matrix(1, d, 1.0));
    head_ = Parameter("head", gaussian(cfg.vocab, d, inv_sqrt(d), rng.split(3)));
}

template <class Self, class Fn>
void BaseModel::visit(Self& self, Fn&& fn) {
    fn(self.tok_emb_);
    fn(self.pos_emb_);
    for (auto& l : self.layers_) {
        fn(l.norm1);
        fn(l.wq);
        fn(l.wk);
        fn(l.wv);
        fn(l.wo);
        fn(l.norm2);
        fn(l.w_up);
        fn(l.w_down);
    }
    fn(self.final_norm_);
    fn(self.head_);
}

std::vector<const Parameter*> BaseModel::parameters() const {
    std::vector<const Parameter*> out;
    visit(*this, [&](const Parameter& p) { out.push_back(&p); });
    return out;
}

std::vector<Parameter*> BaseModel::parameters() {
    std::vector<Parameter*> out;
    visit(*this, [&](Parameter& p) { out.push_back(&p); });
    return out;
}

void BaseModel::set_trainable(bool trainable) {
    for (Parameter* p : parameters()) {
        p->set_trainable(trainable);
    }
}

std::size_t BaseModel::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) {
        n += p->numel();
    }
    return n;
}

std::vector<TensorRecord> BaseModel::to_records() const {
    std::vector<TensorRecord> out;
    for (const Parameter* p : parameters()) {
        out.push_back(TensorRecord::from_matrix(p->name(), p->value()));
    }
    return out;
}

BaseModel BaseModel::from_records(const BackboneConfig& cfg, std::span<const TensorRecord> records) {
    Rng scratch(0);
    BaseModel m(cfg, scratch);
    std::unordered_map<std::string, const TensorRecord*> by_name;
    for (const TensorRecord& r : records) {
        by_name.emplace(r.name, &r);
    }
    for (Parameter* p : m.parameters()) {
        auto it = by_name.find(p->name());
        if (it == by_name.end()) {
            throw DataError("checkpoint is missing tensor '" + p->name() + "'");
        }
        Matrix v = it->second->to_matrix();
        if (!v.same_shape(p->value())) {
            throw DataError("tensor '" + p->name() + "' has shape " + v.shape_str() + ", model expects " +
                            p->value().shape_str());
        }
        p->value() = std::move(v);
    }
    return m;
}

BaseModel build_backbone(const BackboneConfig& cfg, Rng& rng) { return BaseModel(cfg, rng); }

std::string SiteKey::name() const { return "layer" + std::to_string(layer) + "." + to_string(target); }

std::vector<const Parameter*> AdaptedModel::adapter_parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& [key, site] : sites) {
        for (const Parameter* p : site.parameters()) {
            out.push_back(p);
        }
    }
    return out;
}

std::vector<Parameter*> AdaptedModel::adapter_parameters() {
    std::vector<Parameter*> out;
    for (auto& [key, site] : sites) {
        for (Parameter* p : site.parameters()) {
            out.push_back(p);
        }
    }
    return out;
}

std::vector<Parameter*> AdaptedModel::trainable_parameters() {
    std::vector<Parameter*> out;
    for (Parameter* p : base.parameters()) {
        if (p->trainable()) {
            out.push_back(p);
        }
    }
    for (Parameter* p : adapter_parameters()) {
        if (p->trainable()) {
            out.push_back(p);
        }
    }
    return out;
}

std::size_t AdaptedModel::trainable_count() const {
    std::size_t n = 0;
    for (const Parameter* p : base.parameters()) {
        n += p->trainable() ? p->numel() : 0;
    }
    for (const Parameter* p : adapter_parameters()) {
        n += p->trainable() ? p->numel() : 0;
    }
    return n;
}

std::vector<TensorRecord> AdaptedModel::adapter_records() const {
    std::vector<TensorRecord> out;
    for (const Parameter* p : adapter_parameters()) {
        out.push_back(TensorRecord::from_matrix(p->name(), p->value()));
    }
    return out;
}

void AdaptedModel::load_adapter_records(std::span<const TensorRecord> records) {
    std::unordered_map<std::string, const TensorRecord*> by_name;
    for (const TensorRecord& r : records) {
        by_name.emplace(r.name, &r);
    }
    for (Parameter* p : adapter_parameters()) {
        auto it = by_name.find(p->name());
        if (it == by_name.end()) {
            throw DataError("adapter checkpoint is missing tensor '" + p->name() + "'");
        }
        Matrix v = it->second->to_matrix();
        if (!v.same_shape(p->value())) {
            throw DataError("adapter tensor '" + p->name() + "' has the wrong shape " + v.shape_str());
        }
        p->value() = std::move(v);
    }
}

AdaptedModel attach_adapters(BaseModel base, const ExpertAllocation& allocation, const AdapterHyper& hyper, Rng& rng,
                             AdapterLayout layout) {
    const BackboneConfig& cfg = base.config();
    allocation.validate(cfg.n_layers);
    hyper.validate();
    AdaptedModel m;
    m.allocation = allocation;
    m.hyper = hyper;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (Target target : hyper.targets) {
            SiteKey key{l, target};
            if (m.sites.contains(key)) {
                throw ConfigError("adapter targets list '" + std::string(to_string(target)) + "' twice");
            }
            Rng site_rng = rng.split(1000 + 2 * l + (target == Target::Q ? 0 : 1));
            m.sites.emplace(key, SharedLoraLayer(key.name(), cfg.d_model, cfg.d_model, hyper, allocation.per_layer[l],
                                                 site_rng, layout.sharing, layout.router));
        }
    }
    base.set_trainable(false);
    m.base = std::move(base);
    return m;
}

AdaptedModel bare_model(BaseModel base) {
    AdaptedModel m;
    m.allocation.per_layer.assign(base.config().n_layers, 1);
    m.allocation.top_k = 1;
    m.base = std::move(base);
    return m;
}

ForwardTrace forward(Tape& t, const AdaptedModel& model, std::span<const std::vector<std::size_t>> sequences,
                     Mode mode, const Rng& rng, std::span<const std::size_t> logit_rows) {
    const BaseModel& base = model.base;
    const BackboneConfig& cfg = base.config();
    if (sequences.empty()) {
        throw DataError("forward: empty batch");
    }
    std::vector<std::size_t> ids;
    std::vector<std::size_t> positions;
    std::vector<std::size_t> lengths;
    for (const auto& seq : sequences) {
        if (seq.empty()) {
            throw DataError("forward: empty sequence");
        }
        if (seq.size() > cfg.context) {
            throw DataError("forward: sequence of length " + std::to_string(seq.size()) + " exceeds context " +
                            std::to_string(cfg.context));
        }
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq[i] >= cfg.vocab) {
                throw DataError("forward: token id " + std::to_string(seq[i]) + " outside vocabulary of " +
                                std::to_string(cfg.vocab));
            }
            ids.push_back(seq[i]);
            positions.push_back(i);
        }
        lengths.push_back(seq.size());
    }

    ForwardTrace trace;
    Var x = ops::add(t, ops::embedding(t, t.param(base.tok_emb()), ids),
                     ops::embedding(t, t.param(base.pos_emb()), positions));
    std::vector<Var> aux_terms;
    const std::size_t top_k = model.allocation.top_k;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& w = base.layers()[l];
        const Var h = ops::rmsnorm(t, x, t.param(w.norm1));
        auto projection = [&](const Parameter& w0, Target target) {
            Var out = ops::matmul_nt(t, h, t.param(w0));
            auto it = model.sites.find(SiteKey{l, target});
            if (it == model.sites.end()) {
                return out;
            }
            Rng site_rng = rng.split(2 * l + (target == Target::Q ? 0 : 1));
            SiteOutput site = site_delta(t, it->second, h, top_k, mode, site_rng);
            if (site.gate) {
                aux_terms.push_back(balance_loss(t, *site.gate));
                trace.gates.emplace_back(it->first, *site.gate);
            }
            return ops::add(t, out, site.delta);
        };
        const Var q = projection(w.wq, Target::Q);
        const Var k = ops::matmul_nt(t, h, t.param(w.wk));
        const Var v = projection(w.wv, Target::V);
        const Var att = ops::causal_attention(t, q, k, v, lengths, cfg.n_heads);
        x = ops::add(t, x, ops::matmul_nt(t, att, t.param(w.wo)));
        const Var h2 = ops::rmsnorm(t, x, t.param(w.norm2));
        const Var up = ops::gelu(t, ops::matmul_nt(t, h2, t.param(w.w_up)));
        x = ops::add(t, x, ops::matmul_nt(t, up, t.param(w.w_down)));
    }

    Var hf = ops::rmsnorm(t, x, t.param(base.final_norm()));
    if (!logit_rows.empty()) {
        hf = ops::select_rows(t, hf, logit_rows);
    }
    trace.logits = ops::matmul_nt(t, hf, t.param(base.head()));

    if (aux_terms.empty()) {
        trace.aux = t.constant(Matrix(1, 1, 0.0));
    } else {
        trace.aux = aux_terms.front();
        for (std::size_t i = 1; i < aux_terms.size(); ++i) {
            trace.aux = ops::add(t, trace.aux, aux_terms[i]);
        }
    }
    return trace;
}

ForwardResult forward(const AdaptedModel& model, std::span<const std::size_t> tokens, Mode mode, const Rng& rng) {
    Tape t;
    const std::vector<std::vector<std::size_t>> batch{std::vector<std::size_t>(tokens.begin(), tokens.end())};
    const ForwardTrace tr = forward(t, model, batch, mode, rng);
    return ForwardResult{t.value(tr.logits), t.value(tr.aux)(0, 0)};
}

Matrix base_logits(const BaseModel& base, std::span<const std::size_t> tokens) {
    AdaptedModel m = bare_model(base);
    return forward(m, tokens, Mode::Eval, Rng(0)).logits;
}

}  // namespace mosld

// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/adapters.hpp"

#include <algorithm>
#include <cmath>

#include "mosld/error.hpp"
#include "mosld/ops.hpp"

namespace mosld {
namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double sigma, Rng rng) {
    return gaussian_matrix(rows, cols, sigma, rng);
}

Matrix apply_dropout(const Matrix& a, double p, Mode mode, Rng& rng) {
    if (mode == Mode::Eval || p == 0.0) {
        return a;
    }
    const DropoutMask mask = DropoutMask::sample(a.rows(), a.cols(), p, rng);
    const double inv_keep = 1.0 / mask.keep_prob;
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = mask.mask.data()[i] * a.data()[i] * inv_keep;
    }
    return out;
}

}  // namespace

const char* to_string(Target t) { return t == Target::Q ? "q" : "v"; }

void AdapterHyper::validate() const {
    if (rank == 0) {
        throw ConfigError("adapter rank must be >= 1");
    }
    if (!(alpha > 0.0)) {
        throw ConfigError("adapter alpha must be > 0");
    }
    if (!(drop_p >= 0.0 && drop_p < 1.0)) {
        throw ConfigError("adapter drop_p must be in [0, 1), got " + std::to_string(drop_p));
    }
    if (targets.empty()) {
        throw ConfigError("adapter targets must name at least one of q, v");
    }
    if (a_init_sigma < 0.0) {
        throw ConfigError("adapter a_init_sigma must be >= 0");
    }
}

double AdapterHyper::a_sigma() const {
    return a_init_sigma > 0.0 ? a_init_sigma : 1.0 / std::sqrt(static_cast<double>(rank));
}

DropoutMask DropoutMask::sample(std::size_t rows, std::size_t cols, double drop_p, Rng& rng) {
    DropoutMask m{Matrix(rows, cols), 1.0 - drop_p};
    for (double& v : m.mask.data()) {
        v = rng.bernoulli(m.keep_prob) ? 1.0 : 0.0;
    }
    return m;
}

DropoutMask DropoutMask::ones(std::size_t rows, std::size_t cols) { return DropoutMask{Matrix(rows, cols, 1.0), 1.0}; }

SharedLoraLayer::SharedLoraLayer(const std::string& prefix, std::size_t d_in, std::size_t d_out,
                                 const AdapterHyper& hyper, std::size_t n_experts, Rng& rng, Sharing sharing,
                                 bool with_router)
    : d_in_(d_in), d_out_(d_out), hyper_(hyper), sharing_(sharing), has_router_(with_router) {
    hyper_.validate();
    if (n_experts == 0) {
        throw ConfigError(prefix + ": a site needs at least one expert");
    }
    if (hyper_.rank > std::min(d_in, d_out)) {
        throw ConfigError(prefix + ": rank " + std::to_string(hyper_.rank) + " exceeds min(d_in, d_out) = " +
                          std::to_string(std::min(d_in, d_out)));
    }
    if (!with_router && n_experts != 1) {
        throw ConfigError(prefix + ": a router-less site must have exactly one expert");
    }
    const double sigma = hyper_.a_sigma();
    if (sharing == Sharing::Shared) {
        generals_.emplace_back(prefix + ".A", gaussian(hyper_.rank, d_in, sigma, rng.split(1)));
    } else {
        for (std::size_t k = 0; k < n_experts; ++k) {
            generals_.emplace_back(prefix + ".A" + std::to_string(k),
                                   gaussian(hyper_.rank, d_in, sigma, rng.split(100 + k)));
        }
    }
    for (std::size_t k = 0; k < n_experts; ++k) {
        experts_.emplace_back(prefix + ".B" + std::to_string(k), Matrix(d_out, hyper_.rank));
    }
    if (with_router) {
        router_ = Parameter(prefix + ".router",
                            gaussian(n_experts, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng.split(2)));
    }
}

const Parameter& SharedLoraLayer::general_for(std::size_t expert) const {
    if (expert >= experts_.size()) {
        throw InternalError("expert index " + std::to_string(expert) + " out of range for " +
                            std::to_string(experts_.size()) + " experts");
    }
    return sharing_ == Sharing::Shared ? generals_.front() : generals_[expert];
}

Parameter& SharedLoraLayer::general_for(std::size_t expert) {
    return const_cast<Parameter&>(std::as_const(*this).general_for(expert));
}

std::vector<const Parameter*> SharedLoraLayer::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& a : generals_) {
        out.push_back(&a);
    }
    for (const auto& b : experts_) {
        out.push_back(&b);
    }
    if (has_router_) {
        out.push_back(&router_);
    }
    return out;
}

std::vector<Parameter*> SharedLoraLayer::parameters() {
    std::vector<Parameter*> out;
    for (auto& a : generals_) {
        out.push_back(&a);
    }
    for (auto& b : experts_) {
        out.push_back(&b);
    }
    if (has_router_) {
        out.push_back(&router_);
    }
    return out;
}

SharedLoraLayer init_shared_layer(std::size_t d_in, std::size_t d_out, const AdapterHyper& hyper,
                                  std::size_t n_experts, Rng& rng) {
    return SharedLoraLayer("site", d_in, d_out, hyper, n_experts, rng);
}

Matrix dropped_a(const SharedLoraLayer& layer, const DropoutMask& mask) {
    const Matrix& a = layer.a_shared().value();
    if (!mask.mask.same_shape(a)) {
        throw ConfigError("dropped_a: mask " + mask.mask.shape_str() + " does not match A " + a.shape_str());
    }
    const double inv_keep = 1.0 / mask.keep_prob;
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = mask.mask.data()[i] * a.data()[i] * inv_keep;
    }
    return out;
}

Matrix dropped_a(const SharedLoraLayer& layer, Mode mode, Rng& rng) {
    return apply_dropout(layer.a_shared().value(), layer.hyper().drop_p, mode, rng);
}

GateResult trivial_gate() { return GateResult{{0}, {1.0}, {1.0}}; }

Vector adapter_delta(const SharedLoraLayer& layer, std::span<const double> x, const GateResult& gate, Mode mode,
                     Rng& rng) {
    if (x.size() != layer.d_in()) {
        throw ConfigError("adapter_delta: input of length " + std::to_string(x.size()) + ", site expects " +
                          std::to_string(layer.d_in()));
    }
    if (gate.indices.size() != gate.scores.size()) {
        throw InternalError("adapter_delta: gate indices and scores differ in length");
    }
    for (std::size_t idx : gate.indices) {
        if (idx >= layer.n_experts()) {
            throw InternalError("adapter_delta: router selected expert " + std::to_string(idx) + " of " +
                                std::to_string(layer.n_experts()));
        }
    }
    Vector delta(layer.d_out(), 0.0);
    const double scaling = layer.hyper().scaling();
    if (layer.sharing() == Sharing::Shared) {
        const Vector ax = matvec(dropped_a(layer, mode, rng), x);
        for (std::size_t s = 0; s < gate.indices.size(); ++s) {
            const Vector bx = matvec(layer.experts()[gate.indices[s]].value(), ax);
            for (std::size_t j = 0; j < delta.size(); ++j) {
                delta[j] += scaling * gate.scores[s] * bx[j];
            }
        }
        return delta;
    }
    for (std::size_t s = 0; s < gate.indices.size(); ++s) {
        const std::size_t k = gate.indices[s];
        const Vector ax = matvec(apply_dropout(layer.general_for(k).value(), layer.hyper().drop_p, mode, rng), x);
        const Vector bx = matvec(layer.experts()[k].value(), ax);
        for (std::size_t j = 0; j < delta.size(); ++j) {
            delta[j] += scaling * gate.scores[s] * bx[j];
        }
    }
    return delta;
}

Vector mosld_forward(const Matrix& w0, const SharedLoraLayer& layer, std::span<const double> x, const GateResult& gate,
                     Mode mode, Rng& rng) {
    if (w0.rows() != layer.d_out() || w0.cols() != layer.d_in()) {
        throw ConfigError("mosld_forward: W0 " + w0.shape_str() + " does not match site (" +
                          std::to_string(layer.d_out()) + "x" + std::to_string(layer.d_in()) + ")");
    }
    Vector h = matvec(w0, x);
    const Vector d = adapter_delta(layer, x, gate, mode, rng);
    for (std::size_t j = 0; j < h.size(); ++j) {
        h[j] += d[j];
    }
    return h;
}

Matrix merge_check(const SharedLoraLayer& layer, const GateResult& gate) {
    Matrix w(layer.d_out(), layer.d_in());
    const double scaling = layer.hyper().scaling();
    for (std::size_t s = 0; s < gate.indices.size(); ++s) {
        const std::size_t k = gate.indices[s];
        if (k >= layer.n_experts()) {
            throw InternalError("merge_check: expert " + std::to_string(k) + " out of range");
        }
        Matrix term = matmul(layer.experts()[k].value(), layer.general_for(k).value());
        term *= scaling * gate.scores[s];
        w += term;
    }
    return w;
}

Var gated_up_projection(Tape& t, std::span<const Var> projected, std::span<const Var> up, Var scores,
                        double scaling) {
    if (projected.size() != 1 && projected.size() != up.size()) {
        throw InternalError("gated_up_projection: need one shared projection or one per expert");
    }
    const Matrix& sv = t.value(scores);
    const std::size_t n = sv.rows();
    if (sv.cols() != up.size()) {
        throw InternalError("gated_up_projection: scores have " + std::to_string(sv.cols()) + " columns for " +
                            std::to_string(up.size()) + " experts");
    }
    const std::size_t d_out = t.value(up[0]).rows();
    const std::size_t rank = t.value(up[0]).cols();
    auto src = [&](std::size_t k) { return projected.size() == 1 ? projected[0] : projected[k]; };
    for (std::size_t k = 0; k < up.size(); ++k) {
        if (t.value(src(k)).rows() != n || t.value(src(k)).cols() != rank) {
            throw ConfigError("gated_up_projection: projection " + t.value(src(k)).shape_str() + " vs rank " +
                              std::to_string(rank));
        }
    }

    Matrix out(n, d_out);
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.row(i).data();
        for (std::size_t k = 0; k < up.size(); ++k) {
            const double s = sv(i, k);
            if (s == 0.0) {
                continue;
            }
            const Matrix& b = t.value(up[k]);
            const double* u = t.value(src(k)).row(i).data();
            for (std::size_t j = 0; j < d_out; ++j) {
                const double* brow = b.row(j).data();
                double acc = 0.0;
                for (std::size_t c = 0; c < rank; ++c) {
                    acc += brow[c] * u[c];
                }
                orow[j] += scaling * s * acc;
            }
        }
    }

    bool needs = t.requires_grad(scores);
    for (Var v : up) {
        needs = needs || t.requires_grad(v);
    }
    for (Var v : projected) {
        needs = needs || t.requires_grad(v);
    }
    std::vector<Var> proj(projected.begin(), projected.end());
    std::vector<Var> ups(up.begin(), up.end());
    return t.record(std::move(out), needs, [proj, ups, scores, scaling](Tape& tp, const Matrix& g) {
        const Matrix& sv = tp.value(scores);
        const std::size_t n = sv.rows();
        const std::size_t d_out = tp.value(ups[0]).rows();
        const std::size_t rank = tp.value(ups[0]).cols();
        const bool g_scores = tp.requires_grad(scores);
        for (std::size_t k = 0; k < ups.size(); ++k) {
            const Var pk = proj.size() == 1 ? proj[0] : proj[k];
            const Matrix& b = tp.value(ups[k]);
            const Matrix& u = tp.value(pk);
            const bool g_b = tp.requires_grad(ups[k]);
            const bool g_u = tp.requires_grad(pk);
            for (std::size_t i = 0; i < n; ++i) {
                const double s = sv(i, k);
                if (s == 0.0) {
                    continue;
                }
                const double* grow = g.row(i).data();
                const double* urow = u.row(i).data();
                if (g_scores) {
                    double ds = 0.0;
                    for (std::size_t j = 0; j < d_out; ++j) {
                        const double* brow = b.row(j).data();
                        double acc = 0.0;
                        for (std::size_t c = 0; c < rank; ++c) {
                            acc += brow[c] * urow[c];
                        }
                        ds += grow[j] * acc;
                    }
                    tp.grad_buffer(scores)(i, k) += scaling * ds;
                }
                const double w = scaling * s;
                if (g_b) {
                    Matrix& gb = tp.grad_buffer(ups[k]);
                    for (std::size_t j = 0; j < d_out; ++j) {
                        const double gj = w * grow[j];
                        if (gj == 0.0) {
                            continue;
                        }
                        double* gbrow = gb.row(j).data();
                        for (std::size_t c = 0; c < rank; ++c) {
                            gbrow[c] += gj * urow[c];
                        }
                    }
                }
                if (g_u) {
                    double* gurow = tp.grad_buffer(pk).row(i).data();
                    for (std::size_t j = 0; j < d_out; ++j) {
                        const double gj = w * grow[j];
                        const double* brow = b.row(j).data();
                        for (std::size_t c = 0; c < rank; ++c) {
                            gurow[c] += gj * brow[c];
                        }
                    }
                }
            }
        }
    });
}

SiteOutput site_delta(Tape& t, const SharedLoraLayer& layer, Var x, std::size_t top_k, Mode mode, Rng& rng) {
    const std::size_t n = t.value(x).rows();
    const double p = layer.hyper().drop_p;
    const bool drop = mode == Mode::Train && p > 0.0;

    std::vector<Var> projected;
    for (std::size_t g = 0; g < layer.generals().size(); ++g) {
        const Parameter& a = layer.generals()[g];
        Var av = t.param(a);
        if (drop) {
            const DropoutMask mask = DropoutMask::sample(a.value().rows(), a.value().cols(), p, rng);
            av = ops::masked_scale(t, av, mask.mask, 1.0 / mask.keep_prob);
        }
        projected.push_back(ops::matmul_nt(t, x, av));
    }
    std::vector<Var> up;
    for (const Parameter& b : layer.experts()) {
        up.push_back(t.param(b));
    }

    SiteOutput out;
    Var scores;
    if (layer.has_router()) {
        out.gate = gate_batch(t, x, t.param(layer.router()), std::min(top_k, layer.n_experts()));
        scores = out.gate->scores;
    } else {
        scores = t.constant(Matrix(n, 1, 1.0));
    }
    out.delta = gated_up_projection(t, projected, up, scores, layer.hyper().scaling());
    return out;
}

}  // namespace mosld

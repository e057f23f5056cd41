// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mosld/error.hpp"
#include "mosld/ops.hpp"

namespace mosld {

void ExpertAllocation::validate(std::size_t n_layers) const {
    if (per_layer.empty()) {
        throw ConfigError("expert allocation is empty");
    }
    if (n_layers != 0 && per_layer.size() != n_layers) {
        throw ConfigError("expert allocation has " + std::to_string(per_layer.size()) + " entries but the model has " +
                          std::to_string(n_layers) + " layers");
    }
    if (top_k == 0) {
        throw ConfigError("top_k must be >= 1");
    }
    for (std::size_t n : per_layer) {
        if (n == 0) {
            throw ConfigError("every layer needs at least one expert");
        }
    }
}

std::size_t ExpertAllocation::total_experts() const {
    return std::accumulate(per_layer.begin(), per_layer.end(), std::size_t{0});
}

std::string ExpertAllocation::to_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < per_layer.size(); ++i) {
        s += (i ? "," : "") + std::to_string(per_layer[i]);
    }
    return s + ")";
}

ExpertAllocation ExpertAllocation::preset(const std::string& name, std::size_t n_layers, std::size_t top_k) {
    std::vector<std::size_t> quarters;
    if (name == "descending") {
        quarters = {8, 6, 4, 2};
    } else if (name == "ascending") {
        quarters = {2, 4, 6, 8};
    } else if (name == "uniform") {
        quarters = {5, 5, 5, 5};
    } else if (name == "single") {
        quarters = {1, 1, 1, 1};
    } else {
        throw ConfigError("unknown allocation preset '" + name + "' (descending, ascending, uniform, single)");
    }
    if (n_layers == 0) {
        throw ConfigError("allocation preset needs n_layers >= 1");
    }
    ExpertAllocation a;
    a.top_k = top_k;
    for (std::size_t l = 0; l < n_layers; ++l) {
        a.per_layer.push_back(quarters[(4 * l) / n_layers]);
    }
    return a;
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
    idx.resize(k);
    return idx;
}

GateResult gate_from_logits(std::span<const double> logits, std::size_t k) {
    if (k == 0 || logits.empty()) {
        throw ConfigError("gate: needs top_k >= 1 and at least one expert");
    }
    k = std::min(k, logits.size());
    GateResult g;
    g.full_probs = softmax(logits);
    g.indices = top_k_indices(g.full_probs, k);
    double z = 0.0;
    for (std::size_t i : g.indices) {
        z += g.full_probs[i];
    }
    for (std::size_t i : g.indices) {
        g.scores.push_back(g.full_probs[i] / z);
    }
    return g;
}

GateResult gate(const Matrix& router_w, std::span<const double> x, std::size_t k) {
    const Vector logits = matvec(router_w, x);
    return gate_from_logits(logits, k);
}

LoadBalanceStats accumulate_stats(std::span<const GateResult> gates, std::size_t n_experts) {
    if (gates.empty()) {
        throw UsageError("accumulate_stats: empty batch");
    }
    LoadBalanceStats s;
    s.n_experts = n_experts;
    s.n_tokens = gates.size();
    s.token_fraction.assign(n_experts, 0.0);
    s.mean_prob.assign(n_experts, 0.0);
    std::size_t assignments = 0;
    for (const GateResult& g : gates) {
        if (g.full_probs.size() != n_experts) {
            throw InternalError("accumulate_stats: gate over " + std::to_string(g.full_probs.size()) +
                                " experts, expected " + std::to_string(n_experts));
        }
        for (std::size_t i : g.indices) {
            s.token_fraction[i] += 1.0;
            ++assignments;
        }
        for (std::size_t k = 0; k < n_experts; ++k) {
            s.mean_prob[k] += g.full_probs[k];
        }
    }
    for (std::size_t k = 0; k < n_experts; ++k) {
        s.token_fraction[k] /= static_cast<double>(assignments);
        s.mean_prob[k] /= static_cast<double>(gates.size());
    }
    return s;
}

double load_balance_loss(const LoadBalanceStats& stats) {
    double acc = 0.0;
    for (std::size_t k = 0; k < stats.n_experts; ++k) {
        acc += stats.token_fraction[k] * stats.mean_prob[k];
    }
    return static_cast<double>(stats.n_experts) * acc;
}

double coefficient_of_variation(std::span<const double> values) {
    if (values.empty()) {
        return 0.0;
    }
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double var = 0.0;
    for (double v : values) {
        var += (v - mean) * (v - mean);
    }
    return mean == 0.0 ? 0.0 : std::sqrt(var / n) / mean;
}

Var topk_renorm(Tape& t, Var probs, std::size_t k, std::vector<std::vector<std::size_t>>& selected) {
    const Matrix& p = t.value(probs);
    if (k == 0 || p.cols() == 0) {
        throw ConfigError("topk_renorm: needs top_k >= 1 and at least one expert");
    }
    k = std::min(k, p.cols());
    Matrix out(p.rows(), p.cols());
    selected.assign(p.rows(), {});
    std::vector<double> norms(p.rows());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        selected[i] = top_k_indices(p.row(i), k);
        double z = 0.0;
        for (std::size_t j : selected[i]) {
            z += p(i, j);
        }
        norms[i] = z;
        for (std::size_t j : selected[i]) {
            out(i, j) = p(i, j) / z;
        }
    }
    return t.record(std::move(out), t.requires_grad(probs),
                    [probs, sel = selected, norms = std::move(norms)](Tape& tp, const Matrix& g) {
                        const Matrix& p = tp.value(probs);
                        Matrix& gp = tp.grad_buffer(probs);
                        for (std::size_t i = 0; i < p.rows(); ++i) {
                            // d(p_j/Z)/dp_m = delta_jm / Z - p_j / Z^2 for m in S.
                            const double z = norms[i];
                            double weighted = 0.0;
                            for (std::size_t j : sel[i]) {
                                weighted += g(i, j) * p(i, j);
                            }
                            for (std::size_t m : sel[i]) {
                                gp(i, m) += g(i, m) / z - weighted / (z * z);
                            }
                        }
                    });
}

BatchGate gate_batch(Tape& t, Var x, Var router_w, std::size_t k) {
    BatchGate bg;
    bg.n_experts = t.value(router_w).rows();
    const Var logits = ops::matmul_nt(t, x, router_w);
    bg.probs = ops::softmax_rows(t, logits);
    bg.scores = topk_renorm(t, bg.probs, k, bg.selected);
    return bg;
}

LoadBalanceStats batch_stats(const Tape& t, const BatchGate& gate) {
    const Matrix& p = t.value(gate.probs);
    LoadBalanceStats s;
    s.n_experts = gate.n_experts;
    s.n_tokens = p.rows();
    s.token_fraction.assign(gate.n_experts, 0.0);
    s.mean_prob.assign(gate.n_experts, 0.0);
    std::size_t assignments = 0;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        for (std::size_t j : gate.selected[i]) {
            s.token_fraction[j] += 1.0;
            ++assignments;
        }
        for (std::size_t j = 0; j < gate.n_experts; ++j) {
            s.mean_prob[j] += p(i, j);
        }
    }
    for (std::size_t j = 0; j < gate.n_experts; ++j) {
        s.token_fraction[j] /= static_cast<double>(std::max<std::size_t>(assignments, 1));
        s.mean_prob[j] /= static_cast<double>(std::max<std::size_t>(p.rows(), 1));
    }
    return s;
}

std::vector<GateResult> to_gate_results(const Tape& t, const BatchGate& gate) {
    const Matrix& p = t.value(gate.probs);
    const Matrix& s = t.value(gate.scores);
    std::vector<GateResult> out(p.rows());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        out[i].indices = gate.selected[i];
        for (std::size_t j : gate.selected[i]) {
            out[i].scores.push_back(s(i, j));
        }
        out[i].full_probs.assign(p.row(i).begin(), p.row(i).end());
    }
    return out;
}

Var balance_loss(Tape& t, const BatchGate& gate) {
    const LoadBalanceStats s = batch_stats(t, gate);
    const double value = load_balance_loss(s);
    const double n_experts = static_cast<double>(gate.n_experts);
    const double n_tokens = static_cast<double>(s.n_tokens);
    return t.record(Matrix(1, 1, value), t.requires_grad(gate.probs),
                    [probs = gate.probs, f = s.token_fraction, n_experts, n_tokens](Tape& tp, const Matrix& g) {
                        Matrix& gp = tp.grad_buffer(probs);
                        for (std::size_t i = 0; i < gp.rows(); ++i) {
                            for (std::size_t j = 0; j < gp.cols(); ++j) {
                                gp(i, j) += g(0, 0) * n_experts * f[j] / n_tokens;
                            }
                        }
                    });
}

}  // namespace mosld

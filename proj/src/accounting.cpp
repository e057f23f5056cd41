// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/accounting.hpp"

#include <algorithm>
#include <cctype>
#include <iomanip>
#include <sstream>

#include "mosld/backbone.hpp"
#include "mosld/error.hpp"

namespace mosld {
namespace {

std::string mean_experts(const GeometrySpec& g) {
    const std::uint64_t total = g.expert_total();
    if (total % g.layers == 0) {
        return std::to_string(total / g.layers);
    }
    std::ostringstream s;
    s << std::setprecision(3) << static_cast<double>(total) / static_cast<double>(g.layers);
    return s.str();
}

std::string formula(const GeometrySpec& g, Arm method) {
    const std::string layers = std::to_string(g.layers);
    switch (method) {
        case Arm::FP: return "/";
        case Arm::LoRA: return "(1A+1B)*" + layers;
        case Arm::MoLA: return "(" + mean_experts(g) + "A+" + mean_experts(g) + "B)*" + layers;
        case Arm::MoSL:
        case Arm::MoSLD: return "(1A+" + mean_experts(g) + "B)*" + layers;
    }
    return "";
}

std::string fmt_billions(std::uint64_t n) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << static_cast<double>(n) / 1e9 << "B";
    return s.str();
}

}  // namespace

std::string to_string(Arm arm) {
    switch (arm) {
        case Arm::FP: return "fp";
        case Arm::LoRA: return "lora";
        case Arm::MoLA: return "mola";
        case Arm::MoSL: return "mosl";
        case Arm::MoSLD: return "mosld";
    }
    return "?";
}

Arm parse_arm(const std::string& name) {
    std::string lower = name;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    for (Arm a : kAllArms) {
        if (to_string(a) == lower) {
            return a;
        }
    }
    throw ConfigError("unknown arm '" + name + "'; valid arms: fp, lora, mola, mosl, mosld");
}

GeometrySpec GeometrySpec::reference() { return GeometrySpec{}; }

GeometrySpec GeometrySpec::of(const AdaptedModel& model) {
    const BackboneConfig& cfg = model.base.config();
    GeometrySpec g;
    g.layers = cfg.n_layers;
    g.d_in = cfg.d_model;
    g.d_out = cfg.d_model;
    g.rank = model.hyper.rank;
    g.targets = model.hyper.targets.size();
    g.experts_per_layer.assign(model.allocation.per_layer.begin(), model.allocation.per_layer.end());
    g.top_k = model.allocation.top_k;
    g.base_params = model.base.parameter_count();
    return g;
}

void GeometrySpec::validate() const {
    if (layers == 0 || d_in == 0 || d_out == 0 || rank == 0 || targets == 0 || top_k == 0) {
        throw ConfigError("geometry: all sizes must be positive");
    }
    if (!experts_per_layer.empty() && experts_per_layer.size() != layers) {
        throw ConfigError("geometry: " + std::to_string(experts_per_layer.size()) + " expert counts for " +
                          std::to_string(layers) + " layers");
    }
    for (std::uint64_t l = 0; l < layers; ++l) {
        if (experts_at(l) == 0) {
            throw ConfigError("geometry: every layer needs at least one expert");
        }
    }
}

std::uint64_t GeometrySpec::experts_at(std::uint64_t layer) const {
    return experts_per_layer.empty() ? experts : experts_per_layer[layer];
}

std::uint64_t GeometrySpec::expert_total() const {
    std::uint64_t s = 0;
    for (std::uint64_t l = 0; l < layers; ++l) {
        s += experts_at(l);
    }
    return s;
}

ParamReport count_trainable(const GeometrySpec& g, Arm method) {
    g.validate();
    ParamReport r{method, 0, 0, formula(g, method)};
    const std::uint64_t r_in = g.rank * g.d_in;
    const std::uint64_t r_out = g.rank * g.d_out;
    switch (method) {
        case Arm::FP: r.trainable = g.base_params; break;
        case Arm::LoRA: r.trainable = g.targets * g.layers * (r_in + r_out); break;
        case Arm::MoLA: {
            std::uint64_t per_target = 0;
            for (std::uint64_t l = 0; l < g.layers; ++l) {
                per_target += g.experts_at(l) * (r_in + r_out) + g.d_in * g.experts_at(l);
            }
            r.trainable = g.targets * per_target;
            break;
        }
        case Arm::MoSL:
        case Arm::MoSLD: {
            std::uint64_t per_target = 0;
            for (std::uint64_t l = 0; l < g.layers; ++l) {
                per_target += r_in + g.experts_at(l) * r_out + g.d_in * g.experts_at(l);
            }
            r.trainable = g.targets * per_target;
            break;
        }
    }
    return r;
}

ParamReport count_forward(const GeometrySpec& g, Arm method, std::uint64_t base_params) {
    g.validate();
    if (base_params == 0) {
        throw ConfigError("count_forward: base_params must be > 0");
    }
    ParamReport r{method, 0, base_params, formula(g, method)};
    const std::uint64_t r_in = g.rank * g.d_in;
    const std::uint64_t r_out = g.rank * g.d_out;
    for (std::uint64_t l = 0; l < g.layers; ++l) {
        const std::uint64_t n = g.experts_at(l);
        const std::uint64_t k = std::min(g.top_k, n);
        std::uint64_t site = 0;
        switch (method) {
            case Arm::FP: break;
            case Arm::LoRA: site = r_in + r_out; break;
            case Arm::MoLA: site = k * (r_in + r_out) + g.d_in * n; break;
            case Arm::MoSL:
            case Arm::MoSLD: site = r_in + k * r_out + g.d_in * n; break;
        }
        r.forward += g.targets * site;
    }
    return r;
}

ParamReport count_params(const GeometrySpec& g, Arm method) {
    ParamReport r = count_trainable(g, method);
    r.forward = count_forward(g, method, g.base_params).forward;
    return r;
}

std::vector<ParamReport> report_table(const GeometrySpec& g, std::span<const Arm> methods) {
    std::vector<ParamReport> rows;
    for (Arm m : methods) {
        rows.push_back(count_params(g, m));
    }
    return rows;
}

std::string report_markdown(std::span<const ParamReport> rows) {
    std::ostringstream s;
    s << "| Method | LoRA matrices | Forward params | Trainable params | Forward (B) | Trainable (B) |\n";
    s << "|---|---|---:|---:|---:|---:|\n";
    for (const ParamReport& r : rows) {
        s << "| " << to_string(r.method) << " | " << r.formula << " | " << r.forward << " | " << r.trainable << " | "
          << fmt_billions(r.forward) << " | " << fmt_billions(r.trainable) << " |\n";
    }
    return s.str();
}

std::string report_csv(std::span<const ParamReport> rows) {
    std::ostringstream s;
    s << "method,formula,forward,trainable\n";
    for (const ParamReport& r : rows) {
        s << to_string(r.method) << "," << r.formula << "," << r.forward << "," << r.trainable << "\n";
    }
    return s.str();
}

std::uint64_t count_trainable_walk(const AdaptedModel& model) { return model.trainable_count(); }

}  // namespace mosld

// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Small pre-norm decoder-only transformer. The query and value projections
// of every layer can carry adapter sites; everything else stays frozen while
// adapters train.

#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mosld/adapters.hpp"
#include "mosld/checkpoint.hpp"
#include "mosld/rng.hpp"
#include "mosld/routing.hpp"
#include "mosld/tape.hpp"

namespace mosld {

struct BackboneConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t vocab = 64;
    std::size_t context = 32;
    std::size_t ffn_mult = 4;

    void validate() const;
    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct LayerWeights {
    Parameter norm1;
    Parameter wq, wk, wv, wo;  ///< d x d, stored out x in
    Parameter norm2;
    Parameter w_up;    ///< (ffn_mult*d) x d
    Parameter w_down;  ///< d x (ffn_mult*d)
};

class BaseModel {
public:
    BaseModel() = default;
    BaseModel(const BackboneConfig& cfg, Rng& rng);

    [[nodiscard]] const BackboneConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] const Parameter& tok_emb() const noexcept { return tok_emb_; }
    [[nodiscard]] const Parameter& pos_emb() const noexcept { return pos_emb_; }
    [[nodiscard]] const std::vector<LayerWeights>& layers() const noexcept { return layers_; }
    [[nodiscard]] std::vector<LayerWeights>& layers() noexcept { return layers_; }
    [[nodiscard]] const Parameter& final_norm() const noexcept { return final_norm_; }
    [[nodiscard]] const Parameter& head() const noexcept { return head_; }

    [[nodiscard]] std::vector<const Parameter*> parameters() const;
    [[nodiscard]] std::vector<Parameter*> parameters();
    void set_trainable(bool trainable);
    [[nodiscard]] std::size_t parameter_count() const;

    [[nodiscard]] std::vector<TensorRecord> to_records() const;
    /// Rebuilds a model from records written by to_records(). Throws DataError
    /// if a tensor is missing or has the wrong shape.
    [[nodiscard]] static BaseModel from_records(const BackboneConfig& cfg, std::span<const TensorRecord> records);

private:
    template <class Self, class Fn>
    static void visit(Self& self, Fn&& fn);

    BackboneConfig cfg_;
    Parameter tok_emb_;
    Parameter pos_emb_;
    std::vector<LayerWeights> layers_;
    Parameter final_norm_;
    Parameter head_;
};

/// Deterministic initialization under the given stream.
[[nodiscard]] BaseModel build_backbone(const BackboneConfig& cfg, Rng& rng);

struct SiteKey {
    std::size_t layer = 0;
    Target target = Target::Q;
    auto operator<=>(const SiteKey&) const = default;
    [[nodiscard]] std::string name() const;
};

/// Structural choice for the adapters attached to a base model.
struct AdapterLayout {
    Sharing sharing = Sharing::Shared;
    bool router = true;
};

class AdaptedModel {
public:
    BaseModel base;
    std::map<SiteKey, SharedLoraLayer> sites;
    ExpertAllocation allocation;
    AdapterHyper hyper;

    [[nodiscard]] std::vector<const Parameter*> adapter_parameters() const;
    [[nodiscard]] std::vector<Parameter*> adapter_parameters();
    /// Every parameter with trainable() == true, base and adapters.
    [[nodiscard]] std::vector<Parameter*> trainable_parameters();
    [[nodiscard]] std::size_t trainable_count() const;

    [[nodiscard]] std::vector<TensorRecord> adapter_records() const;
    /// Overwrites adapter values from records; throws DataError on mismatch.
    void load_adapter_records(std::span<const TensorRecord> records);
};

/// Creates one site per (layer, target); site l gets allocation.per_layer[l]
/// experts. Base parameters are marked frozen.
[[nodiscard]] AdaptedModel attach_adapters(BaseModel base, const ExpertAllocation& allocation,
                                           const AdapterHyper& hyper, Rng& rng, AdapterLayout layout = {});

/// A model without adapters (for pretraining and full fine-tuning).
[[nodiscard]] AdaptedModel bare_model(BaseModel base);

struct ForwardTrace {
    Var logits;  ///< one row per requested position
    Var aux;     ///< summed load-balance loss over routed sites (1x1)
    std::vector<std::pair<SiteKey, BatchGate>> gates;
};

/// Tape forward over a packed batch of sequences. `logit_rows` selects packed
/// row indices whose logits are computed (empty: all rows). Dropout masks for
/// site s are drawn from rng.split(s) in Train mode.
ForwardTrace forward(Tape& t, const AdaptedModel& model, std::span<const std::vector<std::size_t>> sequences,
                     Mode mode, const Rng& rng, std::span<const std::size_t> logit_rows = {});

struct ForwardResult {
    Matrix logits;
    double aux = 0.0;
};

/// Single-sequence convenience forward (no gradients).
[[nodiscard]] ForwardResult forward(const AdaptedModel& model, std::span<const std::size_t> tokens, Mode mode,
                                    const Rng& rng);
[[nodiscard]] Matrix base_logits(const BaseModel& base, std::span<const std::size_t> tokens);

}  // namespace mosld

// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Base pretraining, adapter fine-tuning per method arm, and the
// single-vs-mixture experiment grid.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mosld/adapters.hpp"
#include "mosld/arm.hpp"
#include "mosld/backbone.hpp"
#include "mosld/checkpoint.hpp"
#include "mosld/error.hpp"
#include "mosld/manifest.hpp"
#include "mosld/routing.hpp"
#include "mosld/tasks.hpp"

namespace mosld {

enum class OptimizerKind { SGD, Adam };

struct TrainConfig {
    double lr = 3e-4;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double balance_weight = 0.01;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::uint64_t seed = 1;
    /// When false the MoSLD arm trains with drop_p = 0.
    bool dropout = true;

    void validate() const;
};

struct PretrainConfig {
    std::size_t examples_per_task = 200;
    std::size_t epochs = 30;
    double lr = 3e-3;
    std::size_t batch_size = 32;
};

struct ExperimentConfig {
    BackboneConfig backbone;
    AdapterHyper adapter;
    ExpertAllocation allocation = ExpertAllocation::preset("descending", 4, 2);
    TaskSuite suite = default_suite(4, 2000, 500);
    PretrainConfig pretrain;
    TrainConfig train;
    /// Seeds task generation and base pretraining; run seeds only affect fine-tuning.
    std::uint64_t data_seed = 0;

    void validate() const;
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) or plain SGD over a parameter list.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}
    void step(std::span<Parameter* const> params, std::span<const Matrix> grads);

private:
    struct Moments {
        Matrix m;
        Matrix v;
    };
    OptimizerKind kind_;
    double lr_;
    std::size_t t_ = 0;
    std::map<const Parameter*, Moments> state_;
};

/// Single task or the mixture of all in-domain tasks.
struct Setting {
    std::optional<TaskKind> task;

    [[nodiscard]] bool is_mixture() const { return !task.has_value(); }
    [[nodiscard]] std::string name() const;
    /// "mixture" or "single:<task>". Throws ConfigError otherwise.
    static Setting parse(const std::string& text);
    static Setting mixture() { return Setting{}; }
    static Setting single(TaskKind k) { return Setting{k}; }
    friend bool operator==(const Setting&, const Setting&) = default;
};

struct SuiteData {
    std::map<TaskKind, TaskData> tasks;  ///< in-domain tasks
    std::optional<TaskData> ood;
};

[[nodiscard]] SuiteData generate_suite(const TaskSuite& suite, std::uint64_t seed);

struct TrainStats {
    double initial_loss = 0.0;  ///< Eval-mode CE on the training set before the first step
    double final_loss = 0.0;    ///< same, after the last step
    double final_aux = 0.0;
    std::vector<double> loss_trace;  ///< per-step training objective
    std::size_t steps = 0;
};

/// Raised when the objective turns non-finite; carries the trainable tensors
/// as they were before the failing step.
class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(const std::string& what, std::vector<TensorRecord> last_good)
        : NumericalError(what), last_good_(std::move(last_good)) {}
    [[nodiscard]] const std::vector<TensorRecord>& last_good() const { return last_good_; }

private:
    std::vector<TensorRecord> last_good_;
};

/// Minimizes CE + balance_weight * aux over the model's trainable parameters.
/// Throws NumericalError if the objective becomes non-finite.
TrainStats train(AdaptedModel& model, const DatasetSplit& data, const TrainConfig& cfg, const Rng& rng);
/// Mean answer-token cross-entropy in Eval mode over at most `limit` examples.
[[nodiscard]] double eval_loss(const AdaptedModel& model, const DatasetSplit& data, std::size_t limit = 512);

struct PretrainResult {
    BaseModel base;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    AccuracyTable test_accuracy;
};

/// Trains a fresh backbone on a small slice of every in-domain task.
/// Throws UsageError if the suite data contains the succ probe in training.
[[nodiscard]] PretrainResult pretrain_base(const ExperimentConfig& cfg, const SuiteData& data);

/// Model for one arm on top of a copy of `base`, with trainable flags set.
[[nodiscard]] AdaptedModel prepare_arm(const BaseModel& base, Arm arm, const ExperimentConfig& cfg, const Rng& rng);

struct SiteRouting {
    SiteKey site;
    LoadBalanceStats stats;
};

struct RunResult {
    Arm arm = Arm::MoSLD;
    Setting setting;
    std::uint64_t seed = 0;
    std::map<std::string, double> per_task;
    double macro = 0.0;
    std::optional<double> ood_accuracy;
    TrainStats train;
    std::vector<SiteRouting> routing;
    double routing_cv = 0.0;  ///< CV of f_k averaged over routed sites
    double wall_seconds = 0.0;
    std::string base_hash;
};

struct FinetuneOutput {
    RunResult result;
    AdaptedModel model;
};

[[nodiscard]] FinetuneOutput finetune(Arm arm, const Setting& setting, const ExperimentConfig& cfg,
                                      const BaseModel& base, const SuiteData& data, std::uint64_t seed);

/// Expert dispatch statistics over a split, Eval mode, aggregated per site.
[[nodiscard]] std::vector<SiteRouting> routing_stats(const AdaptedModel& model, const DatasetSplit& split);

struct DeltaRow {
    Arm arm = Arm::MoSLD;
    std::uint64_t seed = 0;
    double single_mean = 0.0;
    double mixture_macro = 0.0;
    double delta = 0.0;  ///< mixture_macro - single_mean
};

struct GridResult {
    std::vector<RunResult> rows;
    std::vector<DeltaRow> deltas;
    std::string base_hash;
};

/// Mixture minus mean single accuracy per (arm, seed); a single run counts
/// only the accuracy on its own task.
[[nodiscard]] std::vector<DeltaRow> compute_deltas(std::span<const RunResult> rows);

/// Cross product of arms x settings x seeds over one pretrained base.
[[nodiscard]] GridResult run_grid(std::span<const Arm> arms, std::span<const Setting> settings,
                                  std::span<const std::uint64_t> seeds, const ExperimentConfig& cfg);
/// run_grid over a base that is already pretrained.
[[nodiscard]] GridResult run_grid(std::span<const Arm> arms, std::span<const Setting> settings,
                                  std::span<const std::uint64_t> seeds, const ExperimentConfig& cfg,
                                  const BaseModel& base, const SuiteData& data);

/// Every in-domain single setting followed by the mixture.
[[nodiscard]] std::vector<Setting> default_settings(const TaskSuite& suite);

/// Git-style content hash of a base model's checkpoint bytes.
[[nodiscard]] std::string base_hash(const BaseModel& base);

// Result emission. The stamp (manifest hash, tool version) goes into every row or table.
[[nodiscard]] std::string results_csv(std::span<const RunResult> rows, const TaskSuite& suite, const Stamp& stamp);
[[nodiscard]] std::string deltas_csv(std::span<const DeltaRow> rows, const Stamp& stamp);
[[nodiscard]] std::string routing_csv(std::span<const RunResult> rows, const Stamp& stamp);
[[nodiscard]] std::string summary_markdown(const GridResult& grid, const TaskSuite& suite, const Stamp& stamp);

}  // namespace mosld

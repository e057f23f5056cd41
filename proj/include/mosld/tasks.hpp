// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic algorithmic tasks for single-task and mixture fine-tuning.
//
// Every example is laid out as  [task marker] prompt... [SEP] answer...
// and the model is trained to predict the answer tokens.

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mosld/rng.hpp"

namespace mosld {

class AdaptedModel;

enum class TaskKind { Copy, Reverse, Sort, ModAdd, Succ };

[[nodiscard]] std::string to_string(TaskKind k);
/// Throws ConfigError for unknown names.
[[nodiscard]] TaskKind parse_task(const std::string& name);

inline constexpr std::size_t kPadToken = 0;
inline constexpr std::size_t kSepToken = 1;
/// Marker token announcing the task; markers occupy ids 2..6.
[[nodiscard]] std::size_t task_marker(TaskKind k);
inline constexpr std::size_t kFirstFreeToken = 8;

/// Half-open token id range [lo, hi).
struct VocabSlice {
    std::size_t lo = 0;
    std::size_t hi = 0;
    [[nodiscard]] std::size_t size() const { return hi > lo ? hi - lo : 0; }
};

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    std::size_t seq_len = 4;
    VocabSlice slice;
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    /// Modulus for mod_add; operands are written as fixed-width base-10 digits.
    std::size_t modulus = 10;
    /// Fraction of the generated training set held out for validation.
    double validation_fraction = 0.0;

    [[nodiscard]] std::string name() const { return to_string(kind); }
    /// Throws ConfigError if the task cannot be laid out in `context` tokens
    /// of a `vocab`-sized vocabulary.
    void validate(std::size_t vocab, std::size_t context) const;
    /// Number of distinct prompts the task can generate (saturating).
    [[nodiscard]] std::size_t prompt_capacity() const;
    [[nodiscard]] std::size_t prompt_length() const;
    [[nodiscard]] std::size_t answer_length() const;
};

struct Example {
    std::vector<std::size_t> prompt;
    std::vector<std::size_t> answer;
    TaskKind task = TaskKind::Copy;

    /// marker, prompt, SEP, answer.
    [[nodiscard]] std::vector<std::size_t> full_sequence() const;
    /// Model input: full sequence without its last token.
    [[nodiscard]] std::vector<std::size_t> input_tokens() const;
    /// Positions in input_tokens() whose next-token prediction is an answer token.
    [[nodiscard]] std::vector<std::size_t> answer_positions() const;
    friend bool operator==(const Example&, const Example&) = default;
};

enum class SplitKind { Train, Validation, Test };

struct DatasetSplit {
    std::vector<Example> examples;
    SplitKind kind = SplitKind::Train;
    /// Set for single-task splits, empty for mixtures.
    std::optional<TaskKind> task;

    [[nodiscard]] bool is_mixture() const { return !task.has_value(); }
    [[nodiscard]] std::map<TaskKind, std::size_t> task_counts() const;
};

struct TaskData {
    DatasetSplit train;
    DatasetSplit validation;
    DatasetSplit test;
};

/// The answer a task assigns to a prompt.
[[nodiscard]] std::vector<std::size_t> task_answer(const TaskSpec& spec, std::span<const std::size_t> prompt);
/// Distinct prompts, split into train / validation / test without overlap.
[[nodiscard]] TaskData gen_task(const TaskSpec& spec, Rng& rng);
/// Concatenation of training splits, shuffled. Throws UsageError for
/// non-training splits or fewer than two inputs.
[[nodiscard]] DatasetSplit make_mixture(std::span<const DatasetSplit> splits, Rng& rng);

/// In-domain tasks copy, reverse, sort, mod_add plus the succ probe, laid out
/// in a vocabulary of at least 50 tokens.
struct TaskSuite {
    std::vector<TaskSpec> in_domain;
    std::optional<TaskSpec> ood;
};
[[nodiscard]] TaskSuite default_suite(std::size_t seq_len, std::size_t n_train, std::size_t n_test,
                                      std::size_t modulus = 100);

struct AccuracyTable {
    std::map<std::string, double> per_task;
    std::map<std::string, std::size_t> counts;
    double macro = 0.0;
};

/// Exact-match accuracy of predicted answers (one per example), per task and macro-averaged.
[[nodiscard]] AccuracyTable score_answers(const DatasetSplit& split, std::span<const std::vector<std::size_t>> predicted);
/// Exact-match accuracy of greedy decoding, per task and macro-averaged.
/// Evaluation runs in Eval mode.
[[nodiscard]] AccuracyTable accuracy(const AdaptedModel& model, const DatasetSplit& split);
/// Greedy autoregressive decoding of `answer_len` tokens after `prefix`.
[[nodiscard]] std::vector<std::size_t> greedy_decode(const AdaptedModel& model, std::span<const std::size_t> prefix,
                                                     std::size_t answer_len);

/// One line per example: prompt ids, TAB, answer ids, TAB, task name.
void write_dataset_text(std::ostream& out, const DatasetSplit& split);

}  // namespace mosld

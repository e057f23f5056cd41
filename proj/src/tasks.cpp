// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/tasks.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include "mosld/backbone.hpp"
#include "mosld/error.hpp"

namespace mosld {
namespace {

constexpr std::size_t kSaturated = std::numeric_limits<std::size_t>::max();

std::size_t sat_pow(std::size_t base, std::size_t exp) {
    std::size_t r = 1;
    for (std::size_t i = 0; i < exp; ++i) {
        if (base != 0 && r > kSaturated / base) {
            return kSaturated;
        }
        r *= base;
    }
    return r;
}

std::size_t digit_width(std::size_t modulus) {
    std::size_t w = 1;
    for (std::size_t v = modulus - 1; v >= 10; v /= 10) {
        ++w;
    }
    return w;
}

void push_digits(std::vector<std::size_t>& out, std::size_t value, std::size_t width, std::size_t lo) {
    std::vector<std::size_t> digits(width);
    for (std::size_t i = width; i-- > 0;) {
        digits[i] = lo + value % 10;
        value /= 10;
    }
    out.insert(out.end(), digits.begin(), digits.end());
}

std::size_t read_digits(std::span<const std::size_t> tokens, std::size_t lo) {
    std::size_t v = 0;
    for (std::size_t t : tokens) {
        v = v * 10 + (t - lo);
    }
    return v;
}

/// Prompt number `index` in a fixed enumeration order (mixed radix).
std::vector<std::size_t> nth_prompt(const TaskSpec& spec, std::size_t index) {
    std::vector<std::size_t> p;
    if (spec.kind == TaskKind::ModAdd) {
        const std::size_t w = digit_width(spec.modulus);
        push_digits(p, index / spec.modulus, w, spec.slice.lo);
        push_digits(p, index % spec.modulus, w, spec.slice.lo);
        return p;
    }
    const std::size_t base = spec.slice.size();
    p.resize(spec.seq_len);
    for (std::size_t i = spec.seq_len; i-- > 0;) {
        p[i] = spec.slice.lo + index % base;
        index /= base;
    }
    return p;
}

std::vector<std::size_t> random_prompt(const TaskSpec& spec, Rng& rng) {
    if (spec.kind == TaskKind::ModAdd) {
        return nth_prompt(spec, rng.below(spec.modulus * spec.modulus));
    }
    std::vector<std::size_t> p(spec.seq_len);
    for (auto& t : p) {
        t = spec.slice.lo + rng.below(spec.slice.size());
    }
    return p;
}

std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

}  // namespace

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::Sort: return "sort";
        case TaskKind::ModAdd: return "mod_add";
        case TaskKind::Succ: return "succ";
    }
    return "?";
}

TaskKind parse_task(const std::string& name) {
    for (TaskKind k : {TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort, TaskKind::ModAdd, TaskKind::Succ}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown task '" + name + "' (copy, reverse, sort, mod_add, succ)");
}

std::size_t task_marker(TaskKind k) { return 2 + static_cast<std::size_t>(k); }

std::size_t TaskSpec::prompt_length() const {
    return kind == TaskKind::ModAdd ? 2 * digit_width(modulus) : seq_len;
}

std::size_t TaskSpec::answer_length() const { return kind == TaskKind::ModAdd ? digit_width(modulus) : seq_len; }

std::size_t TaskSpec::prompt_capacity() const {
    if (kind == TaskKind::ModAdd) {
        return sat_pow(modulus, 2);
    }
    return sat_pow(slice.size(), seq_len);
}

void TaskSpec::validate(std::size_t vocab, std::size_t context) const {
    const std::string n = name();
    if (slice.size() == 0) {
        throw ConfigError(n + ": empty vocabulary slice");
    }
    if (slice.lo < kFirstFreeToken) {
        throw ConfigError(n + ": vocabulary slice overlaps the reserved ids below " + std::to_string(kFirstFreeToken));
    }
    const std::size_t top = kind == TaskKind::Succ ? slice.hi + 1 : slice.hi;
    if (top > vocab) {
        throw ConfigError(n + ": vocabulary slice [" + std::to_string(slice.lo) + ", " + std::to_string(slice.hi) +
                          ") does not fit a vocabulary of " + std::to_string(vocab));
    }
    if (kind == TaskKind::ModAdd) {
        if (modulus < 2) {
            throw ConfigError(n + ": modulus must be >= 2");
        }
        if (slice.size() < 10) {
            throw ConfigError(n + ": digit slice needs 10 tokens");
        }
    } else {
        if (seq_len == 0) {
            throw ConfigError(n + ": seq_len must be >= 1");
        }
        if (seq_len + 2 > context) {
            throw ConfigError(n + ": seq_len " + std::to_string(seq_len) + " exceeds context - 2");
        }
    }
    // marker + prompt + SEP + answer, minus the final token which is only a target.
    const std::size_t input_len = 1 + prompt_length() + 1 + answer_length() - 1;
    if (input_len > context) {
        throw ConfigError(n + ": an example needs " + std::to_string(input_len) + " tokens, context is " +
                          std::to_string(context));
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError(n + ": validation_fraction must be in [0, 1)");
    }
    if (n_train == 0) {
        throw ConfigError(n + ": n_train must be >= 1");
    }
    if (prompt_capacity() < n_train + n_test) {
        throw ConfigError(n + ": only " + std::to_string(prompt_capacity()) + " distinct prompts, " +
                          std::to_string(n_train + n_test) + " requested");
    }
}

std::vector<std::size_t> Example::full_sequence() const {
    std::vector<std::size_t> s;
    s.reserve(prompt.size() + answer.size() + 2);
    s.push_back(task_marker(task));
    s.insert(s.end(), prompt.begin(), prompt.end());
    s.push_back(kSepToken);
    s.insert(s.end(), answer.begin(), answer.end());
    return s;
}

std::vector<std::size_t> Example::input_tokens() const {
    std::vector<std::size_t> s = full_sequence();
    s.pop_back();
    return s;
}

std::vector<std::size_t> Example::answer_positions() const {
    std::vector<std::size_t> pos(answer.size());
    std::iota(pos.begin(), pos.end(), prompt.size() + 1);
    return pos;
}

std::map<TaskKind, std::size_t> DatasetSplit::task_counts() const {
    std::map<TaskKind, std::size_t> counts;
    for (const Example& e : examples) {
        ++counts[e.task];
    }
    return counts;
}

std::vector<std::size_t> task_answer(const TaskSpec& spec, std::span<const std::size_t> prompt) {
    std::vector<std::size_t> a(prompt.begin(), prompt.end());
    switch (spec.kind) {
        case TaskKind::Copy: break;
        case TaskKind::Reverse: std::reverse(a.begin(), a.end()); break;
        case TaskKind::Sort: std::sort(a.begin(), a.end()); break;
        case TaskKind::Succ:
            for (auto& t : a) {
                ++t;
            }
            break;
        case TaskKind::ModAdd: {
            const std::size_t w = digit_width(spec.modulus);
            if (prompt.size() != 2 * w) {
                throw DataError("mod_add: prompt must hold two " + std::to_string(w) + "-digit operands");
            }
            const std::size_t x = read_digits(prompt.subspan(0, w), spec.slice.lo);
            const std::size_t y = read_digits(prompt.subspan(w), spec.slice.lo);
            a.clear();
            push_digits(a, (x + y) % spec.modulus, w, spec.slice.lo);
            break;
        }
    }
    return a;
}

TaskData gen_task(const TaskSpec& spec, Rng& rng) {
    const std::size_t capacity = spec.prompt_capacity();
    const std::size_t needed = spec.n_train + spec.n_test;
    if (capacity < needed) {
        throw ConfigError(spec.name() + ": vocabulary slice too small for " + std::to_string(needed) +
                          " distinct prompts (capacity " + std::to_string(capacity) + ")");
    }
    std::vector<std::vector<std::size_t>> prompts;
    prompts.reserve(needed);
    if (capacity <= 4 * needed || capacity <= 4096) {
        std::vector<std::size_t> order(capacity);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order.begin(), order.end());
        for (std::size_t i = 0; i < needed; ++i) {
            prompts.push_back(nth_prompt(spec, order[i]));
        }
    } else {
        std::set<std::vector<std::size_t>> seen;
        while (prompts.size() < needed) {
            auto p = random_prompt(spec, rng);
            if (seen.insert(p).second) {
                prompts.push_back(std::move(p));
            }
        }
    }

    TaskData data;
    data.train = DatasetSplit{{}, SplitKind::Train, spec.kind};
    data.validation = DatasetSplit{{}, SplitKind::Validation, spec.kind};
    data.test = DatasetSplit{{}, SplitKind::Test, spec.kind};
    const auto n_val = static_cast<std::size_t>(spec.validation_fraction * static_cast<double>(spec.n_train));
    for (std::size_t i = 0; i < needed; ++i) {
        Example e{prompts[i], task_answer(spec, prompts[i]), spec.kind};
        if (i < spec.n_train - n_val) {
            data.train.examples.push_back(std::move(e));
        } else if (i < spec.n_train) {
            data.validation.examples.push_back(std::move(e));
        } else {
            data.test.examples.push_back(std::move(e));
        }
    }
    return data;
}

DatasetSplit make_mixture(std::span<const DatasetSplit> splits, Rng& rng) {
    if (splits.size() < 2) {
        throw UsageError("make_mixture: needs at least two splits");
    }
    DatasetSplit mix{{}, SplitKind::Train, std::nullopt};
    for (const DatasetSplit& s : splits) {
        if (s.kind != SplitKind::Train) {
            throw UsageError("make_mixture: only training splits may be mixed");
        }
        for (const Example& e : s.examples) {
            if (e.task == TaskKind::Succ) {
                throw UsageError("make_mixture: the succ probe is evaluation-only");
            }
        }
        mix.examples.insert(mix.examples.end(), s.examples.begin(), s.examples.end());
    }
    rng.shuffle(mix.examples.begin(), mix.examples.end());
    return mix;
}

TaskSuite default_suite(std::size_t seq_len, std::size_t n_train, std::size_t n_test, std::size_t modulus) {
    const VocabSlice letters_a{8, 24};
    const VocabSlice letters_b{24, 40};
    const VocabSlice digits{40, 50};
    TaskSuite s;
    s.in_domain = {
        TaskSpec{TaskKind::Copy, seq_len, letters_a, n_train, n_test, modulus, 0.0},
        TaskSpec{TaskKind::Reverse, seq_len, letters_b, n_train, n_test, modulus, 0.0},
        TaskSpec{TaskKind::Sort, seq_len, digits, n_train, n_test, modulus, 0.0},
        TaskSpec{TaskKind::ModAdd, seq_len, digits, n_train, n_test, modulus, 0.0},
    };
    s.ood = TaskSpec{TaskKind::Succ, seq_len, VocabSlice{8, 23}, 1, n_test, modulus, 0.0};
    return s;
}

AccuracyTable score_answers(const DatasetSplit& split, std::span<const std::vector<std::size_t>> predicted) {
    if (predicted.size() != split.examples.size()) {
        throw UsageError("score_answers: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(split.examples.size()) + " examples");
    }
    std::map<std::string, std::size_t> hits;
    AccuracyTable table;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const Example& e = split.examples[i];
        const std::string name = to_string(e.task);
        ++table.counts[name];
        hits[name] += predicted[i] == e.answer ? 1 : 0;
    }
    double sum = 0.0;
    for (const auto& [name, n] : table.counts) {
        table.per_task[name] = static_cast<double>(hits[name]) / static_cast<double>(n);
        sum += table.per_task[name];
    }
    table.macro = table.per_task.empty() ? 0.0 : sum / static_cast<double>(table.per_task.size());
    return table;
}

AccuracyTable accuracy(const AdaptedModel& model, const DatasetSplit& split) {
    // Teacher-forced argmax; exact match agrees with greedy decoding.
    constexpr std::size_t kBatch = 64;
    std::vector<std::vector<std::size_t>> predicted;
    predicted.reserve(split.examples.size());
    const Rng eval_rng(0);
    for (std::size_t start = 0; start < split.examples.size(); start += kBatch) {
        const std::size_t end = std::min(split.examples.size(), start + kBatch);
        std::vector<std::vector<std::size_t>> seqs;
        std::vector<std::size_t> rows;
        std::size_t offset = 0;
        for (std::size_t i = start; i < end; ++i) {
            const Example& e = split.examples[i];
            seqs.push_back(e.input_tokens());
            for (std::size_t p : e.answer_positions()) {
                rows.push_back(offset + p);
            }
            offset += seqs.back().size();
        }
        Tape t;
        const ForwardTrace tr = forward(t, model, seqs, Mode::Eval, eval_rng, rows);
        const Matrix& logits = t.value(tr.logits);
        std::size_t row = 0;
        for (std::size_t i = start; i < end; ++i) {
            std::vector<std::size_t> answer;
            for (std::size_t j = 0; j < split.examples[i].answer.size(); ++j, ++row) {
                answer.push_back(argmax(logits.row(row)));
            }
            predicted.push_back(std::move(answer));
        }
    }
    return score_answers(split, predicted);
}

std::vector<std::size_t> greedy_decode(const AdaptedModel& model, std::span<const std::size_t> prefix,
                                       std::size_t answer_len) {
    std::vector<std::size_t> seq(prefix.begin(), prefix.end());
    std::vector<std::size_t> out;
    const Rng eval_rng(0);
    for (std::size_t i = 0; i < answer_len; ++i) {
        const ForwardResult r = forward(model, seq, Mode::Eval, eval_rng);
        const std::size_t next = argmax(r.logits.row(r.logits.rows() - 1));
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

void write_dataset_text(std::ostream& out, const DatasetSplit& split) {
    auto ids = [&](const std::vector<std::size_t>& v) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            out << (i ? " " : "") << v[i];
        }
    };
    for (const Example& e : split.examples) {
        ids(e.prompt);
        out << '\t';
        ids(e.answer);
        out << '\t' << to_string(e.task) << '\n';
    }
}

}  // namespace mosld

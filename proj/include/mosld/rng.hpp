// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace mosld {

/// Seeded random stream. Children created with split() depend only on the
/// parent's lineage key and the child id, never on how far the parent has
/// been advanced, so streams can be handed out in any order.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    [[nodiscard]] Rng split(std::uint64_t child_id) const;
    [[nodiscard]] std::uint64_t key() const noexcept { return key_; }

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    /// Standard normal (Box-Muller, cached spare).
    double normal();
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);
    /// True with probability p.
    bool bernoulli(double p) { return uniform() < p; }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[below(i)]);
        }
    }

private:
    Rng(std::uint64_t key, bool /*raw*/);

    std::uint64_t key_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mosld

// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy. The CLI maps each category to an exit code.

#pragma once

#include <stdexcept>
#include <string>

namespace mosld {

/// Bad shapes, hyperparameters or config values (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Token ids, lengths or targets that violate a data contract.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An API used in a way its contract forbids (e.g. mixing test splits).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Broken internal contract between modules (e.g. router handed out a bad index).
class InternalError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A required input artifact (checkpoint, run output) does not exist (exit code 3).
class MissingArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Loss became NaN/Inf during training (exit code 4).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mosld

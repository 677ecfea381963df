#pragma once

#include <stdexcept>
#include <string>

namespace card {

/// Precondition violated by a caller-supplied argument.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// The query block alone does not fit into the prompt budget.
class PromptOverflow : public std::length_error {
public:
    using std::length_error::length_error;
};

/// A forward pass was requested on more positions than the model supports.
class SequenceTooLong : public std::length_error {
public:
    using std::length_error::length_error;
};

/// Bad or inconsistent configuration (unknown keys, missing cluster model, ...).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A pipeline stage ran before the stage producing its inputs.
class MissingPrerequisite : public std::runtime_error {
public:
    MissingPrerequisite(const std::string& what, std::string producing_stage)
        : std::runtime_error(what), stage_(std::move(producing_stage)) {}

    const std::string& producing_stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// NaN or infinity detected during training or decoding.
class NumericalFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace card

#pragma once

#include <stdexcept>
#include <string>

namespace retclip {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

// API precondition violated (non-scalar backward seed, eps out of range, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid configuration value or key.
struct ConfigError : Error {
    using Error::Error;
};

// Token id outside the vocabulary.
struct VocabError : Error {
    using Error::Error;
};

// Filesystem / image decoding failures.
struct IoError : Error {
    using Error::Error;
};

// Malformed text input (manifest line, config file).
struct ParseError : Error {
    using Error::Error;
};

// Checkpoint framing violations (magic, version, bounds).
struct FormatError : Error {
    using Error::Error;
};

// Metric is undefined for the given labels (single-class AUROC, no positives).
struct MetricError : Error {
    using Error::Error;
};

// Stratified split cannot honor its contract (empty class).
struct SplitError : Error {
    using Error::Error;
};

}  // namespace retclip

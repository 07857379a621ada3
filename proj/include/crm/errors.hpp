#pragma once

#include <stdexcept>
#include <string>

namespace crm {

// Input fails a mathematical contract (non-hermitian matrix, negative
// probability, unnormalized state, ...).
struct validation_error : std::runtime_error {
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Request exceeds a hard size cap (qubit counts, dense dimensions).
struct resource_error : std::runtime_error {
  explicit resource_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched inputs in a multi-dataset workflow, e.g. combining shadows
// that were not measured with the same setting sequence.
struct protocol_error : std::runtime_error {
  explicit protocol_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad key/value in an experiment configuration; message names the field.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Linear system has no usable inverse (coincident interpolation nodes).
struct singular_error : std::runtime_error {
  explicit singular_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crm

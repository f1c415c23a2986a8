#pragma once

#include <stdexcept>
#include <string>

namespace supportaff {

/// Precondition violated by the caller (bad index, size, or value).
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Operation requested in a state that cannot satisfy it (missing checkpoint,
/// empty offline store).
struct InvalidState : std::logic_error {
  using std::logic_error::logic_error;
};

/// Training data cannot produce a meaningful model (no positive examples).
struct TrainingDegenerate : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedFormat : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CorruptData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace supportaff

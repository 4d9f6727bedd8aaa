#pragma once

#include <stdexcept>
#include <string>

namespace upcap {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or mis-shaped input (bad dimensions, bad JSONL, duplicate ids).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Numerically degenerate input: zero-norm features, empty captions.
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or parameter.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A stage was requested before the stage it depends on produced artifacts.
class MissingStage : public Error {
 public:
  using Error::Error;
};

// The metric gate rejected every pseudo pair.
class EmptyGate : public Error {
 public:
  using Error::Error;
};

}  // namespace upcap

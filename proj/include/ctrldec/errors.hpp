#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ctrldec {

// Base for every error that maps to exit code 2 in the CLI.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller violated an operation's precondition (terminated context, bad shape, ...).
class PreconditionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A token index or symbol that is not part of the vocabulary.
class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Vocabularies of two components disagree.
class VocabMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Requested KL estimator cannot be computed for this strategy.
class UnsupportedEstimatorError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A value table lacks entries for reachable contexts.
class MissingEntriesError : public ValidationError {
 public:
  MissingEntriesError(const std::string& what, std::vector<std::string> keys)
      : ValidationError(what), keys_(std::move(keys)) {}
  const std::vector<std::string>& keys() const noexcept { return keys_; }

 private:
  std::vector<std::string> keys_;
};

// Iterative solver hit its iteration cap. Carries the best iterate seen.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> best, double residual)
      : std::runtime_error(what), best_(std::move(best)), residual_(residual) {}
  const std::vector<double>& best_iterate() const noexcept { return best_; }
  double residual() const noexcept { return residual_; }

 private:
  std::vector<double> best_;
  double residual_;
};

}  // namespace ctrldec

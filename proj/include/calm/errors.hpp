#pragma once

#include <stdexcept>
#include <string>

namespace calm {

/// Malformed input (CSV/JSON) that cannot be interpreted at all.
class ParseError : public std::runtime_error {
public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

/// Structurally valid input that violates a domain contract (range, size, uniqueness).
class DomainError : public std::runtime_error {
public:
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

/// A prediction lookup failed for a (subject, arm) key that downstream code requires.
class MissingPredictionError : public std::runtime_error {
public:
  explicit MissingPredictionError(const std::string& what) : std::runtime_error(what) {}
};

/// Transport-level failure talking to a remote predictor.
class RemoteError : public std::runtime_error {
public:
  RemoteError(const std::string& what, bool retryable)
      : std::runtime_error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

private:
  bool retryable_;
};

/// CATE query point with too little effective kernel mass to be trustworthy.
class UnstableQueryError : public std::runtime_error {
public:
  explicit UnstableQueryError(const std::string& what) : std::runtime_error(what) {}
};

/// Kernel evaluation point with zero total kernel mass.
class OutOfSupportError : public std::runtime_error {
public:
  explicit OutOfSupportError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace calm

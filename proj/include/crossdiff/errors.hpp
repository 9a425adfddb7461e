#pragma once

#include <stdexcept>
#include <string>

namespace crossdiff {

// Invalid or inconsistent configuration; the message names the offending field.
class config_error : public std::runtime_error {
public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatch.
class shape_error : public std::runtime_error {
public:
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure: non-finite loss, singular system, zero-variance metric.
class numeric_error : public std::runtime_error {
public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Query on a feature with no usable decoder (both rows zero / dead).
class undefined_feature_error : public std::runtime_error {
public:
  explicit undefined_feature_error(const std::string& msg) : std::runtime_error(msg) {}
};

class io_error : public std::runtime_error {
public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crossdiff

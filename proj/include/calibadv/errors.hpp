// SPDX-License-Identifier: Apache-2.0
//
// Error types shared across the library. Line numbers are 1-based and
// 0 when the error is not bound to a file location.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace calibadv {

// Structurally malformed input (bad JSON, missing key, wrong type).
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, std::string detail)
      : std::runtime_error(line == 0 ? detail : "line " + std::to_string(line) + ": " + detail),
        line_(line),
        detail_(std::move(detail)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

// A record that decoded fine but violates a declared invariant.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string rollout_id, std::string field, std::string detail,
                  std::size_t line = 0)
      : std::runtime_error(format(rollout_id, field, detail, line)),
        rollout_id_(std::move(rollout_id)),
        field_(std::move(field)),
        detail_(std::move(detail)),
        line_(line) {}

  const std::string& rollout_id() const noexcept { return rollout_id_; }
  const std::string& field() const noexcept { return field_; }
  const std::string& detail() const noexcept { return detail_; }
  std::size_t line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& rollout_id, const std::string& field,
                            const std::string& detail, std::size_t line) {
    std::string msg;
    if (line != 0) msg += "line " + std::to_string(line) + ": ";
    if (!rollout_id.empty()) msg += "rollout '" + rollout_id + "': ";
    msg += "field '" + field + "': " + detail;
    return msg;
  }

  std::string rollout_id_;
  std::string field_;
  std::string detail_;
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace calibadv

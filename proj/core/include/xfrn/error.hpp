#pragma once

#include <stdexcept>
#include <string>

namespace xfrn {

// Every failure the toolkit reports maps onto one of three categories, which
// the CLI turns into its exit code (2 config, 3 data, 4 model).
class Error : public std::runtime_error {
 public:
  enum class Kind { config, data, model };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }
  int exit_code() const noexcept;

 private:
  Kind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Kind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Kind::data, what) {}
};

class ModelError : public Error {
 public:
  explicit ModelError(const std::string& what) : Error(Kind::model, what) {}
};

}  // namespace xfrn

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace avc {

enum class ErrorKind { config, numerical, dimension };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void config_error(const std::string& what);
[[noreturn]] void numerical_error(const std::string& what);
[[noreturn]] void dimension_error(const std::string& what);

// Warnings and informational notes attached to a result. Nothing is printed
// by the library itself; callers decide where diagnostics go.
struct Diagnostics {
  std::vector<std::string> warnings;
  std::vector<std::string> notes;

  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
  void note(std::string msg) { notes.push_back(std::move(msg)); }
  bool has_warning(const std::string& needle) const;
  void merge(const Diagnostics& other);
};

}  // namespace avc

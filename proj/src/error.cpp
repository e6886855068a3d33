#include "avc/error.hpp"

namespace avc {

void config_error(const std::string& what) { throw Error(ErrorKind::config, what); }
void numerical_error(const std::string& what) { throw Error(ErrorKind::numerical, what); }
void dimension_error(const std::string& what) { throw Error(ErrorKind::dimension, what); }

bool Diagnostics::has_warning(const std::string& needle) const {
  for (const auto& w : warnings)
    if (w.find(needle) != std::string::npos) return true;
  return false;
}

void Diagnostics::merge(const Diagnostics& other) {
  warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
  notes.insert(notes.end(), other.notes.begin(), other.notes.end());
}

}  // namespace avc

#pragma once

#include <stdexcept>
#include <string>

namespace detkit {

// Root of every library error. `kind()` is the stable short name used in CLI
// diagnostics and logs.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define DETKIT_DEFINE_ERROR(Name)                                          \
  class Name : public ::detkit::Error {                                    \
   public:                                                                 \
    explicit Name(const std::string& message) : Error(#Name, message) {}   \
  }

DETKIT_DEFINE_ERROR(ShapeMismatch);
DETKIT_DEFINE_ERROR(BadDim);

}  // namespace detkit

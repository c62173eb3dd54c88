#pragma once

#include <stdexcept>
#include <string>

namespace krrmix {

// Every failure the library reports derives from Error so callers can catch
// one type; the concrete classes name the condition.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KRRMIX_DEFINE_ERROR(Name)      \
  class Name : public Error {          \
   public:                             \
    using Error::Error;                \
  };

KRRMIX_DEFINE_ERROR(ShapeMismatch)
KRRMIX_DEFINE_ERROR(FullyMaskedRow)
KRRMIX_DEFINE_ERROR(SingularDiagonal)
KRRMIX_DEFINE_ERROR(SingularMatrix)
KRRMIX_DEFINE_ERROR(NonScalarLoss)
KRRMIX_DEFINE_ERROR(OddHeadDim)
KRRMIX_DEFINE_ERROR(TargetOutOfRange)
KRRMIX_DEFINE_ERROR(CorpusTooSmall)
KRRMIX_DEFINE_ERROR(NonFiniteLoss)
KRRMIX_DEFINE_ERROR(CheckpointError)

#undef KRRMIX_DEFINE_ERROR

// Configuration errors carry the offending line (0 when not file-backed) and key.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, int line = 0, std::string key = {})
      : Error(format(message, line, key)), line_(line), key_(std::move(key)) {}

  int line() const { return line_; }
  const std::string& key() const { return key_; }

 private:
  static std::string format(const std::string& message, int line,
                            const std::string& key) {
    std::string out = "config";
    if (line > 0) out += ":" + std::to_string(line);
    if (!key.empty()) out += " [" + key + "]";
    return out + ": " + message;
  }

  int line_;
  std::string key_;
};

}  // namespace krrmix

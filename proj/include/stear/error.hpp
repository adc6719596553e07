#pragma once

#include <stdexcept>
#include <string>

namespace stear {

// Error categories. The CLI maps these onto process exit codes.
enum class ErrorCode {
  kConfig,     // invalid user configuration
  kIo,         // missing/unreadable/unwritable file
  kShape,      // dimension mismatch between operands
  kRange,      // index or parameter outside its domain
  kVersion,    // wrong magic or format version
  kTruncated,  // file ended early
  kInvariant,  // internal invariant violated
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace stear

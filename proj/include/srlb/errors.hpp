#pragma once

#include <stdexcept>
#include <string>

namespace srlb {

// Root of every error thrown by the library. `kind()` is a stable short tag
// used by the CLI for its one-line machine-parsable error output.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

#define SRLB_DEFINE_ERROR(Name, Base, tag)                      \
  class Name : public Base {                                    \
   public:                                                      \
    explicit Name(const std::string& what) : Base(what) {}      \
    const char* kind() const noexcept override { return tag; }  \
  };

SRLB_DEFINE_ERROR(DimensionError, Error, "dimension")
SRLB_DEFINE_ERROR(ContractError, Error, "contract")
SRLB_DEFINE_ERROR(NumericalError, Error, "numerical")
SRLB_DEFINE_ERROR(ConfigError, Error, "config")
SRLB_DEFINE_ERROR(IoError, Error, "io")
SRLB_DEFINE_ERROR(GenerationError, Error, "generation")

SRLB_DEFINE_ERROR(FormatError, Error, "format")
SRLB_DEFINE_ERROR(BadMagicError, FormatError, "bad_magic")
SRLB_DEFINE_ERROR(VersionMismatchError, FormatError, "version_mismatch")
SRLB_DEFINE_ERROR(TruncatedError, FormatError, "truncated")
SRLB_DEFINE_ERROR(HeaderMismatchError, FormatError, "header_mismatch")

#undef SRLB_DEFINE_ERROR

}  // namespace srlb

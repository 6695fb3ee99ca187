#pragma once

#include <stdexcept>
#include <string>

namespace chordmorse {

// Base class for all library errors. `kind()` is a stable short tag used in reports.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define CHORDMORSE_ERROR(Name, tag)                                  \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(tag, what) {}     \
  };

CHORDMORSE_ERROR(DomainError, "domain")
CHORDMORSE_ERROR(AdmissibilityError, "admissibility")
CHORDMORSE_ERROR(SolverError, "solver")
CHORDMORSE_ERROR(ConfigError, "config")
CHORDMORSE_ERROR(InsufficientDataError, "insufficient-data")
CHORDMORSE_ERROR(ResolutionError, "resolution")
CHORDMORSE_ERROR(DegeneracyError, "degeneracy")
CHORDMORSE_ERROR(UnsupportedError, "unsupported")
CHORDMORSE_ERROR(ContractViolation, "contract")
CHORDMORSE_ERROR(LiftingError, "lifting")

#undef CHORDMORSE_ERROR

}  // namespace chordmorse

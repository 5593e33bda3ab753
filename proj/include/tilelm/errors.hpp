#pragma once

#include <stdexcept>
#include <string>

namespace tilelm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TILELM_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

TILELM_DEFINE_ERROR(InvalidConfig);
TILELM_DEFINE_ERROR(OutOfTiles);
TILELM_DEFINE_ERROR(DuplicateSequence);
TILELM_DEFINE_ERROR(UnknownSequence);
TILELM_DEFINE_ERROR(PositionOutOfRange);
TILELM_DEFINE_ERROR(ShapeMismatch);
TILELM_DEFINE_ERROR(PromptTooLong);
TILELM_DEFINE_ERROR(CorruptFile);
TILELM_DEFINE_ERROR(InfeasiblePlan);
TILELM_DEFINE_ERROR(QueueFull);

#undef TILELM_DEFINE_ERROR

// Carries the 1-based line of the offending trace record.
class MalformedTrace : public Error {
 public:
  MalformedTrace(std::size_t line, const std::string& what)
      : Error("trace line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace tilelm

#pragma once

#include <stdexcept>
#include <string>

namespace fedlab {

// Base for every failure raised by the library. Callers that only care about
// "something went wrong" catch this; tests match the concrete subclass.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FEDLAB_DEFINE_ERROR(Name)            \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  }

FEDLAB_DEFINE_ERROR(ZeroVector);
FEDLAB_DEFINE_ERROR(ShapeMismatch);
FEDLAB_DEFINE_ERROR(MissingPrototype);
FEDLAB_DEFINE_ERROR(InfeasibleGeometry);
FEDLAB_DEFINE_ERROR(Infeasible);
FEDLAB_DEFINE_ERROR(EmptyClass);
FEDLAB_DEFINE_ERROR(LabelOutOfRange);
FEDLAB_DEFINE_ERROR(DivergenceConfig);
FEDLAB_DEFINE_ERROR(ValidationError);

#undef FEDLAB_DEFINE_ERROR

// Parse failures carry the 1-based line they were detected on (0 if the
// failure is not tied to a line, e.g. an empty file).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace fedlab

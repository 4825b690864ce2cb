#pragma once

#include <stdexcept>
#include <string>

namespace lrlab {

// Base of every error raised by the library. The CLI maps NumericsError to
// exit code 2 and every other Error to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LRLAB_DEFINE_ERROR(Name)            \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

LRLAB_DEFINE_ERROR(InvalidInput);
LRLAB_DEFINE_ERROR(RankError);
LRLAB_DEFINE_ERROR(ShapeError);
LRLAB_DEFINE_ERROR(NumericsError);
LRLAB_DEFINE_ERROR(StateError);
LRLAB_DEFINE_ERROR(DegenerateInput);
LRLAB_DEFINE_ERROR(InsufficientData);
LRLAB_DEFINE_ERROR(FormatError);
LRLAB_DEFINE_ERROR(ConfigError);
LRLAB_DEFINE_ERROR(KeyError);
LRLAB_DEFINE_ERROR(IoError);

#undef LRLAB_DEFINE_ERROR

}  // namespace lrlab

#pragma once

#include <stdexcept>
#include <string>

namespace rsmn {

// Error taxonomy. CLI maps DataError/IoError/ArgumentError/... to exit 1
// and NumericError (plus anything unexpected) to exit 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

}  // namespace rsmn

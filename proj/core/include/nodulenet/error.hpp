#pragma once

#include <stdexcept>
#include <string>

namespace nodulenet {

/// Base class for every error raised by the library. Messages are short and
/// stable so the CLI can surface them verbatim in its JSON error line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace nodulenet

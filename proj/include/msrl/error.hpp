#pragma once

#include <stdexcept>
#include <string>

namespace msrl {

// Base of every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class DimensionError : public Error {
  using Error::Error;
};
class InvalidDistribution : public Error {
  using Error::Error;
};
class EmptyInput : public Error {
  using Error::Error;
};
class EmptyReference : public Error {
  using Error::Error;
};
class BeamTooSmall : public Error {
  using Error::Error;
};
class StalenessError : public Error {
  using Error::Error;
};
class IoError : public Error {
  using Error::Error;
};
// A stage's input artifact (corpus, checkpoint) does not exist yet.
class MissingArtifact : public Error {
  using Error::Error;
};
class UnknownName : public Error {
  using Error::Error;
};

}  // namespace msrl

#pragma once

#include <stdexcept>
#include <string>

namespace msdyn {

enum class ErrorKind {
  DegenerateGeometry,
  CountMismatch,
  WeightError,
  DegenerateField,
  EmptyTracks,
  ShapeMismatch,
  EmptyDataset,
  NoDynamicPixels,
  EmptyMask,
  Validation,
  NonFiniteLoss,
  Format,
  Version,
  Io,
  MissingManifest,
};

const char* to_string(ErrorKind kind);

/// Process exit code for an error kind: 2 validation, 3 numerical, 4 I/O or format.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace msdyn

#include "msdyn/log.hpp"
#include "msdyn/error.hpp"

#include <iostream>
#include <mutex>

namespace msdyn {

namespace {
std::mutex g_mutex;
WarningHandler g_handler;
}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(g_mutex);
  std::swap(g_handler, handler);
  return handler;
}

void warn(const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (g_handler) {
    g_handler(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::CountMismatch: return "CountMismatch";
    case ErrorKind::WeightError: return "WeightError";
    case ErrorKind::DegenerateField: return "DegenerateField";
    case ErrorKind::EmptyTracks: return "EmptyTracks";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::NoDynamicPixels: return "NoDynamicPixels";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::Validation: return "ValidationError";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::Version: return "VersionError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::MissingManifest: return "MissingManifest";
  }
  return "Error";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NonFiniteLoss:
      return 3;
    case ErrorKind::Format:
    case ErrorKind::Version:
    case ErrorKind::Io:
    case ErrorKind::MissingManifest:
      return 4;
    default:
      return 2;
  }
}

}  // namespace msdyn

#pragma once

#include <functional>
#include <string>

namespace msdyn {

using WarningHandler = std::function<void(const std::string&)>;

// Replaces the process-wide warning sink. Returns the previous handler.
WarningHandler set_warning_handler(WarningHandler handler);

void warn(const std::string& message);

}  // namespace msdyn

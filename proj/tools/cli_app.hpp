#pragma once

#include <string>
#include <vector>

namespace eqcm::cli {

inline constexpr const char* kVersion = "0.1.0";

// Parses and runs one subcommand; returns the process exit status.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, const char* const* argv);

}  // namespace eqcm::cli

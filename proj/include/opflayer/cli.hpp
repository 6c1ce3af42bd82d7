#pragma once

#include <iosfwd>

namespace opflayer {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kVersion = "1.0.0";

/// Runs one subcommand. Output goes to out, diagnostics to err. Returns 0 on
/// success, 1 on domain errors and 2 on usage errors.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace opflayer

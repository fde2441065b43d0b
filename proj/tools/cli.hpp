#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace iiae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitVerification = 2;

/// Runs one subcommand. `args` excludes the program name. Reports go to
/// `out` when no output file is requested; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace iiae::cli

#ifndef PRENET_CLI_HPP
#define PRENET_CLI_HPP

#include <iosfwd>

namespace prenet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // bad flags or invalid configuration
inline constexpr int kExitRuntime = 2;  // IO, data or numerical failure

/// Subcommands: make-toy, train, eval, predict, inspect.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace prenet

#endif  // PRENET_CLI_HPP

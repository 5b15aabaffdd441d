#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace camrw {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Parses argv (argv[0] is the program name) and runs one subcommand:
// synth, train, generate, evaluate, ablate, sweep-placement, perturb or
// visualize.
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace camrw

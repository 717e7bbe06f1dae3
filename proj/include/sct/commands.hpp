#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

namespace sct {

// Arguments shared by every subcommand. The seed may come from the flag or
// from a "seed" key in the config; the flag wins.
struct CommandArgs {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
};

// Each command validates its whole config before any heavy work and writes
// its results under args.out.
void cmd_synth(const CommandArgs& args);
void cmd_train(const CommandArgs& args);
void cmd_eval(const CommandArgs& args);
void cmd_attribute(const CommandArgs& args);
// Returns false when some block exceeds the configured tolerance.
bool cmd_gradcheck(const CommandArgs& args);

// Process exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

inline constexpr int kExitConfig = 2;
inline constexpr int kExitValidation = 3;
inline constexpr int kExitIo = 4;
inline constexpr int kExitInternal = 5;
inline constexpr int kExitGradcheck = 6;

}  // namespace sct

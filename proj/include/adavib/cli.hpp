#pragma once

// Command-line front end. Every subcommand reads and writes files only,
// writes its outputs atomically, and leaves a manifest.json next to them
// recording the fully resolved arguments, the seed and SHA-256 hashes of
// inputs and outputs.

#include <iosfwd>
#include <string>
#include <vector>

namespace adavib::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// When set, names the output directory used by subcommands run without
// --out.
inline constexpr const char* kOutDirEnv = "ADAVIB_OUT_DIR";

// `args` excludes the program name. `adavib --replay manifest.json [--out D]`
// re-runs the command recorded in a manifest.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

std::string sha256_hex(const std::string& bytes);

}  // namespace adavib::cli

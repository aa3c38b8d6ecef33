#pragma once

// `isr` command-line front end: gen-data, train, eval, verify, ablate.
// Every command writes <out>/run_manifest.json before starting work and
// rewrites it with artifact hashes when done.

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace isr::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitValidation = 2,
  kExitRuntimeAbort = 3,
  kExitVerificationFailed = 4,
  kExitIo = 5,
};

/// Log verbosity is read from ISR_LOG: quiet, info (default) or debug.
inline constexpr const char* kLogEnv = "ISR_LOG";

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// FNV-1a over the file bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

nlohmann::json read_run_manifest(const std::filesystem::path& out_dir);

}  // namespace isr::cli

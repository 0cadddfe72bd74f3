#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace ksr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

// Runs one `ksr` command. `args` excludes the program name. Returns the
// process exit code: 0 success, 2 validation error, 3 runtime or data error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// FNV-1a over every regular file below `dir` (sorted relative paths and
// contents), skipping run manifests.
std::string tree_hash(const std::filesystem::path& dir);

// Hash of a single file's contents.
std::string file_hash(const std::filesystem::path& path);

}  // namespace ksr::cli

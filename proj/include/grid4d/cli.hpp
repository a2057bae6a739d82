// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace grid4d::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand. `args` excludes the program name. Diagnostics go to
/// `err`, short progress lines to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Writes manifest.json listing every regular file under `dir` (except the
/// manifest itself) with its size and SHA-256, sorted by relative path.
void write_manifest(const std::filesystem::path& dir, const std::string& command);

}  // namespace grid4d::cli

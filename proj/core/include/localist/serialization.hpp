// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "localist/numerics.hpp"

namespace localist {

/// Hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

/// Nested row arrays. Doubles are written in shortest round-trip form, so
/// reading back is bit-exact.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// Rounds to the given number of significant decimal digits.
double round_significant(double value, int digits);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace localist

#pragma once

#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "trajectwin/common.hpp"

namespace trajectwin::io {

using nlohmann::json;

// Shortest round-trip decimal representation; "NA" for NaN.
std::string format_double(double value);

// Parses a numeric cell. Empty, NA and NaN (any case) are missing, as is any
// text that is not entirely a number.
std::optional<double> parse_number(std::string_view cell);

bool is_missing_marker(std::string_view cell);
std::string_view trim(std::string_view s);

// Splits one CSV record, honouring double-quoted fields. Reads further lines
// from `in` when a quoted field spans a newline. Returns false at EOF.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields);
std::string csv_escape(std::string_view field);

// Writes through a sibling temporary file and renames it into place.
void atomic_write(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

// Shared matrix document format: {"rows": r, "cols": c, "data": [row-major]}.
json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);
json vector_to_json(const Vector& v);
Vector vector_from_json(const json& j);

// Checks {"format": ..., "version": ...} headers of serialized documents.
void require_document(const json& j, std::string_view format, int version);

}  // namespace trajectwin::io

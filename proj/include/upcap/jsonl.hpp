#pragma once

#include "json.hpp"
#include "upcap/tensor.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace upcap {

using Json = nlohmann::json;

/// Calls `fn(object, line_number)` for every non-blank line. Parse failures
/// and non-object lines raise InvalidInput naming the file and line.
void read_jsonl(const std::filesystem::path& path,
                const std::function<void(const Json&, std::size_t)>& fn);

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows);

Json read_json(const std::filesystem::path& path);

/// Pretty-printed with a trailing newline so reruns are byte-identical.
void write_json(const std::filesystem::path& path, const Json& value);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// {"rows", "cols", "data"} with data in row-major order.
Json matrix_to_json(const Mat& m);
Mat matrix_from_json(const Json& j);
Json vector_to_json(const Vec& v);
Vec vector_from_json(const Json& j);

}  // namespace upcap

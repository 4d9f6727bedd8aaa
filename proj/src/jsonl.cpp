#include "upcap/jsonl.hpp"

#include "upcap/error.hpp"

#include <fstream>
#include <sstream>

namespace upcap {

void read_jsonl(const std::filesystem::path& path,
                const std::function<void(const Json&, std::size_t)>& fn) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json row;
    try {
      row = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(line_no) +
                         ": malformed JSON: " + e.what());
    }
    if (!row.is_object()) {
      throw InvalidInput(path.string() + ":" + std::to_string(line_no) +
                         ": expected a JSON object");
    }
    try {
      fn(row, line_no);
    } catch (const Json::exception& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows) {
  std::ostringstream out;
  for (const auto& row : rows) out << row.dump() << '\n';
  write_text(path, out.str());
}

Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw InvalidInput(path.string() + ": malformed JSON: " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& value) {
  write_text(path, value.dump(2) + "\n");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("write failed for " + path.string());
}

Json matrix_to_json(const Mat& m) {
  Json data = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Mat matrix_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw InvalidInput("matrix payload does not match its declared shape");
  Mat m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
  return m;
}

Json vector_to_json(const Vec& v) { return Json(to_std(v)); }

Vec vector_from_json(const Json& j) { return to_vec(j.get<std::vector<double>>()); }

}  // namespace upcap

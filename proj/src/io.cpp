#include "gmic/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gmic {

namespace {

void write_pgm_bytes(const std::filesystem::path& path, Index rows, Index cols, const std::vector<std::uint8_t>& px) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

std::vector<std::uint8_t> read_pgm_bytes(const std::filesystem::path& path, Index& rows, Index& cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error(path.string() + ": not a binary PGM");
  auto next_int = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = 0;
    in >> v;
    return v;
  };
  cols = next_int();
  rows = next_int();
  const long maxval = next_int();
  if (maxval != 255 || rows <= 0 || cols <= 0) throw std::runtime_error(path.string() + ": unsupported PGM header");
  in.get();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) throw std::runtime_error(path.string() + ": truncated");
  return px;
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) px[static_cast<std::size_t>(i)] = to_byte(image.data()[i]);
  write_pgm_bytes(path, image.rows(), image.cols(), px);
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i) px[static_cast<std::size_t>(i)] = mask.data()[i] ? 255 : 0;
  write_pgm_bytes(path, mask.rows(), mask.cols(), px);
}

Image read_pgm(const std::filesystem::path& path) {
  Index rows = 0, cols = 0;
  const auto px = read_pgm_bytes(path, rows, cols);
  Image out(rows, cols);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(px[static_cast<std::size_t>(i)]) / 255.0f;
  return out;
}

Mask read_mask_pgm(const std::filesystem::path& path) {
  Index rows = 0, cols = 0;
  const auto px = read_pgm_bytes(path, rows, cols);
  Mask out(rows, cols);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = px[static_cast<std::size_t>(i)] ? 1 : 0;
  return out;
}

Image quantize_8bit(const Image& image) {
  Image out(image.rows(), image.cols());
  for (Index i = 0; i < image.size(); ++i) out.data()[i] = static_cast<float>(to_byte(image.data()[i])) / 255.0f;
  return out;
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("CSV is missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) {
      if (!f.empty() && f.back() == '\r') f.pop_back();
      fields.push_back(f);
    }
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
  };
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty CSV");
  table.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto fields = split(line);
    if (fields.size() != table.header.size())
      throw std::runtime_error(path.string() + ": row has " + std::to_string(fields.size()) + " fields, expected " +
                               std::to_string(table.header.size()));
    table.rows.push_back(std::move(fields));
  }
  return table;
}

}  // namespace gmic

#include "laser/io_util.hpp"

#include "laser/error.hpp"

#include <fstream>
#include <sstream>
#include <system_error>

#include <unistd.h>

namespace laser {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(std::move(line));
  if (in.bad()) throw IoError("read failed: " + path.string());
  return lines;
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
  }
}

std::string_view ByteReader::raw(std::size_t n) {
  if (n > remaining()) {
    fail("truncated: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
         " left");
  }
  std::string_view out = bytes_.substr(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::f32s(std::span<float> out) {
  std::string_view src = raw(out.size() * sizeof(float));
  std::memcpy(out.data(), src.data(), src.size());
}

void ByteReader::fail(const std::string& what) const {
  throw FormatError(context_ + ": " + what + " at byte offset " + std::to_string(pos_));
}

}  // namespace laser

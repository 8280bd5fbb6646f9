#include "io_util.hpp"

#include <fstream>
#include <iterator>

#include "nodulenet/error.hpp"

namespace nodulenet {

namespace {

std::string slurp(const std::filesystem::path& path, std::ios::openmode mode) {
  std::ifstream in(path, mode);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string read_text_file(const std::filesystem::path& path) { return slurp(path, std::ios::in); }

std::string read_binary_file(const std::filesystem::path& path) { return slurp(path, std::ios::in | std::ios::binary); }

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::out | std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string_view ByteCursor::line() {
  const auto nl = bytes_.find('\n', pos_);
  if (nl == std::string_view::npos) throw FormatError("unterminated header line");
  const auto out = bytes_.substr(pos_, nl - pos_);
  pos_ = nl + 1;
  return out;
}

std::string_view ByteCursor::take(std::size_t n) {
  if (remaining() < n) throw FormatError("truncated payload");
  const auto out = bytes_.substr(pos_, n);
  pos_ += n;
  return out;
}

}  // namespace nodulenet

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>

namespace nodulenet {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
T load_le(const char* p) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

template <typename T>
void append_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

std::string read_text_file(const std::filesystem::path& path);
std::string read_binary_file(const std::filesystem::path& path);

/// Writes to `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Sequential reader over an in-memory byte buffer.
class ByteCursor {
 public:
  explicit ByteCursor(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  /// Returns the next '\n'-terminated line without the terminator.
  std::string_view line();
  std::string_view take(std::size_t n);

  template <typename T>
  T read() {
    const auto chunk = take(sizeof(T));
    return load_le<T>(chunk.data());
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace nodulenet

// File-level errors and little-endian binary helpers shared by the on-disk
// formats (checkpoints, codebooks, feature sidecars).
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gridpaint {

/// Missing, unreadable or unwritable artifact.
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Artifact exists but its bytes do not match the expected format.
class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.append(s); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> v);
  const std::string& str() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view buf) : buf_(buf) {}
  std::string_view bytes(std::size_t n);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::vector<float> f32s(std::size_t n);
  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }
  void seek(std::size_t pos);

 private:
  std::string_view buf_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
/// Creates parent directories as needed.
void write_file(const std::filesystem::path& path, std::string_view contents);

/// 64-bit FNV-1a, hex-printable via hex64().
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace gridpaint

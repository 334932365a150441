#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>

#include "rarelens/errors.hpp"
#include "rarelens/tensor.hpp"

namespace rarelens::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::uint32_t crc32(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Little-endian record writer. Tensors are stored as named f32 blobs:
// name (u32 length + bytes), rank u32, dims u32 each, then f32 values.
class Writer {
 public:
  void magic(std::string_view m) { buf_.append(m); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void f32(float v) { put(v); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void blob(std::string_view name, const Tensor& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) f32(static_cast<float>(v));
  }
  void raw_f32(const Tensor& t) {
    for (double v : t.data()) f32(static_cast<float>(v));
  }

  // Append the CRC32 of everything written so far and return the bytes.
  std::string finish_with_crc() {
    const auto c = crc32(buf_);
    u32(c);
    return std::move(buf_);
  }
  std::string finish() { return std::move(buf_); }

 private:
  template <typename T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  std::string buf_;
};

class Reader {
 public:
  // With `has_crc`, the trailing u32 must equal the CRC32 of the preceding
  // bytes; any mismatch or truncation raises ChecksumError.
  Reader(std::string bytes, std::string what, bool has_crc) : what_(std::move(what)) {
    if (has_crc) {
      if (bytes.size() < 4) throw ChecksumError(what_ + ": file too short");
      std::uint32_t stored;
      std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
      bytes.resize(bytes.size() - 4);
      if (crc32(bytes) != stored) throw ChecksumError(what_ + ": CRC32 mismatch");
      crc_ = stored;
    }
    buf_ = std::move(bytes);
  }

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::string_view(buf_).substr(pos_, m.size()) != m)
      throw ChecksumError(what_ + ": bad magic, expected " + std::string(m));
    pos_ += m.size();
  }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  float f32() { return get<float>(); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> blob() {
    std::string name = str();
    const auto rank = u32();
    if (rank > 8) throw ChecksumError(what_ + ": implausible blob rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(u32());
    const std::size_t n = shape_numel(shape);
    need(n * 4);
    std::vector<double> data(n);
    for (auto& v : data) v = f32();
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
  }
  Tensor raw_f32(Shape shape) {
    const std::size_t n = shape_numel(shape);
    need(n * 4);
    std::vector<double> data(n);
    for (auto& v : data) v = f32();
    return Tensor(std::move(shape), std::move(data));
  }

  bool at_end() const { return pos_ == buf_.size(); }
  void expect_end() const {
    if (!at_end()) throw ChecksumError(what_ + ": trailing bytes");
  }
  std::uint32_t crc() const { return crc_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw ChecksumError(what_ + ": truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
  std::uint32_t crc_ = 0;
};

// CRC32 of a file's trailing checksum field, i.e. the artifact identity.
inline std::uint32_t stored_crc(std::string_view bytes) {
  if (bytes.size() < 4) return 0;
  std::uint32_t c;
  std::memcpy(&c, bytes.data() + bytes.size() - 4, 4);
  return c;
}

}  // namespace rarelens::io

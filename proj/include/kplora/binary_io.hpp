#pragma once

#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kplora/error.hpp"
#include "kplora/matrix.hpp"

namespace kplora {

// Little-endian writer for checkpoint files. Doubles are stored as their
// IEEE-754 bit pattern.
class BinaryWriter {
public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s.data(), s.size()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  // rows:u32, cols:u32, then rows*cols f64 in row-major order
  void matrix(const Matrix& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (double v : m.flat()) f64(v);
  }

  const std::string& buffer() const noexcept { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path, std::strerror(errno));
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    out.flush();
    if (!out) throw IoError(path, "write failed");
  }

private:
  std::string buf_;
};

class BinaryReader {
public:
  explicit BinaryReader(std::string data, std::string origin = "<memory>")
      : data_(std::move(data)), origin_(std::move(origin)) {}

  static BinaryReader open(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path, std::strerror(errno));
    std::ostringstream ss;
    ss << in.rdbuf();
    return BinaryReader(ss.str(), path);
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(u32()); }
  Matrix matrix() {
    const std::size_t rows = u32();
    const std::size_t cols = u32();
    need(rows * cols * 8);
    Matrix m(rows, cols);
    for (auto& v : m.flat()) v = f64();
    return m;
  }

  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t position() const noexcept { return pos_; }
  const std::string& origin() const noexcept { return origin_; }

private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError(origin_ + ": truncated checkpoint", pos_);
  }

  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace kplora

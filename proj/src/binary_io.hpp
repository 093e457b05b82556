#pragma once

// Internal helpers for the little-endian binary containers.

#include <cstdint>
#include <fstream>
#include <string>

#include "mtl/errors.hpp"

namespace mtl::detail {

class BinaryReader {
 public:
  BinaryReader(std::ifstream& in, std::string path)
      : in_(in), path_(std::move(path)) {}

  void read_bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(path_ + ": truncated while reading " + what +
                        " at byte offset " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t read_u32(const char* what) {
    std::uint32_t v = 0;
    read_bytes(&v, sizeof v, what);
    return v;
  }

  std::uint64_t read_u64(const char* what) {
    std::uint64_t v = 0;
    read_bytes(&v, sizeof v, what);
    return v;
  }

  void expect_magic(const char magic[4]) {
    char got[4] = {};
    read_bytes(got, 4, "magic");
    if (std::string(got, 4) != std::string(magic, 4)) {
      throw FormatError(path_ + ": bad magic at byte offset 0, expected \"" +
                        std::string(magic, 4) + "\"");
    }
  }

  std::uint64_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

 private:
  std::ifstream& in_;
  std::string path_;
  std::uint64_t offset_ = 0;
};

class BinaryWriter {
 public:
  BinaryWriter(std::ofstream& out, std::string path)
      : out_(out), path_(std::move(path)) {}

  void write_bytes(const void* src, std::size_t n) {
    out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    if (!out_) {
      throw DataError(path_ + ": write failed");
    }
  }

  void write_u32(std::uint32_t v) { write_bytes(&v, sizeof v); }
  void write_u64(std::uint64_t v) { write_bytes(&v, sizeof v); }

 private:
  std::ofstream& out_;
  std::string path_;
};

}  // namespace mtl::detail

#ifndef MIBCI_BINARY_IO_HPP
#define MIBCI_BINARY_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mibci/common.hpp"

// Little-endian binary readers/writers. Readers track their offset so format
// errors can name the file and the byte where parsing failed.

namespace mibci {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; byte-swapping readers are not implemented");

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string name) : in_(in), name_(std::move(name)) {}

  uint64_t offset() const { return offset_; }
  const std::string& name() const { return name_; }

  void read_bytes(void* dst, size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) {
      throw FormatError(name_ + ": truncated while reading " + std::string(what) + " at offset " +
                        std::to_string(offset_));
    }
    offset_ += n;
  }

  template <typename T>
  T read(const char* what) {
    T v;
    read_bytes(&v, sizeof(T), what);
    return v;
  }

  void expect_magic(const char magic[4], const char* what) {
    char buf[4];
    read_bytes(buf, 4, what);
    if (std::memcmp(buf, magic, 4) != 0) {
      throw FormatError(name_ + ": bad magic for " + std::string(what) + " at offset 0, expected \"" +
                        std::string(magic, 4) + "\" got \"" + std::string(buf, 4) + "\"");
    }
  }

  void expect_eof(const char* what) {
    char c;
    in_.read(&c, 1);
    if (!in_.eof()) {
      throw FormatError(name_ + ": trailing bytes after " + std::string(what) + " at offset " +
                        std::to_string(offset_));
    }
  }

 private:
  std::istream& in_;
  std::string name_;
  uint64_t offset_ = 0;
};

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void write_bytes(const void* src, size_t n) { out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n)); }

  template <typename T>
  void write(T v) {
    write_bytes(&v, sizeof(T));
  }

 private:
  std::ostream& out_;
};

}  // namespace mibci

#endif  // MIBCI_BINARY_IO_HPP

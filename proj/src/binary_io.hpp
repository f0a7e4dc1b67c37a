#pragma once

// Little-endian field helpers shared by the binary containers. Values are
// written in host order, which is little-endian on every supported target.

#include <bit>
#include <istream>
#include <ostream>
#include <string>

#include "distnet/error.hpp"

namespace distnet::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
inline void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

/// Reads fixed-size fields and reports the byte offset of any short read.
class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  template <typename T>
  T get(const char* field) {
    T value{};
    read(reinterpret_cast<char*>(&value), sizeof(T), field);
    return value;
  }

  void read(char* dst, std::size_t bytes, const char* field) {
    in_.read(dst, static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in_.gcount()) != bytes) {
      fail(ErrorKind::Format, what_ + ": truncated while reading " + field + " at byte offset " +
                                  std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
    }
    offset_ += bytes;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::string what_;
  std::size_t offset_ = 0;
};

}  // namespace distnet::io

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "lmunet/error.hpp"

// Little-endian byte buffers for the on-disk formats. Files are read whole and
// parsed from memory so a truncated file fails before anything is built.
namespace lmunet::binio {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

class Writer {
 public:
  template <typename P>
  void pod(P v) {
    static_assert(std::is_trivially_copyable_v<P>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(P));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw DataError("write failed for " + path.string());
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path_);
    buf_.assign(std::istreambuf_iterator<char>(in), {});
  }

  template <typename P>
  P pod() {
    P v;
    std::memcpy(&v, take(sizeof(P)), sizeof(P));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > buf_.size() - pos_) throw LoadError(path_ + ": truncated at byte " + std::to_string(pos_));
    const auto* p = reinterpret_cast<const std::uint8_t*>(buf_.data()) + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace lmunet::binio

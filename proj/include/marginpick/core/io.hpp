#pragma once

#include <unistd.h>

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "marginpick/core/error.hpp"
#include "marginpick/core/rng.hpp"

namespace mp::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr const char* kOutputRootEnv = "MARGINPICK_OUT";

// Output root: explicit flag, else $MARGINPICK_OUT, else ./marginpick-out.
inline fs::path output_root(const std::string& flag = {}) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "marginpick-out";
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create directory ", dir.string(), ": ", ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open ", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
inline void write_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  static std::atomic<std::uint64_t> counter{0};
  fs::path tmp = path;
  tmp += cat(".tmp", ::getpid(), "_", counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write ", tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "short write to ", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::io, "cannot move ", tmp.string(), " to ", path.string());
  }
}

// Little-endian append/read helpers for the binary containers.
class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    buf_.append(p, sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    buf_.append(s);
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get() {
    T value;
    need(sizeof(T));
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::data, what_, ": truncated at byte ", pos_);
  }
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace mp::io

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "marginpick/core/io.hpp"
#include "marginpick/core/rng.hpp"
#include "marginpick/nn/model.hpp"

namespace mp {

// Checkpoint container, all little-endian:
//   "MPCK" u32 version
//   string config JSON, u64 stage count, (string id, string kind) per stage
//   u64 tensor count, per tensor: string name, u8 dtype (4 = f32, 8 = f64),
//     u64 rank, u64 dims[rank], raw values
//   u64 FNV-1a checksum of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_tensor(io::Writer& w, const std::string& name, const Tensor<T>& t) {
  w.put_string(name);
  w.put<std::uint8_t>(sizeof(T));
  w.put<std::uint64_t>(t.rank());
  for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
  w.put_bytes(t.data().data(), t.size() * sizeof(T));
}

template <typename T>
void get_tensor(io::Reader& r, const std::string& expected, Tensor<T>& t, const std::string& what) {
  const std::string name = r.get_string();
  if (name != expected) fail(ErrorKind::data, what, ": expected tensor '", expected, "', found '", name, "'");
  if (r.get<std::uint8_t>() != sizeof(T)) fail(ErrorKind::data, what, ": tensor '", name, "' has the wrong type");
  Shape shape(r.get<std::uint64_t>());
  for (auto& d : shape) d = r.get<std::uint64_t>();
  if (shape != t.shape()) {
    fail(ErrorKind::data, what, ": tensor '", name, "' has shape ", to_string(shape), ", model expects ",
         to_string(t.shape()));
  }
  r.get_bytes(t.data().data(), t.size() * sizeof(T));
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const Model<T>& m) {
  io::Writer w;
  w.put_bytes("MPCK", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(nlohmann::json(m.config()).dump());
  w.put<std::uint64_t>(m.stages().size());
  for (const auto& s : m.stages()) {
    w.put_string(s.id);
    w.put_string(s.kind);
  }
  w.put<std::uint64_t>(m.parameters().size() + m.buffers().size() + 1);
  for (const auto& p : m.parameters()) detail::put_tensor(w, p.name, p.value);
  for (const auto& b : m.buffers()) detail::put_tensor(w, b.name, b.value);
  detail::put_tensor(w, "constrained.master", m.constrained_master());
  w.put<std::uint64_t>(fnv1a(w.buffer()));
  return std::move(w.buffer());
}

inline ModelConfig checkpoint_config(std::string_view bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 16) fail(ErrorKind::data, what, ": truncated");
  io::Reader tail(bytes.substr(bytes.size() - 8), what);
  if (tail.get<std::uint64_t>() != fnv1a(bytes.substr(0, bytes.size() - 8)))
    fail(ErrorKind::data, what, ": checksum mismatch");
  io::Reader r(bytes.substr(0, bytes.size() - 8), what);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::string_view(magic, 4) != "MPCK") fail(ErrorKind::data, what, ": not a checkpoint");
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    fail(ErrorKind::data, what, ": unsupported version ", v);
  try {
    return nlohmann::json::parse(r.get_string()).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, what, ": bad config: ", e.what());
  }
}

template <typename T>
Model<T> decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  Model<T> m(checkpoint_config(bytes, what));
  io::Reader r(bytes.substr(0, bytes.size() - 8), what);
  char magic[4];
  r.get_bytes(magic, 4);
  r.get<std::uint32_t>();
  r.get_string();
  const auto n_stages = r.get<std::uint64_t>();
  if (n_stages != m.stages().size()) fail(ErrorKind::data, what, ": stage list does not match the config");
  for (const auto& s : m.stages()) {
    if (r.get_string() != s.id || r.get_string() != s.kind)
      fail(ErrorKind::data, what, ": stage list does not match the config");
  }
  const auto n = r.get<std::uint64_t>();
  if (n != m.parameters().size() + m.buffers().size() + 1) fail(ErrorKind::data, what, ": wrong tensor count");
  for (auto& p : m.parameters()) detail::get_tensor(r, p.name, p.value, what);
  for (auto& b : m.buffers()) detail::get_tensor(r, b.name, b.value, what);
  detail::get_tensor(r, "constrained.master", m.constrained_master(), what);
  if (!r.done()) fail(ErrorKind::data, what, ": trailing bytes");
  return m;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& m) {
  io::write_atomic(path, encode_checkpoint(m));
}

template <typename T = float>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path), path.string());
}

}  // namespace mp

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ytune/binary_io.hpp"
#include "ytune/hash.hpp"
#include "ytune/tensor.hpp"

namespace ytune {

// Checkpoint container ("YTCK"), little-endian:
//   magic "YTCK" | u32 version | u32 echo length | echo (UTF-8 text)
//   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
//     u64 dims[rank], f64 data | u32 CRC32 of all preceding bytes

inline constexpr char kCheckpointMagic[4] = {'Y', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointData {
  std::string echo;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
};

inline std::string encode_checkpoint(const CheckpointData& ck) {
  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.echo.size()));
  w.raw(ck.echo);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) w.u64(d);
    w.f64s(t.value.values());
  }
  std::string bytes = w.take();
  ByteWriter trailer;
  trailer.u32(crc32_of(bytes.data(), bytes.size()));
  bytes += trailer.bytes();
  return bytes;
}

inline CheckpointData decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kCheckpointMagic, 4))
    throw FormatError("not a checkpoint file (bad magic)");
  r.raw(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData ck;
  const std::uint32_t echo_len = r.u32("echo length");
  ck.echo = std::string(r.raw(echo_len, "config echo"));
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(r.raw(r.u32("name length"), "tensor name"));
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError("tensor '" + t.name + "' has invalid rank");
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64("tensor dims");
      if (dim == 0 || dim > (1ULL << 32)) throw FormatError("tensor '" + t.name + "' has invalid dims");
      total *= dim;
      if (total * sizeof(double) > bytes.size())
        throw TruncationError("tensor '" + t.name + "' larger than file", r.offset());
      shape.push_back(static_cast<std::size_t>(dim));
    }
    std::vector<double> data(static_cast<std::size_t>(total));
    r.f64s(data, "tensor data");
    t.value = Tensor(std::move(shape), std::move(data));
    ck.tensors.push_back(std::move(t));
  }
  const std::size_t body = r.position();
  const std::uint32_t stored = r.u32("CRC32 trailer");
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after checkpoint trailer at offset " + std::to_string(r.offset()));
  if (stored != crc32_of(bytes.data(), body))
    throw IntegrityError("checkpoint CRC32 mismatch");
  return ck;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out.flush()) throw InputError("write failed for " + path.string());
}

inline void save_checkpoint_file(const std::filesystem::path& path, const CheckpointData& ck) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline CheckpointData load_checkpoint_file(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace ytune

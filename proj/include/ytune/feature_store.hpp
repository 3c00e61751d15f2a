#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ytune/binary_io.hpp"
#include "ytune/encoder.hpp"
#include "ytune/hash.hpp"

namespace ytune {

// On-disk layout ("YTFS"), little-endian:
//   header: magic "YTFS" | u32 version = 1 | u64 record count
//   record: u64 encoder fingerprint | u64 input digest | u64 layer mask
//           | u32 M | u32 H | popcount(mask) * M * H f64 (ascending layer)
//           | u32 CRC32 of the preceding record bytes
// Records are append-only; the header count is rewritten after each append.

inline constexpr char kStoreMagic[4] = {'Y', 'T', 'F', 'S'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderSize = 16;
inline constexpr std::size_t kRecordFixedSize = 8 + 8 + 8 + 4 + 4;

/// FNV-1a over the little-endian bytes of the token ids.
inline std::uint64_t input_digest(const TokenSequence& seq) {
  Fnv1a64 h;
  for (TokenId id : seq.ids) h.u32(id);
  return h.digest();
}

struct FeatureKey {
  std::uint64_t encoder_fingerprint = 0;
  std::uint64_t input_digest = 0;
  std::uint64_t layer_mask = 0;
  bool operator==(const FeatureKey&) const = default;
};

struct FeatureKeyHash {
  std::size_t operator()(const FeatureKey& k) const {
    Fnv1a64 h;
    h.u64(k.encoder_fingerprint);
    h.u64(k.input_digest);
    h.u64(k.layer_mask);
    return static_cast<std::size_t>(h.digest());
  }
};

/// Cached hidden states for one input: one M x H matrix per set bit of the
/// layer mask, in ascending layer order.
struct FeatureRecord {
  FeatureKey key;
  std::uint32_t seq_len = 0;
  std::uint32_t hidden = 0;
  std::vector<Tensor> layers;

  void validate() const {
    if (key.layer_mask == 0) throw UsageError("feature record with an empty layer mask");
    if (layers.size() != static_cast<std::size_t>(std::popcount(key.layer_mask)))
      throw UsageError("feature record has " + std::to_string(layers.size()) +
                       " layers for a mask selecting " +
                       std::to_string(std::popcount(key.layer_mask)));
    for (const Tensor& t : layers) {
      if (t.rank() != 2 || t.rows() != seq_len || t.cols() != hidden)
        throw DimensionError("feature layer of shape " + shape_str(t.shape()) + " in a " +
                             std::to_string(seq_len) + "x" + std::to_string(hidden) + " record");
      if (!t.all_finite()) throw UsageError("feature record contains non-finite values");
    }
  }
};

inline std::string encode_record(const FeatureRecord& r) {
  r.validate();
  ByteWriter w;
  w.u64(r.key.encoder_fingerprint);
  w.u64(r.key.input_digest);
  w.u64(r.key.layer_mask);
  w.u32(r.seq_len);
  w.u32(r.hidden);
  for (const Tensor& t : r.layers) w.f64s(t.values());
  std::string bytes = w.take();
  ByteWriter crc;
  crc.u32(crc32_of(bytes.data(), bytes.size()));
  return bytes + crc.bytes();
}

/// Decodes one record from `bytes` (which must hold exactly one record).
inline FeatureRecord decode_record(std::string_view bytes, std::uint64_t file_offset = 0) {
  ByteReader r(bytes, file_offset);
  FeatureRecord rec;
  rec.key.encoder_fingerprint = r.u64("record key");
  rec.key.input_digest = r.u64("record key");
  rec.key.layer_mask = r.u64("record key");
  rec.seq_len = r.u32("record M");
  rec.hidden = r.u32("record H");
  const std::size_t layers = static_cast<std::size_t>(std::popcount(rec.key.layer_mask));
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor t = Tensor::matrix(rec.seq_len, rec.hidden);
    r.f64s(t.values(), "record data");
    rec.layers.push_back(std::move(t));
  }
  const std::size_t body = r.position();
  const std::uint32_t stored = r.u32("record CRC32");
  if (stored != crc32_of(bytes.data(), body))
    throw IntegrityError("feature record CRC32 mismatch at byte offset " + std::to_string(file_offset));
  return rec;
}

enum class StoreMode {
  Read,    // existing file, no puts
  Create,  // new empty file, replacing any existing one
  Append,  // existing file if present, otherwise a new one
};

/// Append-only disk cache of frozen encoder features with an in-memory
/// index rebuilt (and every record checksum verified) on open.
class FeatureStore {
 public:
  static FeatureStore open(const std::filesystem::path& path, StoreMode mode) {
    FeatureStore s;
    s.path_ = path;
    s.writable_ = mode != StoreMode::Read;
    const bool fresh = mode == StoreMode::Create ||
                       (mode == StoreMode::Append && !std::filesystem::exists(path));
    if (fresh) {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      if (!out) throw InputError("cannot create feature store " + path.string());
      ByteWriter w;
      w.raw(std::string_view(kStoreMagic, 4));
      w.u32(kStoreVersion);
      w.u64(0);
      out.write(w.bytes().data(), static_cast<std::streamsize>(w.size()));
      if (!out.flush()) throw InputError("cannot write feature store " + path.string());
    }
    s.file_.open(path, std::ios::binary | std::ios::in | (s.writable_ ? std::ios::out : std::ios::in));
    if (!s.file_) throw InputError("cannot open feature store " + path.string());
    s.scan();
    return s;
  }

  FeatureStore(FeatureStore&&) = default;
  FeatureStore& operator=(FeatureStore&&) = default;

  std::size_t count() const { return index_.size(); }
  const std::filesystem::path& path() const { return path_; }
  bool contains(const FeatureKey& k) const { return index_.count(k) > 0; }

  /// Appends a record. Re-putting identical bytes under an existing key is a
  /// no-op; different bytes are an integrity error.
  void put(const FeatureRecord& record) {
    if (!writable_) throw UsageError("feature store opened read-only");
    std::string bytes = encode_record(record);
    std::lock_guard lock(*mu_);
    if (auto it = index_.find(record.key); it != index_.end()) {
      if (read_at(it->second.offset, it->second.size) != bytes)
        throw IntegrityError("conflicting feature record for an existing key");
      return;
    }
    file_.clear();
    file_.seekp(static_cast<std::streamoff>(end_));
    file_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file_.flush()) throw InputError("feature store write failed");
    index_.emplace(record.key, Entry{end_, bytes.size()});
    end_ += bytes.size();
    ByteWriter w;
    w.u64(index_.size());
    file_.seekp(8);
    file_.write(w.bytes().data(), 8);
    if (!file_.flush()) throw InputError("feature store header update failed");
  }

  /// Stored record for `key`, or nullopt when absent.
  std::optional<FeatureRecord> get(const FeatureKey& key) {
    std::lock_guard lock(*mu_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    const std::string bytes = read_at(it->second.offset, it->second.size);
    FeatureRecord rec = decode_record(bytes, it->second.offset);
    if (!(rec.key == key)) throw IntegrityError("feature record key changed on disk");
    return rec;
  }

 private:
  struct Entry {
    std::uint64_t offset;
    std::size_t size;
  };

  FeatureStore() = default;

  std::string read_at(std::uint64_t offset, std::size_t n) {
    std::string buf(n, '\0');
    file_.clear();
    file_.seekg(static_cast<std::streamoff>(offset));
    file_.read(buf.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(file_.gcount()) != n)
      throw TruncationError("feature record cut short", offset + static_cast<std::uint64_t>(file_.gcount()));
    return buf;
  }

  void scan() {
    const std::uint64_t file_size = std::filesystem::file_size(path_);
    if (file_size < 4) throw FormatError("feature store too short for a header");
    std::string header = read_at(0, std::min<std::uint64_t>(kStoreHeaderSize, file_size));
    if (std::string_view(header).substr(0, 4) != std::string_view(kStoreMagic, 4))
      throw FormatError("not a feature store (bad magic)");
    ByteReader hr(header);
    hr.raw(4, "magic");
    const std::uint32_t version = hr.u32("version");
    if (version != kStoreVersion)
      throw FormatError("unsupported feature store version " + std::to_string(version));
    const std::uint64_t count = hr.u64("record count");
    std::uint64_t off = kStoreHeaderSize;
    for (std::uint64_t i = 0; i < count; ++i) {
      if (file_size - off < kRecordFixedSize)
        throw TruncationError("partial feature record " + std::to_string(i), off);
      std::string fixed = read_at(off, kRecordFixedSize);
      ByteReader fr(fixed, off);
      fr.u64("key");
      fr.u64("key");
      const std::uint64_t mask = fr.u64("key");
      const std::uint64_t M = fr.u32("M"), H = fr.u32("H");
      const std::uint64_t layers = static_cast<std::uint64_t>(std::popcount(mask));
      if (layers == 0 || M == 0 || H == 0)
        throw FormatError("feature record " + std::to_string(i) + " at byte offset " +
                          std::to_string(off) + " has an empty shape");
      const std::uint64_t data = layers * M * H * sizeof(double);
      const std::uint64_t total = kRecordFixedSize + data + 4;
      if (data / (layers * sizeof(double)) != M * H || file_size - off < total)
        throw TruncationError("partial feature record " + std::to_string(i), off);
      FeatureRecord rec = decode_record(read_at(off, total), off);
      if (!index_.emplace(rec.key, Entry{off, static_cast<std::size_t>(total)}).second)
        throw IntegrityError("duplicate feature record key at byte offset " + std::to_string(off));
      off += total;
    }
    if (off != file_size)
      throw TruncationError("bytes after the last indexed feature record", off);
    end_ = off;
  }

  std::filesystem::path path_;
  std::fstream file_;
  bool writable_ = false;
  std::unordered_map<FeatureKey, Entry, FeatureKeyHash> index_;
  std::uint64_t end_ = kStoreHeaderSize;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

/// Selects the masked layers of a full encoding into a record.
inline FeatureRecord make_record(std::uint64_t fingerprint, const TokenSequence& seq,
                                 std::uint64_t layer_mask, const LayerFeatures& all_layers) {
  FeatureRecord r;
  r.key = {fingerprint, input_digest(seq), layer_mask};
  r.seq_len = static_cast<std::uint32_t>(seq.size());
  r.hidden = all_layers.empty() ? 0 : static_cast<std::uint32_t>(all_layers.front().cols());
  for (std::size_t l = 0; l < all_layers.size(); ++l)
    if (layer_mask & (1ULL << l)) r.layers.push_back(all_layers[l]);
  return r;
}

/// Expands a record back to one slot per encoder layer (unmasked slots empty).
inline LayerFeatures expand_record(const FeatureRecord& r, std::size_t encoder_layers) {
  LayerFeatures out(encoder_layers);
  std::size_t next = 0;
  for (std::size_t l = 0; l < encoder_layers; ++l)
    if (r.key.layer_mask & (1ULL << l)) out[l] = r.layers.at(next++);
  return out;
}

}  // namespace ytune

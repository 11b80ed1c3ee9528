#include "usm/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

namespace usm {

namespace {

using Kind = CheckpointError::Kind;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::size_t end) : b_(b), end_(end) {}
  void need(std::uint64_t n, const char* what) const {
    if (n > end_ - pos_) {
      throw CheckpointError(Kind::kTruncated, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                                  std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() {
    const std::uint64_t v = u64("tensor payload");
    return std::bit_cast<double>(v);
  }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> b) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < b.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(b.size() - off, 1u << 30));
    crc = crc32(crc, b.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes("USMC", 4);
  w.u32(kCheckpointVersion);
  const std::string cfg = ck.config.to_string();
  w.u64(cfg.size());
  w.bytes(cfg.data(), cfg.size());
  w.u64(ck.tensors.size());
  for (const auto& nt : ck.tensors) {
    w.u32(static_cast<std::uint32_t>(nt.name.size()));
    w.bytes(nt.name.data(), nt.name.size());
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (double v : nt.tensor.data()) w.f64(v);
  }
  auto& out = w.buffer();
  const std::uint32_t crc = crc32_of(out);
  w.u32(crc);
  return std::move(out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw CheckpointError(Kind::kTruncated, "checkpoint truncated: no magic");
  if (std::string(reinterpret_cast<const char*>(bytes.data()), 4) != "USMC") {
    throw CheckpointError(Kind::kBadMagic, "not a checkpoint: bad magic");
  }
  // The structure walk stops 4 bytes short so a cut file reads as truncated
  // rather than as a checksum failure.
  if (bytes.size() < 12) throw CheckpointError(Kind::kTruncated, "checkpoint truncated: header incomplete");
  Reader r(bytes, bytes.size() - 4);
  r.str(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kVersion, "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                              std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const std::uint64_t cfg_len = r.u64("config length");
  const std::string cfg = r.str(cfg_len, "config");
  const std::uint64_t count = r.u64("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.str(r.u32("name length"), "tensor name");
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64("dims");
      if (d == 0 || d > (std::uint64_t{1} << 40)) {
        throw CheckpointError(Kind::kContent, "tensor '" + nt.name + "' has invalid dim " + std::to_string(d));
      }
      shape.push_back(static_cast<std::int64_t>(d));
      numel *= d;
    }
    if (rank == 0) throw CheckpointError(Kind::kContent, "tensor '" + nt.name + "' has rank 0");
    r.need(numel * 8, "tensor payload");
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = r.f64();
    nt.tensor = Tensor::from(std::move(shape), std::move(data));
    ck.tensors.push_back(std::move(nt));
  }
  if (r.pos() != bytes.size() - 4) {
    throw CheckpointError(Kind::kContent, "checkpoint has " + std::to_string(bytes.size() - 4 - r.pos()) +
                                              " unexpected trailing bytes");
  }
  const std::uint32_t stored = Reader(bytes.subspan(bytes.size() - 4), 4).u32("crc");
  const std::uint32_t actual = crc32_of(bytes.first(bytes.size() - 4));
  if (stored != actual) throw CheckpointError(Kind::kCrc, "checkpoint CRC mismatch");
  try {
    ck.config = KeyValue::parse(cfg);
  } catch (const FormatError& e) {
    throw CheckpointError(Kind::kContent, std::string("checkpoint config: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(Kind::kIo, "cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError(Kind::kIo, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(Kind::kIo, "cannot rename " + tmp + " to " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Kind::kIo, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint make_checkpoint(const UsmParams& params, const ModelConfig& cfg, const KeyValue& extra) {
  Checkpoint ck;
  ck.config = extra;
  cfg.write(ck.config);
  ck.tensors = params.named();
  return ck;
}

LoadedModel model_from_checkpoint(const Checkpoint& ck) {
  LoadedModel m;
  m.meta = ck.config;
  try {
    m.config = ModelConfig::read(ck.config);
    Rng scratch(0);
    m.params = init_params(m.config, scratch);
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::kContent, std::string("checkpoint model config: ") + e.what());
  }
  std::map<std::string, const Tensor*> stored;
  for (const auto& nt : ck.tensors) {
    if (!stored.emplace(nt.name, &nt.tensor).second) {
      throw CheckpointError(Kind::kContent, "duplicate tensor '" + nt.name + "'");
    }
  }
  auto wanted = m.params.named();
  for (auto& nt : wanted) {
    auto it = stored.find(nt.name);
    if (it == stored.end()) throw CheckpointError(Kind::kContent, "checkpoint is missing tensor '" + nt.name + "'");
    if (it->second->shape() != nt.tensor.shape()) {
      throw CheckpointError(Kind::kContent, "tensor '" + nt.name + "' has shape " + shape_str(it->second->shape()) +
                                                ", model expects " + shape_str(nt.tensor.shape()));
    }
    auto dst = nt.tensor.mutable_data();
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
    stored.erase(it);
  }
  if (!stored.empty()) {
    throw CheckpointError(Kind::kContent, "checkpoint has unexpected tensor '" + stored.begin()->first + "'");
  }
  return m;
}

}  // namespace usm

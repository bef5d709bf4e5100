#pragma once

// Versioned binary checkpoint.
//
//   header : magic "IDPCKPT1" | u32 version | u32 crc32(payload) | u64 payload bytes
//   payload: config echo (text) | state block | tensor records | mask block
//
// Integers and float64 values are little-endian. A tensor record is
// name | rank | dims | raw float64 payload. The checksum covers the whole
// payload, so truncation or corruption is detected before anything is parsed.

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ideaprune/corpus.hpp"
#include "ideaprune/error.hpp"
#include "ideaprune/mask.hpp"
#include "ideaprune/optim.hpp"
#include "ideaprune/prune.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

inline constexpr char kCheckpointMagic[8] = {'I', 'D', 'P', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;  // canonical echo of the producing run
  std::int64_t step = 0;    // optimizer steps completed
  ModelConfig model;        // current shapes (ffn_hidden shrinks after compaction)
  ModelWeights weights;
  OptimizerState optimizer;
  ImportanceState importance;  // empty outside the pruning phase
  NeuronMask mask;
  bool compacted = false;
  std::string rng_state;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.append(s);
  }
  void tensor(const std::string& name, std::size_t rank, std::size_t rows, std::size_t cols,
              const std::vector<double>& values) {
    str(name);
    u8(static_cast<std::uint8_t>(rank));
    u64(rows);
    if (rank == 2) u64(cols);
    for (double v : values) f64(v);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw FormatError("checkpoint payload ends early");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

struct RawTensor {
  std::size_t rank = 0, rows = 0, cols = 0;
  std::vector<double> values;
};

inline std::map<std::string, RawTensor> read_tensors(ByteReader& r) {
  std::map<std::string, RawTensor> out;
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    RawTensor t;
    t.rank = r.u8();
    if (t.rank != 1 && t.rank != 2) throw FormatError("checkpoint tensor " + name + " has rank " + std::to_string(t.rank));
    t.rows = r.u64();
    t.cols = t.rank == 2 ? r.u64() : 1;
    if (t.cols != 0 && t.rows > (std::uint64_t{1} << 40) / t.cols) throw FormatError("checkpoint tensor " + name + " too large");
    t.values.resize(t.rows * t.cols);
    for (double& v : t.values) v = r.f64();
    if (!out.emplace(name, std::move(t)).second) throw FormatError("duplicate checkpoint tensor " + name);
  }
  return out;
}

/// Fills every tensor of `w` (already shaped) from records under `prefix`.
inline void fill_weights(ModelWeights& w, const std::map<std::string, RawTensor>& records, const std::string& prefix) {
  for_each_param(w, [&](const std::string& name, auto& t) {
    const auto it = records.find(prefix + name);
    if (it == records.end()) throw FormatError("checkpoint is missing tensor " + prefix + name);
    if (it->second.values.size() != t.values.size()) {
      throw FormatError("checkpoint tensor " + prefix + name + " has " + std::to_string(it->second.values.size()) +
                        " values, expected " + std::to_string(t.values.size()));
    }
    t.values = it->second.values;
  });
}

inline void write_model_config(ByteWriter& w, const ModelConfig& c) {
  for (std::size_t v : {c.d_model, c.n_heads, c.n_layers, c.ffn_hidden, c.vocab_size, c.seq_len}) w.u64(v);
  w.f64(c.norm_eps);
  w.f64(c.init_std);
}

inline ModelConfig read_model_config(ByteReader& r) {
  ModelConfig c;
  for (std::size_t* v : {&c.d_model, &c.n_heads, &c.n_layers, &c.ffn_hidden, &c.vocab_size, &c.seq_len}) *v = r.u64();
  c.norm_eps = r.f64();
  c.init_std = r.f64();
  return c;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw DataError("cannot create " + tmp.string() + ": " + std::strerror(errno));
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw DataError("write failed for " + tmp.string() + ": " + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) throw DataError("fsync failed for " + tmp.string());
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter p;
  p.str(c.config_text);

  p.i64(c.step);
  detail::write_model_config(p, c.model);
  p.u8(c.compacted ? 1 : 0);
  p.str(c.rng_state);
  p.i64(c.optimizer.step);
  for (double v : {c.optimizer.hp.beta1, c.optimizer.hp.beta2, c.optimizer.hp.eps, c.optimizer.hp.weight_decay,
                   c.optimizer.hp.grad_clip}) {
    p.f64(v);
  }
  p.f64(c.importance.lambda);
  p.u8(static_cast<std::uint8_t>(c.importance.combine.row));
  p.u8(static_cast<std::uint8_t>(c.importance.combine.across));
  p.u64(c.importance.scores.size());

  std::uint64_t tensors_per_model = 0;
  for_each_param(c.weights, [&](const std::string&, const auto&) { ++tensors_per_model; });
  const std::uint64_t count = 3 * tensors_per_model + 3 * c.importance.scores.size();
  p.u64(count);
  auto put_model = [&](const ModelWeights& w, const std::string& prefix) {
    for_each_param(w, [&](const std::string& name, const auto& t) {
      if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Tensor2D>) {
        p.tensor(prefix + name, 2, t.rows, t.cols, t.values);
      } else {
        p.tensor(prefix + name, 1, t.len(), 1, t.values);
      }
    });
  };
  put_model(c.weights, "weights/");
  put_model(c.optimizer.m, "adam.m/");
  put_model(c.optimizer.v, "adam.v/");
  for (std::size_t l = 0; l < c.importance.scores.size(); ++l) {
    const auto& s = c.importance.scores[l];
    const std::string base = "importance/layers." + std::to_string(l) + ".ffn.";
    p.tensor(base + "up", 2, s.up.rows, s.up.cols, s.up.values);
    p.tensor(base + "gate", 2, s.gate.rows, s.gate.cols, s.gate.values);
    p.tensor(base + "down", 2, s.down.rows, s.down.cols, s.down.values);
  }

  p.u64(c.mask.layers());
  for (std::size_t l = 0; l < c.mask.layers(); ++l) {
    p.u64(c.mask.keep[l].size());
    for (auto k : c.mask.keep[l]) p.u8(k);
    p.u64(c.mask.committed[l].size());
    for (auto i : c.mask.committed[l]) p.u64(i);
  }

  const std::string& payload = p.bytes();
  detail::ByteWriter out;
  for (char ch : kCheckpointMagic) out.u8(static_cast<std::uint8_t>(ch));
  out.u32(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()))));
  out.u64(payload.size());
  return out.bytes() + payload;
}

inline Checkpoint deserialize_checkpoint(std::string_view data) {
  if (data.size() < 24 || std::memcmp(data.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(data.size() < 24 ? "checkpoint checksum error: file truncated in header" : "not a checkpoint file");
  }
  detail::ByteReader h(data.substr(8, 16));
  const std::uint32_t version = h.u32();
  const std::uint32_t crc = h.u32();
  const std::uint64_t length = h.u64();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view payload = data.substr(24);
  if (payload.size() != length ||
      ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())) != crc) {
    throw FormatError("checkpoint checksum error: payload is " + std::to_string(payload.size()) + " bytes, header says " +
                      std::to_string(length));
  }

  detail::ByteReader r(payload);
  Checkpoint c;
  c.config_text = r.str();
  c.step = r.i64();
  c.model = detail::read_model_config(r);
  c.compacted = r.u8() != 0;
  c.rng_state = r.str();
  c.optimizer.step = r.i64();
  for (double* v : {&c.optimizer.hp.beta1, &c.optimizer.hp.beta2, &c.optimizer.hp.eps, &c.optimizer.hp.weight_decay,
                    &c.optimizer.hp.grad_clip}) {
    *v = r.f64();
  }
  c.importance.lambda = r.f64();
  const auto reduce_of = [](std::uint8_t v) {
    if (v > 1) throw FormatError("checkpoint has an unknown reduction code");
    return static_cast<Reduce>(v);
  };
  c.importance.combine.row = reduce_of(r.u8());
  c.importance.combine.across = reduce_of(r.u8());
  const std::uint64_t importance_layers = r.u64();

  const auto records = detail::read_tensors(r);
  try {
    c.model.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint model config invalid: ") + e.what());
  }
  Rng shape_rng(0);
  c.weights = zeros_like(init_weights(c.model, shape_rng));
  c.optimizer.m = c.weights;
  c.optimizer.v = c.weights;
  detail::fill_weights(c.weights, records, "weights/");
  detail::fill_weights(c.optimizer.m, records, "adam.m/");
  detail::fill_weights(c.optimizer.v, records, "adam.v/");
  for (std::uint64_t l = 0; l < importance_layers; ++l) {
    FfnScores s{Tensor2D(c.model.ffn_hidden, c.model.d_model), Tensor2D(c.model.ffn_hidden, c.model.d_model),
                Tensor2D(c.model.ffn_hidden, c.model.d_model)};
    const std::string base = "importance/layers." + std::to_string(l) + ".ffn.";
    for (auto [name, t] : {std::pair{"up", &s.up}, std::pair{"gate", &s.gate}, std::pair{"down", &s.down}}) {
      const auto it = records.find(base + name);
      if (it == records.end() || it->second.values.size() != t->values.size()) {
        throw FormatError("checkpoint importance tensor " + base + name + " missing or misshapen");
      }
      t->values = it->second.values;
    }
    c.importance.scores.push_back(std::move(s));
  }

  const std::uint64_t mask_layers = r.u64();
  c.mask.keep.resize(mask_layers);
  c.mask.committed.resize(mask_layers);
  for (std::uint64_t l = 0; l < mask_layers; ++l) {
    const std::uint64_t n = r.u64();
    if (n != c.model.ffn_hidden) throw FormatError("checkpoint mask length does not match ffn_hidden");
    c.mask.keep[l].resize(n);
    for (auto& k : c.mask.keep[l]) k = r.u8();
    const std::uint64_t m = r.u64();
    if (m > n) throw FormatError("checkpoint committed set larger than the layer");
    c.mask.committed[l].resize(m);
    for (auto& i : c.mask.committed[l]) i = r.u64();
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace ideaprune

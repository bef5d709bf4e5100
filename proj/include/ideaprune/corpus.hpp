#pragma once

// Byte-level corpus: ids 0..255 are raw bytes, 256/257 mark document
// boundaries. Documents are split into train / held-out sets as whole
// documents, and training batches are non-overlapping (seq_len + 1)-token
// windows drawn in a seeded per-epoch permutation.

#include <openssl/evp.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "ideaprune/error.hpp"
#include "ideaprune/rng.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::size_t kByteVocab = 258;

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw InternalError("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

struct ManifestEntry {
  std::string path;
  std::uint64_t bytes = 0;
  std::string sha256;

  bool operator==(const ManifestEntry&) const = default;
};

struct TokenizedCorpus {
  std::vector<std::uint16_t> tokens;
  std::vector<std::uint64_t> doc_offsets;  // n_docs + 1 entries into tokens
  std::vector<ManifestEntry> manifest;

  std::size_t documents() const { return doc_offsets.empty() ? 0 : doc_offsets.size() - 1; }

  std::span<const std::uint16_t> document(std::size_t i) const {
    return {tokens.data() + doc_offsets[i], static_cast<std::size_t>(doc_offsets[i + 1] - doc_offsets[i])};
  }

  void add_document(std::string_view text) {
    if (doc_offsets.empty()) doc_offsets.push_back(0);
    tokens.push_back(kBos);
    for (unsigned char c : text) tokens.push_back(c);
    tokens.push_back(kEos);
    doc_offsets.push_back(tokens.size());
  }

  bool operator==(const TokenizedCorpus&) const = default;
};

struct IngestOptions {
  /// When non-empty, each file is split into documents at this separator.
  std::string document_separator;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw DataError("error reading " + p.string());
  return os.str();
}

inline TokenizedCorpus ingest(const std::vector<std::filesystem::path>& paths, const IngestOptions& opt = {}) {
  TokenizedCorpus c;
  for (const auto& p : paths) {
    const std::string text = read_file(p);
    c.manifest.push_back({p.string(), text.size(), sha256_hex(text)});
    if (opt.document_separator.empty()) {
      if (!text.empty()) c.add_document(text);
      continue;
    }
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t pos = text.find(opt.document_separator, start);
      if (pos == std::string::npos) pos = text.size();
      if (pos > start) c.add_document(std::string_view(text).substr(start, pos - start));
      start = pos + opt.document_separator.size();
    }
  }
  if (c.documents() == 0) throw DataError("ingest: corpus is empty");
  return c;
}

inline std::string manifest_text(const TokenizedCorpus& c) {
  std::ostringstream os;
  for (const auto& e : c.manifest) os << e.path << '\t' << e.bytes << '\t' << e.sha256 << '\n';
  return os.str();
}

inline std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> out;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw DataError("manifest line " + std::to_string(line_no) + ": expected 3 fields");
    ManifestEntry e{line.substr(0, a), 0, line.substr(b + 1)};
    try {
      e.bytes = std::stoull(line.substr(a + 1, b - a - 1));
    } catch (const std::exception&) {
      throw DataError("manifest line " + std::to_string(line_no) + ": bad byte count");
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Checks every expected entry against the ingested files, matched by file
/// name so a manifest stays valid when the bundle lives elsewhere.
inline void verify_manifest(const TokenizedCorpus& c, const std::vector<ManifestEntry>& expected) {
  std::map<std::string, const ManifestEntry*> have;
  for (const auto& e : c.manifest) have[std::filesystem::path(e.path).filename().string()] = &e;
  std::string problems;
  for (const auto& e : expected) {
    const std::string name = std::filesystem::path(e.path).filename().string();
    const auto it = have.find(name);
    if (it == have.end()) {
      problems += " missing " + name + ";";
    } else if (it->second->bytes != e.bytes || it->second->sha256 != e.sha256) {
      problems += " " + name + " differs;";
    }
  }
  if (!problems.empty()) throw DataError("manifest check failed:" + problems);
}

// ---------------------------------------------------------------------------
// Flat binary cache: magic, version, counts, offsets, little-endian u16 ids.

inline constexpr char kCorpusMagic[8] = {'I', 'D', 'P', 'C', 'O', 'R', 'P', '1'};
inline constexpr std::uint32_t kCorpusVersion = 1;

inline void save_corpus(const TokenizedCorpus& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  auto put64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  out.write(kCorpusMagic, 8);
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((kCorpusVersion >> (8 * i)) & 0xff));
  put64(c.tokens.size());
  put64(c.documents());
  for (auto o : c.doc_offsets) put64(o);
  for (auto t : c.tokens) {
    out.put(static_cast<char>(t & 0xff));
    out.put(static_cast<char>(t >> 8));
  }
  if (!out) throw DataError("error writing " + path.string());
}

inline TokenizedCorpus load_corpus(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > data.size()) throw FormatError("corpus cache truncated: " + path.string());
  };
  auto get64 = [&] {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 8;
    return v;
  };
  need(12);
  if (std::memcmp(data.data(), kCorpusMagic, 8) != 0) throw FormatError("not a corpus cache: " + path.string());
  pos = 8;
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= std::uint32_t(static_cast<unsigned char>(data[pos + i])) << (8 * i);
  pos += 4;
  if (version != kCorpusVersion) throw FormatError("corpus cache version " + std::to_string(version));
  TokenizedCorpus c;
  const std::uint64_t n_tokens = get64();
  const std::uint64_t n_docs = get64();
  for (std::uint64_t i = 0; i <= n_docs; ++i) c.doc_offsets.push_back(get64());
  need(2 * n_tokens);
  c.tokens.resize(n_tokens);
  for (std::uint64_t i = 0; i < n_tokens; ++i) {
    c.tokens[i] = static_cast<std::uint16_t>(static_cast<unsigned char>(data[pos]) |
                                             (static_cast<unsigned char>(data[pos + 1]) << 8));
    pos += 2;
  }
  if (c.doc_offsets.back() != n_tokens) throw FormatError("corpus cache offsets inconsistent");
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic text. A Zipf-distributed lexicon of pronounceable words with a
// sparse preferred-successor table, so there is both spelling and word-order
// structure for a byte-level model to learn.

struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::size_t documents = 2000;
  std::size_t lexicon = 2000;
  std::size_t successors = 6;
  double follow_prob = 0.75;

  bool operator==(const SyntheticSpec&) const = default;
};

inline TokenizedCorpus synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.documents == 0 || spec.lexicon < 2) throw DataError("synthetic corpus: empty spec");
  Rng rng(derive_seed(spec.seed, "synthetic-corpus"));
  static constexpr std::string_view onsets[] = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p",
                                                "r", "s", "t", "v", "w", "z", "st", "tr", "ch", "sh", "br", "pl"};
  static constexpr std::string_view vowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  static constexpr std::string_view codas[] = {"", "", "", "n", "r", "s", "t", "l", "nd", "ck"};
  auto pick = [&rng](const auto& arr) { return arr[rng.below(std::size(arr))]; };

  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  while (words.size() < spec.lexicon) {
    std::string w;
    const std::size_t syllables = 1 + rng.below(3);
    for (std::size_t s = 0; s < syllables; ++s) {
      w += pick(onsets);
      w += pick(vowels);
      w += pick(codas);
    }
    if (!seen.insert(w).second) continue;
    words.push_back(std::move(w));
  }

  std::vector<double> cdf(words.size());
  double acc = 0.0;
  for (std::size_t r = 0; r < words.size(); ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), 1.1);
    cdf[r] = acc;
  }
  auto zipf = [&] {
    const double u = rng.uniform() * acc;
    return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
  };
  std::vector<std::vector<std::size_t>> next(words.size());
  for (auto& n : next)
    for (std::size_t k = 0; k < spec.successors; ++k) n.push_back(std::min(zipf(), words.size() - 1));

  TokenizedCorpus c;
  for (std::size_t d = 0; d < spec.documents; ++d) {
    std::string doc;
    const std::size_t sentences = 3 + rng.below(8);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t len = 4 + rng.below(9);
      std::size_t w = std::min(zipf(), words.size() - 1);
      for (std::size_t i = 0; i < len; ++i) {
        std::string word = words[w];
        if (i == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
        doc += word;
        doc += (i + 1 == len) ? ". " : " ";
        w = rng.uniform() < spec.follow_prob ? next[w][rng.below(next[w].size())]
                                             : std::min(zipf(), words.size() - 1);
      }
    }
    doc.back() = '\n';
    c.add_document(doc);
  }
  c.manifest.push_back({"synthetic:seed=" + std::to_string(spec.seed), c.tokens.size(), ""});
  return c;
}

// ---------------------------------------------------------------------------
// Splitting and batching

struct CorpusSplit {
  std::vector<std::size_t> train_docs;
  std::vector<std::size_t> heldout_docs;
  std::vector<std::uint16_t> train_tokens;
  std::vector<std::uint16_t> heldout_tokens;
};

/// Document-level split; at least one document on each side.
inline CorpusSplit split_corpus(const TokenizedCorpus& c, double heldout_fraction, std::uint64_t seed) {
  const std::size_t n = c.documents();
  if (n < 2) throw DataError("split: need at least two documents, have " + std::to_string(n));
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw ConfigError("split: heldout fraction in (0,1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  std::size_t held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(n)));
  held = std::clamp<std::size_t>(held, 1, n - 1);
  CorpusSplit s;
  s.heldout_docs.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  s.train_docs.assign(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(s.heldout_docs.begin(), s.heldout_docs.end());
  std::sort(s.train_docs.begin(), s.train_docs.end());
  for (auto d : s.train_docs) {
    auto doc = c.document(d);
    s.train_tokens.insert(s.train_tokens.end(), doc.begin(), doc.end());
  }
  for (auto d : s.heldout_docs) {
    auto doc = c.document(d);
    s.heldout_tokens.insert(s.heldout_tokens.end(), doc.begin(), doc.end());
  }
  return s;
}

/// Builds a batch from (seq_len + 1)-token windows starting at `starts`.
inline Batch make_batch(std::span<const std::uint16_t> stream, std::span<const std::size_t> starts,
                        std::size_t seq_len) {
  Batch b;
  b.batch = starts.size();
  b.length = seq_len;
  b.inputs.reserve(b.tokens());
  b.targets.reserve(b.tokens());
  for (std::size_t s : starts) {
    for (std::size_t i = 0; i < seq_len; ++i) {
      b.inputs.push_back(stream[s + i]);
      b.targets.push_back(stream[s + i + 1]);
    }
  }
  return b;
}

/// Deterministic batch stream: batch k is a pure function of (seed, k), so a
/// resumed run only needs the step counter.
class BatchStream {
 public:
  BatchStream(std::vector<std::uint16_t> tokens, std::size_t batch, std::size_t seq_len, std::uint64_t seed)
      : tokens_(std::move(tokens)), batch_(batch), seq_len_(seq_len), seed_(seed) {
    if (batch == 0 || seq_len == 0) throw ConfigError("batches: batch and seq_len must be positive");
    chunks_ = tokens_.size() / (seq_len + 1);
    if (tokens_.size() < batch * seq_len || chunks_ < batch) {
      throw DataError("batches: training split has " + std::to_string(tokens_.size()) + " tokens, need at least " +
                      std::to_string(batch * (seq_len + 1)));
    }
  }

  std::size_t chunks() const { return chunks_; }
  std::size_t batch_size() const { return batch_; }
  std::size_t seq_len() const { return seq_len_; }
  std::span<const std::uint16_t> tokens() const { return tokens_; }

  /// Start offsets of the windows in batch k (0-based).
  std::vector<std::size_t> starts(std::uint64_t k) {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::uint64_t global = k * batch_ + i;
      const std::uint64_t epoch = global / chunks_;
      out.push_back(permutation(epoch)[global % chunks_] * (seq_len_ + 1));
    }
    return out;
  }

  Batch batch(std::uint64_t k) {
    const auto s = starts(k);
    return make_batch(tokens_, s, seq_len_);
  }

 private:
  const std::vector<std::size_t>& permutation(std::uint64_t epoch) {
    if (!perm_.empty() && perm_epoch_ == epoch) return perm_;
    perm_.resize(chunks_);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, "epoch-" + std::to_string(epoch)));
    rng.shuffle(perm_);
    perm_epoch_ = epoch;
    return perm_;
  }

  std::vector<std::uint16_t> tokens_;
  std::size_t batch_;
  std::size_t seq_len_;
  std::uint64_t seed_;
  std::size_t chunks_ = 0;
  std::vector<std::size_t> perm_;
  std::uint64_t perm_epoch_ = 0;
};

/// Non-overlapping (seq_len + 1)-token windows of a stream, at most `max_sequences`.
inline std::vector<Batch> sequential_batches(std::span<const std::uint16_t> stream, std::size_t seq_len,
                                             std::size_t batch, std::size_t max_sequences) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + seq_len + 1 <= stream.size() && starts.size() < max_sequences; s += seq_len + 1) {
    starts.push_back(s);
  }
  std::vector<Batch> out;
  for (std::size_t i = 0; i < starts.size(); i += batch) {
    const std::size_t n = std::min(batch, starts.size() - i);
    out.push_back(make_batch(stream, std::span<const std::size_t>(starts).subspan(i, n), seq_len));
  }
  return out;
}

}  // namespace ideaprune

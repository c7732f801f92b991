#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace melodi {

// Byte-level BPE vocabulary. Ids 0..255 are raw bytes, then pad, bos, eos,
// then one id per learned merge in merge order.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 256;
  static constexpr std::int32_t kBos = 257;
  static constexpr std::int32_t kEos = 258;
  static constexpr std::int32_t kFirstMerge = 259;

  Vocab();  // bytes and specials only

  std::size_t size() const { return tokens_.size(); }
  std::size_t merge_count() const { return merges_.size(); }
  const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }
  const std::string& token_bytes(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  static bool is_special(std::int32_t id) { return id >= kPad && id < kFirstMerge; }

  void add_merge(std::int32_t left, std::int32_t right);

  std::vector<std::int32_t> encode(std::string_view text) const;
  // Specials decode to nothing.
  std::string decode(std::span<const std::int32_t> ids) const;

  // Text file: a header line "melodi-bpe <size>", then one line per id with
  // the escaped token bytes; merge ids append "\t<left> <right>".
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  std::vector<std::int32_t> encode_word(std::string_view word) const;

  std::vector<std::string> tokens_;
  std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
  std::unordered_map<std::uint64_t, std::int32_t> merge_rank_;
};

// Lossless split into words: an optional leading space plus a run of
// letters (bytes >= 0x80 count as letters), a run of digits, or one other byte.
std::vector<std::string_view> split_words(std::string_view text);

// Greedy merges of the most frequent adjacent pair until `size` ids exist.
// Ties go to the smallest (left, right) pair.
Vocab build_vocab(const std::vector<std::string>& texts, std::size_t size);

std::string escape_bytes(std::string_view bytes);
std::string unescape_bytes(std::string_view text);

struct Document {
  std::string name;
  std::string text;
};

// Every *.txt file of `dir`, one document each, sorted by file name.
std::vector<Document> load_corpus(const std::string& dir);

struct EncodedDocument {
  std::string name;
  std::vector<std::int32_t> ids;  // bos, text, eos
};

std::vector<EncodedDocument> encode_corpus(const std::vector<Document>& docs, const Vocab& vocab);

std::vector<EncodedDocument> filter_min_length(std::vector<EncodedDocument> docs, std::size_t min_tokens);

inline constexpr std::int32_t kNoTarget = -1;

struct Segment {
  std::vector<std::int32_t> tokens;    // segment_len ids, pad-filled at the end
  std::vector<std::int32_t> targets;   // next token within the segment, kNoTarget otherwise
  std::vector<std::uint8_t> loss_mask; // 1 on real tokens, 0 on pads
  std::size_t doc = 0;
  std::size_t index_in_doc = 0;

  std::size_t scored() const;  // positions with a target
};

// Consecutive non-overlapping chunks; the last one is right-padded.
std::vector<Segment> segment_document(std::span<const std::int32_t> tokens, std::size_t segment_len,
                                      std::size_t window_len, std::size_t doc = 0);

std::vector<Segment> segment_corpus(const std::vector<EncodedDocument>& docs, std::size_t segment_len,
                                    std::size_t window_len);

struct WindowBatch {
  std::size_t rows = 0;
  std::size_t segment_len = 0;
  std::vector<std::int32_t> token_ids;  // rows x segment_len
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> doc_ids;

  std::span<const std::int32_t> row_tokens(std::size_t r) const;
  std::span<const std::int32_t> row_targets(std::size_t r) const;
  std::span<const std::uint8_t> row_mask(std::size_t r) const;
  std::size_t scored() const;
};

// Deterministic batch order: epoch e visits segments in a permutation keyed by
// seed + e. Training drops the incomplete final batch of an epoch.
class BatchStream {
 public:
  BatchStream(std::vector<Segment> segments, std::size_t batch_size, std::uint64_t seed, bool drop_last);

  std::size_t batches_per_epoch() const;
  std::size_t segment_count() const { return segments_.size(); }
  WindowBatch batch_for_step(std::size_t step) const;
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;

 private:
  std::vector<Segment> segments_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool drop_last_;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<std::size_t> cached_order_;
};

}  // namespace melodi

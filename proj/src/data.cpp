#include "melodi/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "melodi/rng.hpp"

namespace melodi {

namespace {

std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

// Replaces every occurrence of (a, b) in `symbols` with `merged`.
void apply_merge(std::vector<std::int32_t>& symbols, std::int32_t a, std::int32_t b, std::int32_t merged) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == a && symbols[i + 1] == b) {
      symbols[out++] = merged;
      ++i;
    } else {
      symbols[out++] = symbols[i];
    }
  }
  symbols.resize(out);
}

}  // namespace

Vocab::Vocab() {
  tokens_.reserve(kFirstMerge);
  for (int b = 0; b < 256; ++b) tokens_.emplace_back(1, static_cast<char>(b));
  tokens_.emplace_back();  // pad
  tokens_.emplace_back();  // bos
  tokens_.emplace_back();  // eos
}

void Vocab::add_merge(std::int32_t left, std::int32_t right) {
  const auto n = static_cast<std::int32_t>(tokens_.size());
  if (left < 0 || right < 0 || left >= n || right >= n || is_special(left) || is_special(right)) {
    throw std::invalid_argument("bad merge pair " + std::to_string(left) + " " + std::to_string(right));
  }
  if (!merge_rank_.emplace(pair_key(left, right), static_cast<std::int32_t>(merges_.size())).second) {
    throw std::invalid_argument("duplicate merge " + std::to_string(left) + " " + std::to_string(right));
  }
  merges_.emplace_back(left, right);
  tokens_.push_back(tokens_[left] + tokens_[right]);
}

std::vector<std::int32_t> Vocab::encode_word(std::string_view word) const {
  std::vector<std::int32_t> symbols(word.size());
  for (std::size_t i = 0; i < word.size(); ++i) symbols[i] = static_cast<unsigned char>(word[i]);
  while (symbols.size() > 1) {
    std::int32_t best_rank = -1;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto [a, b] = merges_[best_rank];
    apply_merge(symbols, a, b, kFirstMerge + best_rank);
  }
  return symbols;
}

std::vector<std::int32_t> Vocab::encode(std::string_view text) const {
  std::unordered_map<std::string_view, std::vector<std::int32_t>> cache;
  std::vector<std::int32_t> ids;
  ids.reserve(text.size() / 3);
  for (std::string_view word : split_words(text)) {
    auto it = cache.find(word);
    if (it == cache.end()) it = cache.emplace(word, encode_word(word)).first;
    ids.insert(ids.end(), it->second.begin(), it->second.end());
  }
  return ids;
}

std::string Vocab::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::int32_t id : ids) out += token_bytes(id);
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocab " + path);
  out << "melodi-bpe " << size() << "\n";
  for (std::size_t id = 0; id < size(); ++id) {
    const auto i = static_cast<std::int32_t>(id);
    if (i == kPad) out << "<pad>\n";
    else if (i == kBos) out << "<bos>\n";
    else if (i == kEos) out << "<eos>\n";
    else if (i < kPad) out << escape_bytes(tokens_[id]) << "\n";
    else {
      const auto [a, b] = merges_[id - kFirstMerge];
      out << escape_bytes(tokens_[id]) << "\t" << a << " " << b << "\n";
    }
  }
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocab " + path);
  std::string line;
  std::getline(in, line);
  std::istringstream header(line);
  std::string magic;
  std::size_t size = 0;
  if (!(header >> magic >> size) || magic != "melodi-bpe") throw std::runtime_error("bad vocab header in " + path);
  Vocab vocab;
  for (std::size_t id = 0; id < size; ++id) {
    if (!std::getline(in, line)) throw std::runtime_error("truncated vocab " + path);
    if (id < static_cast<std::size_t>(kFirstMerge)) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("vocab line " + std::to_string(id + 2) + " lacks a merge");
    std::istringstream pair(line.substr(tab + 1));
    std::int32_t a = 0, b = 0;
    if (!(pair >> a >> b)) throw std::runtime_error("vocab line " + std::to_string(id + 2) + " has a bad merge");
    vocab.add_merge(a, b);
    if (vocab.tokens_.back() != unescape_bytes(line.substr(0, tab))) {
      throw std::runtime_error("vocab line " + std::to_string(id + 2) + " disagrees with its merge");
    }
  }
  return vocab;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const std::size_t start = i;
    std::size_t j = i;
    if (text[j] == ' ' && j + 1 < n && is_letter(static_cast<unsigned char>(text[j + 1]))) ++j;
    const auto c = static_cast<unsigned char>(text[j]);
    if (is_letter(c)) {
      while (j < n && is_letter(static_cast<unsigned char>(text[j]))) ++j;
    } else if (is_digit(c)) {
      while (j < n && is_digit(static_cast<unsigned char>(text[j]))) ++j;
    } else {
      ++j;
    }
    words.push_back(text.substr(start, j - start));
    i = j;
  }
  return words;
}

Vocab build_vocab(const std::vector<std::string>& texts, std::size_t size) {
  if (size < static_cast<std::size_t>(Vocab::kFirstMerge)) {
    throw std::invalid_argument("vocab size " + std::to_string(size) + " is below 259");
  }
  std::unordered_map<std::string_view, std::uint64_t> counts;
  for (const std::string& t : texts) {
    for (std::string_view w : split_words(t)) ++counts[w];
  }
  struct Word {
    std::vector<std::int32_t> symbols;
    std::uint64_t count;
  };
  std::vector<std::pair<std::string_view, std::uint64_t>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<Word> words;
  words.reserve(sorted.size());
  for (const auto& [w, c] : sorted) {
    if (w.size() < 2) continue;
    Word word{{}, c};
    for (char ch : w) word.symbols.push_back(static_cast<unsigned char>(ch));
    words.push_back(std::move(word));
  }

  Vocab vocab;
  std::unordered_map<std::uint64_t, std::uint64_t> pairs;
  while (vocab.size() < size) {
    pairs.clear();
    for (const Word& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pairs[pair_key(w.symbols[i], w.symbols[i + 1])] += w.count;
    }
    if (pairs.empty()) {
      throw std::invalid_argument("corpus supports only " + std::to_string(vocab.size()) + " ids, " +
                                  std::to_string(size) + " requested");
    }
    std::uint64_t best_key = 0, best_count = 0;
    for (const auto& [key, count] : pairs) {
      if (count > best_count || (count == best_count && key < best_key)) {
        best_key = key;
        best_count = count;
      }
    }
    const auto a = static_cast<std::int32_t>(best_key >> 32);
    const auto b = static_cast<std::int32_t>(best_key & 0xffffffffu);
    const auto merged = static_cast<std::int32_t>(vocab.size());
    vocab.add_merge(a, b);
    for (Word& w : words) apply_merge(w.symbols, a, b, merged);
    std::erase_if(words, [](const Word& w) { return w.symbols.size() < 2; });
  }
  return vocab;
}

std::string escape_bytes(std::string_view bytes) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (char ch : bytes) {
    const auto c = static_cast<unsigned char>(ch);
    if (c > 0x20 && c < 0x7f && c != '\\') {
      out += ch;
    } else {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

std::string unescape_bytes(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\\' && i + 3 < text.size() && text[i + 1] == 'x') {
      out += static_cast<char>(std::stoi(std::string(text.substr(i + 2, 2)), nullptr, 16));
      i += 3;
    } else {
      out += text[i];
    }
  }
  return out;
}

std::vector<Document> load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("corpus directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  for (const fs::path& p : files) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    docs.push_back({p.stem().string(), ss.str()});
  }
  return docs;
}

std::vector<EncodedDocument> encode_corpus(const std::vector<Document>& docs, const Vocab& vocab) {
  std::vector<EncodedDocument> out;
  out.reserve(docs.size());
  for (const Document& d : docs) {
    EncodedDocument e{d.name, {Vocab::kBos}};
    const auto ids = vocab.encode(d.text);
    e.ids.insert(e.ids.end(), ids.begin(), ids.end());
    e.ids.push_back(Vocab::kEos);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<EncodedDocument> filter_min_length(std::vector<EncodedDocument> docs, std::size_t min_tokens) {
  std::erase_if(docs, [&](const EncodedDocument& d) { return d.ids.size() < min_tokens; });
  return docs;
}

std::size_t Segment::scored() const {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](std::int32_t t) { return t != kNoTarget; }));
}

std::vector<Segment> segment_document(std::span<const std::int32_t> tokens, std::size_t segment_len,
                                      std::size_t window_len, std::size_t doc) {
  if (window_len == 0 || segment_len == 0 || segment_len % window_len != 0) {
    throw std::invalid_argument("segment_len " + std::to_string(segment_len) + " is not a multiple of W=" +
                                std::to_string(window_len));
  }
  std::vector<Segment> segments;
  for (std::size_t start = 0, k = 0; start < tokens.size(); start += segment_len, ++k) {
    const std::size_t real = std::min(segment_len, tokens.size() - start);
    Segment s;
    s.doc = doc;
    s.index_in_doc = k;
    s.tokens.assign(segment_len, Vocab::kPad);
    s.targets.assign(segment_len, kNoTarget);
    s.loss_mask.assign(segment_len, 0);
    for (std::size_t i = 0; i < real; ++i) {
      s.tokens[i] = tokens[start + i];
      s.loss_mask[i] = 1;
      if (i + 1 < real) s.targets[i] = tokens[start + i + 1];
    }
    segments.push_back(std::move(s));
  }
  return segments;
}

std::vector<Segment> segment_corpus(const std::vector<EncodedDocument>& docs, std::size_t segment_len,
                                    std::size_t window_len) {
  std::vector<Segment> out;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    auto segs = segment_document(docs[d].ids, segment_len, window_len, d);
    std::move(segs.begin(), segs.end(), std::back_inserter(out));
  }
  return out;
}

std::span<const std::int32_t> WindowBatch::row_tokens(std::size_t r) const {
  return std::span(token_ids).subspan(r * segment_len, segment_len);
}
std::span<const std::int32_t> WindowBatch::row_targets(std::size_t r) const {
  return std::span(targets).subspan(r * segment_len, segment_len);
}
std::span<const std::uint8_t> WindowBatch::row_mask(std::size_t r) const {
  return std::span(loss_mask).subspan(r * segment_len, segment_len);
}
std::size_t WindowBatch::scored() const {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](std::int32_t t) { return t != kNoTarget; }));
}

BatchStream::BatchStream(std::vector<Segment> segments, std::size_t batch_size, std::uint64_t seed, bool drop_last)
    : segments_(std::move(segments)), batch_size_(batch_size), seed_(seed), drop_last_(drop_last) {
  if (batch_size_ == 0) throw std::invalid_argument("batch_size must be positive");
  if (batches_per_epoch() == 0) {
    throw std::invalid_argument(std::to_string(segments_.size()) + " segments cannot fill a batch of " +
                                std::to_string(batch_size_));
  }
}

std::size_t BatchStream::batches_per_epoch() const {
  return drop_last_ ? segments_.size() / batch_size_ : (segments_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchStream::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(segments_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 gen(stream_key({seed_, epoch}));
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[gen() % i]);
  return order;
}

WindowBatch BatchStream::batch_for_step(std::size_t step) const {
  const std::size_t per_epoch = batches_per_epoch();
  const std::size_t epoch = step / per_epoch;
  if (epoch != cached_epoch_) {
    cached_order_ = epoch_order(epoch);
    cached_epoch_ = epoch;
  }
  const std::size_t first = (step % per_epoch) * batch_size_;
  const std::size_t rows = std::min(batch_size_, segments_.size() - first);
  WindowBatch b;
  b.rows = rows;
  b.segment_len = segments_.front().tokens.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const Segment& s = segments_[cached_order_[first + r]];
    b.token_ids.insert(b.token_ids.end(), s.tokens.begin(), s.tokens.end());
    b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
    b.loss_mask.insert(b.loss_mask.end(), s.loss_mask.begin(), s.loss_mask.end());
    b.doc_ids.push_back(s.doc);
  }
  return b;
}

}  // namespace melodi

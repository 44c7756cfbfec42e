#pragma once

// Character inventory and tokenization. The standard charset has 100
// classes: 10 digits, 52 case-sensitive letters, 35 punctuation marks, and
// START/END/PAD. Ground-truth order j=1 reverses the interior characters.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ptie/common.hpp"

namespace ptie {

class Charset {
 public:
  Charset() = default;

  // Printable ASCII has only 32 non-alphanumeric marks (space excluded), so
  // three Latin-1 marks top the inventory up to the 35-punctuation layout.
  static Charset standard100() {
    std::string syms;
    for (char c = '0'; c <= '9'; ++c) syms.push_back(c);
    for (char c = 'A'; c <= 'Z'; ++c) syms.push_back(c);
    for (char c = 'a'; c <= 'z'; ++c) syms.push_back(c);
    for (int c = 33; c <= 47; ++c) syms.push_back(static_cast<char>(c));
    for (int c = 58; c <= 64; ++c) syms.push_back(static_cast<char>(c));
    for (int c = 91; c <= 96; ++c) syms.push_back(static_cast<char>(c));
    for (int c = 123; c <= 126; ++c) syms.push_back(static_cast<char>(c));
    syms.push_back(static_cast<char>(0xA1));
    syms.push_back(static_cast<char>(0xA3));
    syms.push_back(static_cast<char>(0xBF));
    return from_symbols(syms);
  }

  static Charset from_symbols(const std::string& printable) {
    Charset cs;
    cs.symbols_.assign(printable.begin(), printable.end());
    cs.index_.fill(-1);
    for (size_t i = 0; i < cs.symbols_.size(); ++i) {
      const unsigned char c = static_cast<unsigned char>(cs.symbols_[i]);
      if (cs.index_[c] != -1)
        throw ConfigError("charset: duplicate symbol byte " + std::to_string(c));
      cs.index_[c] = static_cast<int>(i);
    }
    return cs;
  }

  int cls() const { return static_cast<int>(symbols_.size()) + 3; }
  int start_id() const { return static_cast<int>(symbols_.size()); }
  int end_id() const { return static_cast<int>(symbols_.size()) + 1; }
  int pad_id() const { return static_cast<int>(symbols_.size()) + 2; }
  int printable_count() const { return static_cast<int>(symbols_.size()); }

  bool contains(char c) const { return index_[static_cast<unsigned char>(c)] >= 0; }

  int id_of(char c) const {
    const int id = index_[static_cast<unsigned char>(c)];
    if (id < 0)
      throw VocabError("charset: unknown character (byte " +
                       std::to_string(static_cast<unsigned char>(c)) + ")");
    return id;
  }

  bool is_printable_id(int64_t id) const {
    return id >= 0 && id < static_cast<int64_t>(symbols_.size());
  }

  char symbol(int64_t id) const {
    if (!is_printable_id(id)) throw VocabError("charset: id out of printable range");
    return symbols_[static_cast<size_t>(id)];
  }

  // Byte values in index order; START/END/PAD are implied at the end.
  std::vector<int> serialized() const {
    std::vector<int> out;
    out.reserve(symbols_.size());
    for (char c : symbols_) out.push_back(static_cast<unsigned char>(c));
    return out;
  }

  static Charset deserialize(const std::vector<int>& bytes) {
    std::string syms;
    for (int b : bytes) {
      if (b < 0 || b > 255) throw ConfigError("charset: byte out of range");
      syms.push_back(static_cast<char>(b));
    }
    return from_symbols(syms);
  }

  bool operator==(const Charset& other) const { return symbols_ == other.symbols_; }

 private:
  std::vector<char> symbols_;
  std::array<int, 256> index_{};
};

struct TokenSeq {
  std::vector<int64_t> ids;  // START ... END PAD*, padded to max_len
  int order = 0;             // j
};

inline TokenSeq encode(const Charset& cs, const std::string& text, int order,
                       int64_t max_len) {
  if (order != 0 && order != 1) throw ConfigError("encode: order must be 0 or 1");
  if (static_cast<int64_t>(text.size()) > max_len - 2)
    throw DataError("encode: text of length " + std::to_string(text.size()) +
                    " exceeds max_len-2 = " + std::to_string(max_len - 2));
  TokenSeq seq;
  seq.order = order;
  seq.ids.reserve(max_len);
  seq.ids.push_back(cs.start_id());
  if (order == 0) {
    for (char c : text) seq.ids.push_back(cs.id_of(c));
  } else {
    for (auto it = text.rbegin(); it != text.rend(); ++it) seq.ids.push_back(cs.id_of(*it));
  }
  seq.ids.push_back(cs.end_id());
  while (static_cast<int64_t>(seq.ids.size()) < max_len) seq.ids.push_back(cs.pad_id());
  return seq;
}

// Characters between START and the first END; PAD stripped.
inline std::string decode_tokens(const Charset& cs, const std::vector<int64_t>& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    const int64_t id = ids[i];
    if (i == 0 && id == cs.start_id()) continue;
    if (id == cs.end_id()) break;
    if (id == cs.pad_id()) continue;
    if (cs.is_printable_id(id)) out.push_back(cs.symbol(id));
  }
  return out;
}

// Case-insensitive alphanumeric view used for word-accuracy comparisons.
inline std::string normalize_eval(const std::string& text) {
  std::string out;
  for (char c : text) {
    if (c >= 'a' && c <= 'z') out.push_back(c);
    else if (c >= 'A' && c <= 'Z') out.push_back(static_cast<char>(c - 'A' + 'a'));
    else if (c >= '0' && c <= '9') out.push_back(c);
  }
  return out;
}

}  // namespace ptie

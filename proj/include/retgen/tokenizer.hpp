#pragma once

#include <cctype>
#include <string>
#include <vector>

#include "retgen/errors.hpp"

namespace retgen {

// Lowercased whitespace tokenization; the one normalization used for both
// model input and token-level F1.
inline std::vector<std::string> normalize_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Closed word-level vocabulary: six reserved specials, then words "w0",
// "w1", ... up to the configured size. Any other surface form maps to the
// unknown token.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;
  static constexpr int kQueryMarker = 3;
  static constexpr int kResponseMarker = 4;
  static constexpr int kPassageMarker = 5;
  static constexpr int kNumSpecials = 6;

  explicit Tokenizer(int vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size_ <= kNumSpecials)
      throw ArgumentError("vocab_size must exceed " + std::to_string(kNumSpecials) +
                          " reserved specials, got " + std::to_string(vocab_size_));
  }

  int vocab_size() const { return vocab_size_; }
  int word_count() const { return vocab_size_ - kNumSpecials; }

  static std::string word(int index) { return "w" + std::to_string(index); }
  int word_id(int index) const {
    if (index < 0 || index >= word_count())
      throw IndexError("word index " + std::to_string(index) + " outside closed vocabulary");
    return kNumSpecials + index;
  }

  int token_to_id(const std::string& tok) const {
    if (tok == "<pad>") return kPad;
    if (tok == "<unk>") return kUnk;
    if (tok == "</s>") return kEos;
    if (tok == "<q>") return kQueryMarker;
    if (tok == "<r>") return kResponseMarker;
    if (tok == "<p>") return kPassageMarker;
    if (tok.size() >= 2 && tok[0] == 'w') {
      int value = 0;
      bool digits = true;
      for (size_t i = 1; i < tok.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(tok[i]))) {
          digits = false;
          break;
        }
        value = value * 10 + (tok[i] - '0');
        if (value >= vocab_size_) break;  // guard overflow on absurd inputs
      }
      if (digits && value < word_count() && tok == word(value)) return kNumSpecials + value;
    }
    return kUnk;
  }

  std::string id_to_token(int id) const {
    switch (id) {
      case kPad: return "<pad>";
      case kUnk: return "<unk>";
      case kEos: return "</s>";
      case kQueryMarker: return "<q>";
      case kResponseMarker: return "<r>";
      case kPassageMarker: return "<p>";
      default: break;
    }
    if (id < 0 || id >= vocab_size_)
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return word(id - kNumSpecials);
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const std::string& tok : normalize_tokens(text)) ids.push_back(token_to_id(tok));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out.push_back(' ');
      out += id_to_token(ids[i]);
    }
    return out;
  }

 private:
  int vocab_size_;
};

}  // namespace retgen

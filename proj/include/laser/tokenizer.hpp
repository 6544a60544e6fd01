#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace laser {

// Word-level tokenizer. Text is cut into pieces: a run of word characters (ASCII
// alphanumerics and any non-ASCII byte) or a single other character, each carrying
// the single space that precedes it. Concatenating the pieces gives back the text,
// so detokenize(tokenize(s)) == s whenever every piece is in the vocabulary.
class WordTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kYes = 2;
  static constexpr int kNo = 3;

  WordTokenizer() = default;
  // Vocabulary = reserved tokens + every distinct piece in `corpus`, sorted.
  static WordTokenizer from_corpus(const std::vector<std::string>& corpus);
  // Rebuilds from a stored piece list (index = token id).
  static WordTokenizer from_pieces(std::vector<std::string> pieces);

  static std::vector<std::string> split(std::string_view text);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;
  int size() const { return static_cast<int>(pieces_.size()); }
  const std::vector<std::string>& pieces() const { return pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace laser

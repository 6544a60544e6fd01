#include "laser/tokenizer.hpp"

#include "laser/error.hpp"

#include <set>

namespace laser {

namespace {

bool is_word_char(char c) {
  auto u = static_cast<unsigned char>(c);
  return u >= 0x80 || (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z') || (u >= 'A' && u <= 'Z');
}

const char* const kReserved[] = {"<pad>", "<unk>", "Yes", "No"};

}  // namespace

std::vector<std::string> WordTokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    size_t start = i;
    if (text[i] == ' ') {
      if (i + 1 >= text.size() || text[i + 1] == ' ') {
        out.emplace_back(" ");
        ++i;
        continue;
      }
      ++i;  // the space belongs to the next piece
    }
    if (is_word_char(text[i])) {
      while (i < text.size() && is_word_char(text[i])) ++i;
    } else {
      ++i;
    }
    out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

WordTokenizer WordTokenizer::from_corpus(const std::vector<std::string>& corpus) {
  std::set<std::string> distinct;
  for (const auto& text : corpus) {
    for (auto& p : split(text)) distinct.insert(std::move(p));
  }
  if (distinct.empty()) throw InvalidArgument("cannot build a vocabulary from an empty corpus");
  std::vector<std::string> pieces(std::begin(kReserved), std::end(kReserved));
  for (const auto& p : distinct) {
    if (p != "Yes" && p != "No") pieces.push_back(p);
  }
  return from_pieces(std::move(pieces));
}

WordTokenizer WordTokenizer::from_pieces(std::vector<std::string> pieces) {
  if (pieces.size() < 4 || pieces[kYes] != "Yes" || pieces[kNo] != "No") {
    throw FormatError("tokenizer piece list lacks the reserved tokens");
  }
  WordTokenizer t;
  t.pieces_ = std::move(pieces);
  for (size_t i = 0; i < t.pieces_.size(); ++i) {
    if (i == kPad || i == kUnk) continue;
    t.ids_.emplace(t.pieces_[i], static_cast<int>(i));
  }
  return t;
}

std::vector<int> WordTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& p : split(text)) {
    auto it = ids_.find(p);
    ids.push_back(it == ids_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string WordTokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw InvalidArgument("token id out of range");
    if (id == kPad) continue;
    out += pieces_[static_cast<size_t>(id)];
  }
  return out;
}

}  // namespace laser

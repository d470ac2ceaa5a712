#include "iir/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "iir/error.hpp"
#include "iir/grammar.hpp"

namespace iir {

std::string make_caption(int color, Shape shape, Texture texture) {
  require(color >= 0 && color < static_cast<int>(kShapeColors.size()), "color index out of range");
  std::string out = "a ";
  out += kShapeColors[color].name;
  out += ' ';
  out += kShapeNames[static_cast<int>(shape)];
  out += " on ";
  out += kTextureNames[static_cast<int>(texture)];
  out += " background";
  return out;
}

std::optional<int> color_index(std::string_view name) {
  for (std::size_t i = 0; i < kShapeColors.size(); ++i) {
    if (kShapeColors[i].name == name) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::optional<Shape> shape_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i) {
    if (kShapeNames[i] == name) return static_cast<Shape>(i);
  }
  return std::nullopt;
}

std::optional<Texture> texture_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kTextureNames.size(); ++i) {
    if (kTextureNames[i] == name) return static_cast<Texture>(i);
  }
  return std::nullopt;
}

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<null>", "a", "on", "background"};
  for (const auto& c : kShapeColors) words_.emplace_back(c.name);
  for (auto s : kShapeNames) words_.emplace_back(s);
  for (auto t : kTextureNames) words_.emplace_back(t);
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = std::find(words_.begin() + 2, words_.end(), word);
  if (it == words_.end()) throw ValidationError("word '" + std::string(word) + "' is not in the vocabulary");
  return static_cast<int>(it - words_.begin());
}

const std::string& Vocabulary::word(int id) const {
  require(id >= 0 && id < size(), "token id " + std::to_string(id) + " out of vocabulary");
  return words_[id];
}

Prompt tokenize(std::string_view caption, int max_tokens) {
  Prompt p;
  p.raw = std::string(caption);
  std::string lowered(caption);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream words(lowered);
  std::string w;
  while (words >> w) p.tokens.push_back(Vocabulary::standard().id(w));
  require(static_cast<int>(p.tokens.size()) <= max_tokens,
          "prompt has " + std::to_string(p.tokens.size()) + " tokens, limit is " + std::to_string(max_tokens));
  return p;
}

Prompt null_prompt() { return Prompt{}; }

}  // namespace iir

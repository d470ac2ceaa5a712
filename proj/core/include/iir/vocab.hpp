#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace iir {

inline constexpr int kPadToken = 0;
inline constexpr int kNullToken = 1;
inline constexpr int kDefaultMaxTokens = 16;

// Closed vocabulary covering the caption grammar.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(words_.size()); }
  // Throws ValidationError for out-of-vocabulary words.
  int id(std::string_view word) const;
  const std::string& word(int id) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
};

// Tokenised caption. An empty token list is the NULL (unconditional) prompt.
struct Prompt {
  std::string raw;
  std::vector<int> tokens;

  bool is_null() const { return tokens.empty(); }
  bool operator==(const Prompt&) const = default;
};

Prompt tokenize(std::string_view caption, int max_tokens = kDefaultMaxTokens);
Prompt null_prompt();

}  // namespace iir

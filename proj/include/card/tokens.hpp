#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace card {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Reserved ids. ARROW separates a history record's input from its output,
/// RECORD_SEP terminates a serialized history record.
namespace special {
inline constexpr TokenId PAD = 0;
inline constexpr TokenId BOS = 1;
inline constexpr TokenId EOS = 2;
inline constexpr TokenId SEP = 3;
inline constexpr TokenId ARROW = 4;
inline constexpr TokenId RECORD_SEP = 5;
inline constexpr int COUNT = 6;
}  // namespace special

inline bool is_special(TokenId t) { return t >= 0 && t < special::COUNT; }

/// Closed vocabulary: specials, then content tokens, then style tokens.
class Vocabulary {
public:
    Vocabulary() = default;

    /// Builds the fixed word-like vocabulary of the given size (>= 32).
    static Vocabulary make(int size);
    /// Restores a vocabulary from its token strings (specials first).
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& str(TokenId t) const { return tokens_.at(static_cast<std::size_t>(t)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    TokenId content_begin() const { return special::COUNT; }
    TokenId content_end() const { return style_begin_; }
    TokenId style_begin() const { return style_begin_; }
    TokenId style_end() const { return static_cast<TokenId>(tokens_.size()); }
    bool contains(TokenId t) const { return t >= 0 && t < size(); }

    std::string render(const TokenSeq& seq) const;

private:
    std::vector<std::string> tokens_;
    TokenId style_begin_ = special::COUNT;
};

}  // namespace card

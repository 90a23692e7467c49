#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace perk {

// A token sequence with a loss mask; mask is true on the positions whose
// prediction contributes to the reasoning loss (answer tokens).
struct TokenSeq {
    std::vector<std::int32_t> ids;
    std::vector<std::uint8_t> loss_mask;

    std::size_t size() const { return ids.size(); }
};

// Word-level vocabulary: words stay whole, numbers are tokenized digit by
// digit, punctuation marks are single-character tokens. Ids are line numbers
// in the saved vocabulary file.
class Vocab {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kEos = 1;
    static constexpr std::int32_t kSep = 2;
    static constexpr std::int32_t kQuery = 3;

    Vocab() = default;

    // Deterministic construction: specials, digits, punctuation, then the
    // sorted unique word list.
    static Vocab build(std::vector<std::string> words);

    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()); }
    bool contains(const std::string& tok) const { return index_.count(tok) > 0; }
    std::int32_t id(const std::string& tok) const;
    const std::string& token(std::int32_t id) const;

    std::vector<std::int32_t> encode(const std::string& text) const;
    std::string decode(const std::vector<std::int32_t>& ids, bool skip_special = true) const;

    // Canonical form used for exact-match scoring: retokenize and join with
    // single spaces (so digit grouping and spacing differences vanish).
    static std::string normalize(const std::string& text);

    // Splits text into word / digit / punctuation tokens.
    static std::vector<std::string> split_text(const std::string& text);

    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;

    void rebuild_index();
};

}  // namespace perk

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace idgenrec {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr TokenId kNumSpecials = 3;

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes its own token, digit and letter runs stay whole.
std::vector<std::string> split_words(std::string_view text);

/// Word-level vocabulary. Ids 0..2 are PAD, EOS, UNK; the remaining ids are
/// assigned by descending frequency with lexicographic tie-break.
class Vocabulary {
public:
    Vocabulary();

    static Vocabulary build(std::span<const std::string> texts, int min_freq = 2, int max_size = 8192);
    static Vocabulary load(const std::filesystem::path& path);
    static Vocabulary from_tsv(std::string_view contents);

    void save(const std::filesystem::path& path) const;
    std::string to_tsv() const;

    TokenSequence encode(std::string_view text, std::size_t max_len) const;
    std::string decode(std::span<const TokenId> seq) const;

    TokenId id_of(std::string_view token) const;
    const std::string& token_of(TokenId id) const;
    bool contains(std::string_view token) const;

    std::size_t size() const noexcept { return id_to_token_.size(); }
    std::uint64_t hash() const;

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.id_to_token_ == b.id_to_token_; }

private:
    void push(std::string token);

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
};

} // namespace idgenrec

#include "idgenrec/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "idgenrec/error.hpp"
#include "idgenrec/hash.hpp"

namespace idgenrec {

namespace {

const char* const kSpecialNames[] = {"<pad>", "</s>", "<unk>"};

bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }
bool is_space(unsigned char c) { return c < 0x80 && std::isspace(c); }

} // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (is_space(c)) {
            flush();
        } else if (is_punct(c)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        }
    }
    flush();
    return out;
}

Vocabulary::Vocabulary() {
    for (const char* s : kSpecialNames) push(s);
}

void Vocabulary::push(std::string token) {
    token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, int min_freq, int max_size) {
    if (max_size < kNumSpecials) throw Error(ErrorKind::InvalidConfig, "max_size must leave room for specials");
    std::map<std::string, long> freq;
    for (const auto& t : texts)
        for (auto& w : split_words(t)) ++freq[std::move(w)];

    std::vector<std::pair<std::string, long>> kept;
    for (auto& [w, n] : freq)
        if (n >= min_freq) kept.emplace_back(w, n);
    // freq is ordered, so a stable sort by count keeps the lexicographic tie-break.
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    const auto cap = static_cast<std::size_t>(max_size - kNumSpecials);
    if (kept.size() > cap) kept.resize(cap);

    Vocabulary v;
    for (auto& [w, n] : kept)
        if (!v.contains(w)) v.push(w);
    return v;
}

TokenSequence Vocabulary::encode(std::string_view text, std::size_t max_len) const {
    TokenSequence out;
    for (const auto& w : split_words(text)) {
        if (out.size() >= max_len) break;
        out.push_back(id_of(w));
    }
    return out;
}

std::string Vocabulary::decode(std::span<const TokenId> seq) const {
    std::string out;
    for (TokenId id : seq) {
        if (id < 0 || static_cast<std::size_t>(id) >= size())
            throw Error(ErrorKind::InvalidTokenId, "token id " + std::to_string(id) + " outside vocabulary");
        if (id == kPad || id == kEos) continue;
        if (!out.empty()) out.push_back(' ');
        out += id_to_token_[static_cast<std::size_t>(id)];
    }
    return out;
}

TokenId Vocabulary::id_of(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size())
        throw Error(ErrorKind::InvalidTokenId, "token id " + std::to_string(id) + " outside vocabulary");
    return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return token_to_id_.count(std::string(token)) > 0; }

std::string Vocabulary::to_tsv() const {
    std::string out;
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
        out += id_to_token_[i];
        out += '\t';
        out += std::to_string(i);
        out += '\n';
    }
    return out;
}

std::uint64_t Vocabulary::hash() const {
    Fnv1a h;
    h.update(to_tsv());
    return h.digest();
}

Vocabulary Vocabulary::from_tsv(std::string_view contents) {
    Vocabulary v;
    v.token_to_id_.clear();
    v.id_to_token_.clear();
    std::istringstream in{std::string(contents)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab = line.rfind('\t');
        if (tab == std::string::npos)
            throw Error(ErrorKind::InvalidInput, "vocab line " + std::to_string(lineno) + " has no tab");
        auto token = line.substr(0, tab);
        auto id = std::stol(line.substr(tab + 1));
        if (id != static_cast<long>(v.id_to_token_.size()))
            throw Error(ErrorKind::InvalidInput, "vocab line " + std::to_string(lineno) + " id out of sequence");
        if (v.contains(token)) throw Error(ErrorKind::InvalidInput, "duplicate vocab token '" + token + "'");
        v.push(std::move(token));
    }
    for (TokenId i = 0; i < kNumSpecials; ++i)
        if (v.size() <= static_cast<std::size_t>(i) || v.id_to_token_[static_cast<std::size_t>(i)] != kSpecialNames[i])
            throw Error(ErrorKind::InvalidInput, "vocab must start with <pad>, </s>, <unk>");
    return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_tsv(ss.str());
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << to_tsv();
}

} // namespace idgenrec

#include "idgenrec/recommender.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "idgenrec/error.hpp"

namespace idgenrec {

PrefixTrie PrefixTrie::build(const IdRegistry& registry) {
    PrefixTrie trie;
    for (const auto& e : registry.entries()) trie.insert(e.id.tokens, e.item_key);
    return trie;
}

void PrefixTrie::insert(std::span<const TokenId> id_tokens, const std::string& item_key) {
    int node = 0;
    auto step = [&](TokenId t) {
        auto it = nodes_[static_cast<std::size_t>(node)].children.find(t);
        if (it != nodes_[static_cast<std::size_t>(node)].children.end()) {
            node = it->second;
            return;
        }
        const int child = static_cast<int>(nodes_.size());
        nodes_[static_cast<std::size_t>(node)].children.emplace(t, child);
        nodes_.emplace_back();
        node = child;
    };
    for (TokenId t : id_tokens) step(t);
    step(kEos);
    auto& leaf = nodes_[static_cast<std::size_t>(node)];
    if (leaf.terminal) throw Error(ErrorKind::DuplicateId, "items '" + leaf.item_key + "' and '" + item_key + "' share an ID");
    leaf.terminal = true;
    leaf.item_key = item_key;
    ++terminals_;
}

int PrefixTrie::walk(std::span<const TokenId> prefix) const {
    int node = 0;
    for (TokenId t : prefix) {
        const auto& ch = nodes_[static_cast<std::size_t>(node)].children;
        auto it = ch.find(t);
        if (it == ch.end()) return -1;
        node = it->second;
    }
    return node;
}

std::vector<TokenId> PrefixTrie::valid_next(std::span<const TokenId> prefix) const {
    std::vector<TokenId> out;
    const int node = walk(prefix);
    if (node < 0) return out;
    for (const auto& [t, child] : nodes_[static_cast<std::size_t>(node)].children) out.push_back(t);
    return out;
}

const std::string* PrefixTrie::terminal(std::span<const TokenId> path) const {
    const int node = walk(path);
    if (node < 0 || !nodes_[static_cast<std::size_t>(node)].terminal) return nullptr;
    return &nodes_[static_cast<std::size_t>(node)].item_key;
}

namespace {

// Log-probabilities of `valid` under `logits` (sorted, non-empty).
std::vector<double> masked_log_probs(const Eigen::VectorXd& logits, std::span<const TokenId> valid, Normalization mode) {
    double max = -std::numeric_limits<double>::infinity();
    if (mode == Normalization::Renormalized)
        for (TokenId t : valid) max = std::max(max, logits[t]);
    else
        max = logits.maxCoeff();
    double z = 0.0;
    if (mode == Normalization::Renormalized)
        for (TokenId t : valid) z += std::exp(logits[t] - max);
    else
        z = (logits.array() - max).exp().sum();
    const double log_z = max + std::log(z);
    std::vector<double> out;
    out.reserve(valid.size());
    for (TokenId t : valid) out.push_back(logits[t] - log_z);
    return out;
}

bool ranked_before(const RankedItem& a, const RankedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item_key < b.item_key;
}

} // namespace

std::vector<std::pair<TokenId, double>> constrained_distribution(const Eigen::VectorXd& logits, const PrefixTrie& trie,
                                                                 std::span<const TokenId> prefix, Normalization mode) {
    const auto valid = trie.valid_next(prefix);
    if (valid.empty()) throw Error(ErrorKind::DeadEnd, "prefix has no valid continuation in the ID trie");
    const auto lp = masked_log_probs(logits, valid, mode);
    std::vector<std::pair<TokenId, double>> out;
    out.reserve(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i) out.emplace_back(valid[i], std::exp(lp[i]));
    return out;
}

double score_candidate(const ModelParams& rec, const EncoderState& state, const TextualId& id, const PrefixTrie& trie,
                       Normalization mode) {
    TokenSequence path = id.tokens;
    path.push_back(kEos);
    if (trie.terminal(path) == nullptr) throw Error(ErrorKind::UnknownId, "ID '" + id.text + "' is not registered");
    const Mat logits = decoder_logits_all(rec, state, path);
    double score = 0.0;
    for (std::size_t i = 0; i < path.size(); ++i) {
        const auto prefix = std::span<const TokenId>(path).first(i);
        const auto valid = trie.valid_next(prefix);
        const auto lp = masked_log_probs(logits.row(static_cast<Eigen::Index>(i)).transpose(), valid, mode);
        const auto pos = std::lower_bound(valid.begin(), valid.end(), path[i]) - valid.begin();
        score += lp[static_cast<std::size_t>(pos)];
    }
    return score;
}

RankedList rank_all(const ModelParams& rec, std::span<const TokenId> prompt, const IdRegistry& registry,
                    const PrefixTrie& trie, Normalization mode) {
    const auto state = encode(rec, prompt);
    RankedList out;
    out.reserve(registry.size());
    for (const auto& e : registry.entries()) out.push_back({e.item_key, score_candidate(rec, state, e.id, trie, mode)});
    std::sort(out.begin(), out.end(), ranked_before);
    return out;
}

RankedList constrained_beam_search(const ModelParams& rec, std::span<const TokenId> prompt, const PrefixTrie& trie,
                                   int beam_width, int top_n, Normalization mode) {
    if (top_n < 1 || beam_width < top_n) throw Error(ErrorKind::InvalidConfig, "need beam_width >= top_n >= 1");
    const auto state = encode(rec, prompt);
    struct Beam {
        TokenSequence tokens;
        double score = 0.0;
    };
    auto beam_before = [](const Beam& a, const Beam& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.tokens < b.tokens;
    };
    std::vector<Beam> live{Beam{}};
    RankedList done;
    while (!live.empty()) {
        std::vector<Beam> cand;
        for (const auto& b : live) {
            if (static_cast<int>(b.tokens.size()) >= rec.config.max_tgt_len)
                throw Error(ErrorKind::SequenceTooLong, "registered ID longer than the decoder limit");
            const auto logits = decoder_logits(rec, state, b.tokens);
            const auto valid = trie.valid_next(b.tokens);
            const auto lp = masked_log_probs(logits, valid, mode);
            for (std::size_t i = 0; i < valid.size(); ++i) {
                Beam n{b.tokens, b.score + lp[i]};
                n.tokens.push_back(valid[i]);
                cand.push_back(std::move(n));
            }
        }
        std::sort(cand.begin(), cand.end(), beam_before);
        if (cand.size() > static_cast<std::size_t>(beam_width)) cand.resize(static_cast<std::size_t>(beam_width));
        live.clear();
        for (auto& c : cand) {
            if (c.tokens.back() == kEos)
                done.push_back({*trie.terminal(c.tokens), c.score});
            else
                live.push_back(std::move(c));
        }
    }
    std::sort(done.begin(), done.end(), ranked_before);
    if (done.size() > static_cast<std::size_t>(top_n)) done.resize(static_cast<std::size_t>(top_n));
    return done;
}

} // namespace idgenrec

#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "idgenrec/allocator.hpp"
#include "idgenrec/model.hpp"
#include "idgenrec/tokenizer.hpp"

namespace idgenrec {

/// Trie over registered IDs. Every path is stored with a trailing EOS, so an
/// ID that is a prefix of another stays distinguishable.
class PrefixTrie {
public:
    static PrefixTrie build(const IdRegistry& registry);

    /// Sorted children of the node reached by `prefix`; empty off the trie.
    std::vector<TokenId> valid_next(std::span<const TokenId> prefix) const;
    /// Item whose EOS-terminated path is exactly `path`, or nullptr.
    const std::string* terminal(std::span<const TokenId> path) const;
    std::size_t terminal_count() const { return terminals_; }

    void insert(std::span<const TokenId> id_tokens, const std::string& item_key);

private:
    struct Node {
        std::map<TokenId, int> children;
        std::string item_key;
        bool terminal = false;
    };
    int walk(std::span<const TokenId> prefix) const;

    std::vector<Node> nodes_{Node{}};
    std::size_t terminals_ = 0;
};

/// How masked next-token probabilities are turned into scores.
enum class Normalization {
    /// Softmax over the valid children only; the catalog's mass sums to one.
    Renormalized,
    /// Full-vocabulary softmax with invalid tokens zeroed.
    Unnormalized,
};

/// Probabilities of the valid next tokens under `logits`, sorted by token.
/// Every other token has probability zero. Throws DeadEnd when `prefix` has
/// no continuation.
std::vector<std::pair<TokenId, double>> constrained_distribution(const Eigen::VectorXd& logits, const PrefixTrie& trie,
                                                                 std::span<const TokenId> prefix,
                                                                 Normalization mode = Normalization::Renormalized);

struct RankedItem {
    std::string item_key;
    double score = 0.0;
};
using RankedList = std::vector<RankedItem>;

/// Sum of constrained log-probabilities along the ID and its EOS.
double score_candidate(const ModelParams& rec, const EncoderState& state, const TextualId& id, const PrefixTrie& trie,
                       Normalization mode = Normalization::Renormalized);

/// Exact ranking of every registered item, best first, ties by item_key.
RankedList rank_all(const ModelParams& rec, std::span<const TokenId> prompt, const IdRegistry& registry,
                    const PrefixTrie& trie, Normalization mode = Normalization::Renormalized);

RankedList constrained_beam_search(const ModelParams& rec, std::span<const TokenId> prompt, const PrefixTrie& trie,
                                   int beam_width, int top_n, Normalization mode = Normalization::Renormalized);

} // namespace idgenrec

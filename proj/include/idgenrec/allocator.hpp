#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "idgenrec/model.hpp"
#include "idgenrec/tokenizer.hpp"

namespace idgenrec {

struct TextualId {
    TokenSequence tokens; // EOS-stripped
    std::string text;

    friend bool operator==(const TextualId&, const TextualId&) = default;
};

/// Token-length window [lo, hi).
struct LengthRange {
    int lo = 1;
    int hi = 10;

    int max_len() const { return hi - 1; }
};

struct AllocatorConfig {
    int groups = 10;
    int beams_per_group = 2;
    double lambda_init = 1.0;
    double lambda_step = 1.0;
    double lambda_max = 10.0;
    std::vector<LengthRange> length_ranges{{1, 10}, {10, 20}};
    std::uint64_t seed = 0;
    /// Throw IdSpaceExhausted instead of falling back to an ordinal suffix.
    bool strict = false;

    void validate() const;
};

/// Source of next-token log-probabilities for a fixed input.
class NextTokenModel {
public:
    virtual ~NextTokenModel() = default;
    virtual Eigen::VectorXd log_probs(std::span<const TokenId> prefix) = 0;
};

/// ID-generator decoder over one encoded source. Prefix results are memoized.
class GeneratorScorer : public NextTokenModel {
public:
    GeneratorScorer(const ModelParams& params, std::span<const TokenId> src);
    Eigen::VectorXd log_probs(std::span<const TokenId> prefix) override;

private:
    const ModelParams& params_;
    EncoderState state_;
    std::map<TokenSequence, Eigen::VectorXd> cache_;
};

/// Diverse beam search: `groups` groups of `beams_per_group` beams, decoded
/// group after group. A token already chosen at the same step by earlier
/// groups costs lambda per occurrence. Returns each group's best finished
/// sequence (EOS-stripped), in group order. PAD and UNK are never emitted and
/// EOS is only allowed once `range.lo` tokens exist; decoding stops at
/// `range.max_len()` tokens.
std::vector<TokenSequence> diverse_beam_search(NextTokenModel& model, int groups, int beams_per_group, double lambda,
                                               LengthRange range);

struct IdAssignment {
    std::string item_key;
    TextualId id;
    double lambda = 1.0;
    /// Index into AllocatorConfig::length_ranges; equal to the number of
    /// ranges when the ordinal fallback produced the ID.
    int range_index = 0;
};

struct AllocationStats {
    std::size_t items = 0;
    std::size_t escalated = 0;        // needed lambda > lambda_init or a later length range
    std::size_t length_extended = 0;  // accepted in a range after the first
    std::size_t fallback = 0;         // ordinal suffix used

    double escalated_fraction() const { return items ? static_cast<double>(escalated) / static_cast<double>(items) : 0.0; }
    double extended_fraction() const {
        return items ? static_cast<double>(length_extended) / static_cast<double>(items) : 0.0;
    }
};

class IdRegistry {
public:
    IdRegistry() = default;
    explicit IdRegistry(AllocatorConfig config) : config_(std::move(config)) {}

    /// Throws DuplicateId when the text is already taken or the item already has an ID.
    void add(IdAssignment entry);

    const IdAssignment* find(const std::string& item_key) const;
    const IdAssignment& at(const std::string& item_key) const;
    bool contains_text(const std::string& text) const { return texts_.count(text) > 0; }

    const std::vector<IdAssignment>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    AllocationStats stats() const;

    /// Fingerprint over (item_key, id text) pairs only.
    std::uint64_t content_hash() const;

    std::uint64_t generator_hash = 0;

    std::string to_tsv() const;
    void save_tsv(const std::filesystem::path& path) const;
    static IdRegistry from_tsv(std::string_view contents, const Vocabulary& vocab, const AllocatorConfig& config);
    static IdRegistry load_tsv(const std::filesystem::path& path, const Vocabulary& vocab, const AllocatorConfig& config);

    const AllocatorConfig& config() const { return config_; }

private:
    AllocatorConfig config_;
    std::vector<IdAssignment> entries_;
    std::unordered_map<std::string, std::size_t> by_item_;
    std::unordered_set<std::string> texts_;
};

struct ItemText {
    std::string item_key;
    std::string text;
};

using ScorerFactory = std::function<std::unique_ptr<NextTokenModel>(const TokenSequence& src)>;

/// Assigns every item a unique textual ID, in input order, escalating the
/// diversity penalty and then the length range until an unused ID appears.
IdRegistry allocate_all(const ScorerFactory& make_scorer, const Vocabulary& vocab, std::span<const ItemText> items,
                        const AllocatorConfig& config, std::size_t max_src_len);
IdRegistry allocate_all(const ModelParams& generator, const Vocabulary& vocab, std::span<const ItemText> items,
                        const AllocatorConfig& config);

/// Profile ID from the concatenated history texts; never registered.
TextualId generate_user_id(const ModelParams& generator, const Vocabulary& vocab,
                           std::span<const std::string> history_texts, const AllocatorConfig& config);

/// Source tokens for the generator: the text truncated to max_src_len.
TokenSequence generator_source(const ModelParams& generator, const Vocabulary& vocab, std::string_view text);
std::string user_profile_text(std::span<const std::string> history_texts);

} // namespace idgenrec

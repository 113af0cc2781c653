#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idgenrec/corpus.hpp"
#include "idgenrec/recommender.hpp"
#include "idgenrec/training.hpp"

namespace idgenrec {

struct HitAndGain {
    int hr = 0;
    double ndcg = 0.0;
};

/// Single-relevant-item metrics for a 1-based rank.
HitAndGain metric_at_k(int rank, int k);

struct RankResult {
    std::string user_key;
    std::string target;
    int rank = 0;
};

enum class EvalMode { Standard, ZeroShot };

struct EvalReport {
    std::string dataset;
    EvalMode mode = EvalMode::Standard;
    std::size_t users = 0;
    double hr5 = 0.0;
    double hr10 = 0.0;
    double ndcg5 = 0.0;
    double ndcg10 = 0.0;
    std::vector<RankResult> ranks;
};

/// Mean metrics over per-user ranks.
EvalReport summarize(std::string dataset, EvalMode mode, std::vector<RankResult> ranks);

struct EvalOptions {
    Normalization normalization = Normalization::Renormalized;
    int template_id = 1;
    /// Rank with constrained beam search of this width instead of exact
    /// full-catalog scoring. Targets outside the beam get the last rank.
    std::optional<int> beam;
};

/// Ranks every held-out target against the registry's full catalog.
/// Throws TargetMissing when a target has no registered ID.
EvalReport evaluate(const Bundle& bundle, const Catalog& catalog, const IdRegistry& registry,
                    std::span<const HeldOut> users, const std::string& dataset, const EvalOptions& options = {});

/// Frozen-model evaluation on an unseen dataset: fresh IDs from the bundled
/// generator, a fresh trie, then the test split. `corpus_vocab_hash`, when
/// given, must match the bundle vocabulary.
EvalReport zero_shot_evaluate(const Bundle& bundle, const SplitDataset& unseen, const EvalOptions& options = {},
                              std::optional<std::uint64_t> corpus_vocab_hash = std::nullopt);

std::string to_json(const EvalReport& report);
void save_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

} // namespace idgenrec

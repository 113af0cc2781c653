#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "idgenrec/allocator.hpp"
#include "idgenrec/corpus.hpp"
#include "idgenrec/model.hpp"
#include "idgenrec/prompting.hpp"
#include "idgenrec/tokenizer.hpp"

namespace idgenrec {

struct TrainConfig {
    int iterations = 3;
    int rec_epochs_per_iter = 10;
    int idgen_epochs_per_iter = 1;
    double lr_rec = 1e-3;
    double lr_idgen = 1e-4;
    int batch_size = 8;
    bool use_user_id = true;
    /// false gives the recommender-only ablation.
    bool train_idgen = true;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Item texts by key, in catalog order.
class Catalog {
public:
    Catalog() = default;
    explicit Catalog(std::span<const ItemRecord> items);

    const std::vector<ItemText>& items() const { return items_; }
    const std::string& text(const std::string& item_key) const;
    bool contains(const std::string& item_key) const { return index_.count(item_key) > 0; }

private:
    std::vector<ItemText> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Everything needed to score or continue training: both models, the ID
/// snapshot they were trained against, and the tokenizer.
struct Bundle {
    Vocabulary vocab;
    TemplateBank templates = TemplateBank::default_bank();
    Checkpoint rec;
    Checkpoint idgen;
    AllocatorConfig alloc;
    IdRegistry registry;
    bool use_user_id = true;
    int iteration = 0;

    /// Throws StaleRegistry unless the registry came from the bundled generator.
    void check_registry() const;
};

/// Shared vocabulary over item texts and the template bank.
Vocabulary build_vocabulary(const Catalog& catalog, const TemplateBank& templates);

/// Fresh models, vocabulary and an initial ID allocation.
Bundle init_bundle(const Catalog& catalog, ModelConfig model, AllocatorConfig alloc, TemplateBank templates,
                   bool use_user_id, std::uint64_t seed);

/// Re-runs allocate_all with the bundled generator over `catalog`.
void refresh_registry(Bundle& bundle, const Catalog& catalog);

void save_bundle(const Bundle& bundle, const std::filesystem::path& dir);
Bundle load_bundle(const std::filesystem::path& dir);

struct Example {
    std::string user_key;
    std::vector<std::string> history;
    std::string target;
};

/// Every (prefix, next item) pair of the training sequences; prefixes keep
/// at most kMaxPromptHistory items.
std::vector<Example> training_examples(std::span<const InteractionLog> train);

/// Profile IDs are a pure function of the generator and the history texts;
/// this memoizes them for one generator snapshot.
class UserIdCache {
public:
    UserIdCache(const Bundle& bundle, const Catalog& catalog) : bundle_(bundle), catalog_(catalog) {}
    const TextualId& get(std::span<const std::string> history);
    /// Generator source tokens for the profile of `history`.
    TokenSequence source(std::span<const std::string> history) const;

private:
    const Bundle& bundle_;
    const Catalog& catalog_;
    std::map<std::string, TextualId> cache_;
};

/// One ID slot in a prompt: where it sits and how the generator produced it.
struct IdSlot {
    std::size_t span = 0;  // index into Prompt::spans
    TokenSequence source;  // generator input
    TokenSequence id;      // snapshot ID tokens
};

struct PreparedExample {
    Prompt prompt;
    std::vector<IdSlot> slots;
    TokenSequence target; // EOS-terminated
};

/// Renders `tmpl` from the IDs in `registry`. The user slot is filled when
/// the bundle uses user IDs, otherwise the template's user placeholder is
/// dropped.
PreparedExample prepare_example(const Bundle& bundle, const IdRegistry& registry, const Catalog& catalog,
                                UserIdCache& users, const Example& ex, const Template& tmpl);

/// Teacher-forced recommender loss on the token prompt.
ad::Var recommender_loss(const Graph& rec, const PreparedExample& ex);
/// Generator logits for a slot, one row per snapshot ID token.
ad::Var slot_logits(const Graph& gen, const IdSlot& slot);
/// Recommender loss with each slot's prompt rows replaced by the expected
/// embeddings of `logits[i]` under the recommender's embedding table.
ad::Var spliced_loss(const Graph& rec, const PreparedExample& ex, std::span<const ad::Var> logits);
/// spliced_loss with generator logits: the differentiable path into the generator.
ad::Var generator_loss(const Graph& rec, const Graph& gen, const PreparedExample& ex);

struct PhaseReport {
    std::vector<double> epoch_loss; // mean per target token
};

PhaseReport train_recommender_phase(Bundle& bundle, const Catalog& catalog, std::span<const Example> examples,
                                    const TrainConfig& config, std::mt19937_64& rng);
/// Updates only the generator, then refreshes the registry.
PhaseReport train_idgen_phase(Bundle& bundle, const Catalog& catalog, std::span<const Example> examples,
                              const TrainConfig& config, std::mt19937_64& rng);

struct IterationLog {
    int iteration = 0;
    PhaseReport idgen;
    PhaseReport rec;
    AllocationStats allocation;
    double valid_hr10 = 0.0;
    double valid_ndcg10 = 0.0;
};

/// Alternating schedule: per iteration the generator phase (and the
/// re-allocation it triggers) runs first, then the recommender phase. With
/// `out_dir`, bundles go to iter_<n>/ and final/.
std::vector<IterationLog> alternate_train(Bundle& bundle, const SplitDataset& data, const TrainConfig& config,
                                          const std::optional<std::filesystem::path>& out_dir = std::nullopt);

} // namespace idgenrec

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace idgenrec {

struct ItemRecord {
    std::string item_key;
    // (field, value) in file order; list values are already joined with ", ".
    std::vector<std::pair<std::string, std::string>> metadata;
};

struct InteractionLog {
    std::string user_key;
    std::vector<std::string> item_keys;
    std::optional<std::vector<std::int64_t>> timestamps;
};

struct Dataset {
    std::string name;
    std::vector<ItemRecord> items;
    std::vector<InteractionLog> logs;

    const ItemRecord* find_item(const std::string& key) const;
    /// Throws InvalidInput when a log references an unknown item or is empty.
    void validate() const;
};

struct HeldOut {
    std::string user_key;
    std::vector<std::string> history;
    std::string target;
};

struct SplitDataset {
    std::string name;
    std::vector<ItemRecord> items;
    std::vector<InteractionLog> train;
    std::vector<HeldOut> valid;
    std::vector<HeldOut> test;
};

struct FusionSpec {
    std::vector<Dataset> sources;
    std::size_t user_cap = 30000;
    std::uint64_t seed = 0;
};

std::string flatten_metadata(const ItemRecord& item);

/// Iterative k-core: drops users and items with fewer than k interactions
/// until both thresholds hold at once.
Dataset filter_k_core(const Dataset& dataset, int k = 5);

SplitDataset leave_one_out_split(const Dataset& dataset);

Dataset build_fusion(const FusionSpec& spec);

// jsonl I/O -----------------------------------------------------------------

/// Reads `items.jsonl` and `interactions.jsonl` from `dir`. Logs with
/// timestamps are reordered chronologically (stable).
Dataset load_dataset(const std::filesystem::path& dir, const std::string& name = {});
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

void save_split(const SplitDataset& split, const std::filesystem::path& dir);
SplitDataset load_split(const std::filesystem::path& dir);

} // namespace idgenrec

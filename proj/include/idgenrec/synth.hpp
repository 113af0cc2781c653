#pragma once

#include <cstdint>
#include <string>

#include "idgenrec/corpus.hpp"

namespace idgenrec {

enum class SynthPattern {
    /// Every user walks the catalog in order: item i is followed by item i+1 (mod n).
    Cyclic,
    /// Every user alternates between two personal items.
    Alternating,
};

struct SynthSpec {
    SynthPattern pattern = SynthPattern::Cyclic;
    std::string name = "synthetic";
    int users = 50;
    int items = 10;
    int min_len = 5;
    int max_len = 12;
    std::uint64_t seed = 0;
    /// Item keys are `<key_prefix><index>`; user keys `<key_prefix>user<index>`.
    std::string key_prefix;
    /// Shifts which word combinations describe the items, so two datasets can
    /// share a vocabulary without sharing item texts.
    int text_offset = 0;
};

/// Deterministic dataset with a planted sequential rule. Item metadata is
/// built from fixed word pools.
Dataset synthesize(const SynthSpec& spec);

SynthPattern parse_synth_pattern(const std::string& name);

} // namespace idgenrec

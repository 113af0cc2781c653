#include "idgenrec/synth.hpp"

#include <array>
#include <cstdio>
#include <random>

#include "idgenrec/error.hpp"

namespace idgenrec {

namespace {

constexpr std::array kColors{"red", "blue", "green", "black", "white", "silver", "golden", "purple", "orange", "gray"};
constexpr std::array kMaterials{"wooden", "steel", "cotton", "leather", "glass", "ceramic", "bamboo", "wool"};
constexpr std::array kNouns{"lamp", "mug", "scarf", "kettle", "backpack", "notebook", "candle", "blanket", "bottle",
                            "clock", "wallet", "basket"};
constexpr std::array kBrands{"acme", "nordic", "zenith", "harbor", "summit", "pioneer", "lumen"};

std::string padded(int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*d", width, i);
    return buf;
}

ItemRecord make_item(const SynthSpec& spec, int i, int width) {
    const auto n = static_cast<std::size_t>(i + spec.text_offset);
    const auto color = kColors[n % kColors.size()];
    const auto material = kMaterials[(n / kColors.size() + n) % kMaterials.size()];
    const auto noun = kNouns[(n * 7 + n / kNouns.size()) % kNouns.size()];
    const auto brand = kBrands[(n * 3) % kBrands.size()];
    ItemRecord r;
    r.item_key = spec.key_prefix + "item" + padded(i, width);
    // Every word occurs at least twice per item, so it survives the vocabulary
    // frequency cutoff even in tiny catalogs.
    r.metadata = {{"title", std::string(brand) + " " + color + " " + material + " " + noun},
                  {"brand", brand},
                  {"color", color},
                  {"material", material},
                  {"category", noun}};
    return r;
}

} // namespace

SynthPattern parse_synth_pattern(const std::string& name) {
    if (name == "cyclic") return SynthPattern::Cyclic;
    if (name == "alternating") return SynthPattern::Alternating;
    throw Error(ErrorKind::InvalidInput, "unknown synthetic pattern '" + name + "' (expected cyclic or alternating)");
}

Dataset synthesize(const SynthSpec& spec) {
    if (spec.users < 1 || spec.items < 2) throw Error(ErrorKind::InvalidConfig, "synthetic data needs >= 1 user and >= 2 items");
    if (spec.min_len < 3 || spec.max_len < spec.min_len)
        throw Error(ErrorKind::InvalidConfig, "synthetic sequence lengths need 3 <= min_len <= max_len");

    Dataset ds;
    ds.name = spec.name;
    const int width = static_cast<int>(std::to_string(std::max(spec.items, spec.users) - 1).size());
    for (int i = 0; i < spec.items; ++i) ds.items.push_back(make_item(spec, i, width));

    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<int> length(spec.min_len, spec.max_len);
    std::uniform_int_distribution<int> item(0, spec.items - 1);
    for (int u = 0; u < spec.users; ++u) {
        InteractionLog log;
        log.user_key = spec.key_prefix + "user" + padded(u, width);
        const int n = length(rng);
        const int a = item(rng);
        int b = item(rng);
        while (b == a) b = item(rng);
        for (int t = 0; t < n; ++t) {
            const int idx = spec.pattern == SynthPattern::Cyclic ? (a + t) % spec.items : (t % 2 == 0 ? a : b);
            log.item_keys.push_back(ds.items[static_cast<std::size_t>(idx)].item_key);
        }
        ds.logs.push_back(std::move(log));
    }
    return ds;
}

} // namespace idgenrec

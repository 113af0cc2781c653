#include "idgenrec/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "idgenrec/error.hpp"

namespace idgenrec {

using ordered_json = nlohmann::ordered_json;

const ItemRecord* Dataset::find_item(const std::string& key) const {
    for (const auto& it : items)
        if (it.item_key == key) return &it;
    return nullptr;
}

void Dataset::validate() const {
    std::unordered_set<std::string> keys;
    for (const auto& it : items) {
        if (it.item_key.empty()) throw Error(ErrorKind::InvalidInput, "empty item key in " + name);
        if (!keys.insert(it.item_key).second)
            throw Error(ErrorKind::InvalidInput, "duplicate item key '" + it.item_key + "' in " + name);
    }
    for (const auto& log : logs) {
        if (log.item_keys.empty()) throw Error(ErrorKind::InvalidInput, "empty log for user '" + log.user_key + "'");
        for (const auto& k : log.item_keys)
            if (!keys.count(k))
                throw Error(ErrorKind::InvalidInput, "user '" + log.user_key + "' references unknown item '" + k + "'");
    }
}

std::string flatten_metadata(const ItemRecord& item) {
    std::string out;
    for (const auto& [key, value] : item.metadata) {
        if (!out.empty()) out += "; ";
        out += key;
        out += ": ";
        out += value;
    }
    return out;
}

Dataset filter_k_core(const Dataset& dataset, int k) {
    if (k < 1) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
    std::vector<InteractionLog> logs = dataset.logs;
    for (bool changed = true; changed;) {
        changed = false;
        std::unordered_map<std::string, int> item_count;
        for (const auto& log : logs)
            for (const auto& key : log.item_keys) ++item_count[key];

        for (auto& log : logs) {
            std::vector<std::string> keys;
            std::vector<std::int64_t> ts;
            for (std::size_t i = 0; i < log.item_keys.size(); ++i) {
                if (item_count[log.item_keys[i]] < k) {
                    changed = true;
                    continue;
                }
                keys.push_back(log.item_keys[i]);
                if (log.timestamps) ts.push_back((*log.timestamps)[i]);
            }
            log.item_keys = std::move(keys);
            if (log.timestamps) log.timestamps = std::move(ts);
        }
        auto before = logs.size();
        std::erase_if(logs, [k](const InteractionLog& l) { return l.item_keys.size() < static_cast<std::size_t>(k); });
        changed = changed || logs.size() != before;
    }
    if (logs.empty())
        throw Error(ErrorKind::EmptyAfterFiltering, "no users left in '" + dataset.name + "' after " + std::to_string(k) + "-core filtering");

    std::unordered_set<std::string> used;
    for (const auto& log : logs) used.insert(log.item_keys.begin(), log.item_keys.end());
    Dataset out;
    out.name = dataset.name;
    for (const auto& it : dataset.items)
        if (used.count(it.item_key)) out.items.push_back(it);
    out.logs = std::move(logs);
    return out;
}

SplitDataset leave_one_out_split(const Dataset& dataset) {
    SplitDataset split;
    split.name = dataset.name;
    split.items = dataset.items;
    for (const auto& log : dataset.logs) {
        const auto n = log.item_keys.size();
        if (n < 3)
            throw Error(ErrorKind::HistoryTooShort,
                        "user '" + log.user_key + "' has " + std::to_string(n) + " interactions, need 3");
        const auto& keys = log.item_keys;
        InteractionLog train{log.user_key, {keys.begin(), keys.end() - 2}, std::nullopt};
        if (log.timestamps) train.timestamps = std::vector<std::int64_t>(log.timestamps->begin(), log.timestamps->end() - 2);
        split.train.push_back(std::move(train));
        split.valid.push_back({log.user_key, {keys.begin(), keys.end() - 2}, keys[n - 2]});
        split.test.push_back({log.user_key, {keys.begin(), keys.end() - 1}, keys[n - 1]});
    }
    return split;
}

Dataset build_fusion(const FusionSpec& spec) {
    if (spec.user_cap == 0) throw Error(ErrorKind::InvalidConfig, "user_cap must be positive");
    Dataset out;
    out.name = "fusion";
    std::mt19937_64 rng(spec.seed);
    for (const auto& src : spec.sources) {
        std::vector<std::size_t> picked(src.logs.size());
        std::iota(picked.begin(), picked.end(), 0);
        if (picked.size() > spec.user_cap) {
            std::vector<std::size_t> sample;
            sample.reserve(spec.user_cap);
            // std::sample keeps the relative order of the selected users.
            std::sample(picked.begin(), picked.end(), std::back_inserter(sample), spec.user_cap, rng);
            picked = std::move(sample);
        }
        const std::string prefix = src.name + "/";
        std::unordered_set<std::string> used;
        for (auto idx : picked) {
            InteractionLog log = src.logs[idx];
            log.user_key = prefix + log.user_key;
            for (auto& key : log.item_keys) {
                used.insert(key);
                key = prefix + key;
            }
            out.logs.push_back(std::move(log));
        }
        for (const auto& it : src.items) {
            if (!used.count(it.item_key)) continue;
            ItemRecord rec = it;
            rec.item_key = prefix + rec.item_key;
            out.items.push_back(std::move(rec));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string render_value(const ordered_json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_array()) {
        std::string out;
        for (const auto& e : v) {
            if (!out.empty()) out += ", ";
            out += render_value(e);
        }
        return out;
    }
    return v.dump();
}

template <class Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorKind::InvalidInput, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            fn(j);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::InvalidInput, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

class LineWriter {
public:
    explicit LineWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw Error(ErrorKind::Io, "cannot write " + path.string());
    }
    void write(const ordered_json& j) { out_ << j.dump() << '\n'; }

private:
    std::ofstream out_;
};

ordered_json item_json(const ItemRecord& it) {
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : it.metadata) meta[k] = v;
    return {{"item", it.item_key}, {"metadata", meta}};
}

std::vector<ItemRecord> load_items(const std::filesystem::path& path) {
    std::vector<ItemRecord> items;
    for_each_line(path, [&](const ordered_json& j) {
        ItemRecord rec;
        rec.item_key = j.at("item").get<std::string>();
        if (j.contains("metadata"))
            for (const auto& [k, v] : j.at("metadata").items()) rec.metadata.emplace_back(k, render_value(v));
        items.push_back(std::move(rec));
    });
    return items;
}

HeldOut held_out_from(const ordered_json& j) {
    return {j.at("user").get<std::string>(), j.at("history").get<std::vector<std::string>>(),
            j.at("target").get<std::string>()};
}

} // namespace

Dataset load_dataset(const std::filesystem::path& dir, const std::string& name) {
    const auto items_path = dir / "items.jsonl";
    const auto inter_path = dir / "interactions.jsonl";
    if (!std::filesystem::exists(items_path)) throw Error(ErrorKind::Io, "missing " + items_path.string());
    if (!std::filesystem::exists(inter_path)) throw Error(ErrorKind::Io, "missing " + inter_path.string());

    Dataset ds;
    ds.name = name.empty() ? std::filesystem::absolute(dir).lexically_normal().filename().string() : name;
    if (ds.name.empty()) ds.name = std::filesystem::absolute(dir).lexically_normal().parent_path().filename().string();
    ds.items = load_items(items_path);
    for_each_line(inter_path, [&](const ordered_json& j) {
        InteractionLog log;
        log.user_key = j.at("user").get<std::string>();
        log.item_keys = j.at("items").get<std::vector<std::string>>();
        if (j.contains("timestamps")) {
            auto ts = j.at("timestamps").get<std::vector<std::int64_t>>();
            if (ts.size() != log.item_keys.size())
                throw Error(ErrorKind::InvalidInput, "timestamps length mismatch for user '" + log.user_key + "'");
            std::vector<std::size_t> order(ts.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ts[a] < ts[b]; });
            std::vector<std::string> keys;
            std::vector<std::int64_t> sorted_ts;
            for (auto i : order) {
                keys.push_back(log.item_keys[i]);
                sorted_ts.push_back(ts[i]);
            }
            log.item_keys = std::move(keys);
            log.timestamps = std::move(sorted_ts);
        }
        ds.logs.push_back(std::move(log));
    });
    ds.validate();
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    LineWriter items(dir / "items.jsonl");
    for (const auto& it : dataset.items) items.write(item_json(it));
    LineWriter inter(dir / "interactions.jsonl");
    for (const auto& log : dataset.logs) {
        ordered_json j{{"user", log.user_key}, {"items", log.item_keys}};
        if (log.timestamps) j["timestamps"] = *log.timestamps;
        inter.write(j);
    }
}

void save_split(const SplitDataset& split, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        LineWriter items(dir / "items.jsonl");
        for (const auto& it : split.items) items.write(item_json(it));
    }
    LineWriter train(dir / "train.jsonl");
    for (const auto& log : split.train) train.write({{"user", log.user_key}, {"items", log.item_keys}});
    for (const auto& [file, rows] : {std::pair{"valid.jsonl", &split.valid}, std::pair{"test.jsonl", &split.test}}) {
        LineWriter w(dir / file);
        for (const auto& h : *rows) w.write({{"user", h.user_key}, {"history", h.history}, {"target", h.target}});
    }
    std::ofstream meta(dir / "name.txt", std::ios::binary);
    meta << split.name << '\n';
}

SplitDataset load_split(const std::filesystem::path& dir) {
    for (const char* f : {"items.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl"})
        if (!std::filesystem::exists(dir / f)) throw Error(ErrorKind::Io, "missing " + (dir / f).string());
    SplitDataset split;
    if (std::ifstream meta(dir / "name.txt"); meta) std::getline(meta, split.name);
    split.items = load_items(dir / "items.jsonl");
    for_each_line(dir / "train.jsonl", [&](const ordered_json& j) {
        split.train.push_back({j.at("user").get<std::string>(), j.at("items").get<std::vector<std::string>>(), std::nullopt});
    });
    for_each_line(dir / "valid.jsonl", [&](const ordered_json& j) { split.valid.push_back(held_out_from(j)); });
    for_each_line(dir / "test.jsonl", [&](const ordered_json& j) { split.test.push_back(held_out_from(j)); });
    return split;
}

} // namespace idgenrec

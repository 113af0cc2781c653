#include "idgenrec/eval.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "idgenrec/error.hpp"

namespace idgenrec {

using json = nlohmann::ordered_json;

HitAndGain metric_at_k(int rank, int k) {
    if (rank < 1 || k < 1) throw Error(ErrorKind::InvalidInput, "rank and k must be >= 1");
    if (rank > k) return {0, 0.0};
    return {1, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

EvalReport summarize(std::string dataset, EvalMode mode, std::vector<RankResult> ranks) {
    EvalReport r;
    r.dataset = std::move(dataset);
    r.mode = mode;
    r.users = ranks.size();
    for (const auto& x : ranks) {
        const auto m5 = metric_at_k(x.rank, 5);
        const auto m10 = metric_at_k(x.rank, 10);
        r.hr5 += m5.hr;
        r.ndcg5 += m5.ndcg;
        r.hr10 += m10.hr;
        r.ndcg10 += m10.ndcg;
    }
    if (r.users > 0) {
        const double n = static_cast<double>(r.users);
        r.hr5 /= n;
        r.ndcg5 /= n;
        r.hr10 /= n;
        r.ndcg10 /= n;
    }
    r.ranks = std::move(ranks);
    return r;
}

EvalReport evaluate(const Bundle& bundle, const Catalog& catalog, const IdRegistry& registry,
                    std::span<const HeldOut> users, const std::string& dataset, const EvalOptions& options) {
    if (registry.size() == 0) throw Error(ErrorKind::InvalidInput, "cannot evaluate against an empty registry");
    const auto trie = PrefixTrie::build(registry);
    const auto& tmpl = bundle.templates.at(options.template_id);
    UserIdCache profiles(bundle, catalog);
    const int catalog_size = static_cast<int>(registry.size());

    std::vector<RankResult> ranks;
    ranks.reserve(users.size());
    for (const auto& u : users) {
        if (registry.find(u.target) == nullptr)
            throw Error(ErrorKind::TargetMissing, "test target '" + u.target + "' of user '" + u.user_key + "' has no ID");
        Example ex{u.user_key, u.history, u.target};
        const auto prepared = prepare_example(bundle, registry, catalog, profiles, ex, tmpl);
        const auto& prompt = prepared.prompt.tokens;
        RankedList ranked = options.beam
                                ? constrained_beam_search(bundle.rec.params, prompt, trie, *options.beam, *options.beam,
                                                          options.normalization)
                                : rank_all(bundle.rec.params, prompt, registry, trie, options.normalization);
        int rank = catalog_size;
        for (std::size_t i = 0; i < ranked.size(); ++i)
            if (ranked[i].item_key == u.target) {
                rank = static_cast<int>(i) + 1;
                break;
            }
        ranks.push_back({u.user_key, u.target, rank});
    }
    return summarize(dataset, EvalMode::Standard, std::move(ranks));
}

EvalReport zero_shot_evaluate(const Bundle& bundle, const SplitDataset& unseen, const EvalOptions& options,
                              std::optional<std::uint64_t> corpus_vocab_hash) {
    if (corpus_vocab_hash && *corpus_vocab_hash != bundle.vocab.hash())
        throw Error(ErrorKind::VocabularyMismatch, "unseen corpus was tokenized with a different vocabulary");
    const Catalog catalog(unseen.items);
    const auto registry = allocate_all(bundle.idgen.params, bundle.vocab, catalog.items(), bundle.alloc);
    auto report = evaluate(bundle, catalog, registry, unseen.test, unseen.name, options);
    report.mode = EvalMode::ZeroShot;
    return report;
}

std::string to_json(const EvalReport& r) {
    json j;
    j["dataset"] = r.dataset;
    j["mode"] = r.mode == EvalMode::Standard ? "standard" : "zero-shot";
    j["users"] = r.users;
    j["HR@5"] = r.hr5;
    j["HR@10"] = r.hr10;
    j["NDCG@5"] = r.ndcg5;
    j["NDCG@10"] = r.ndcg10;
    json ranks = json::array();
    for (const auto& x : r.ranks) ranks.push_back({{"user", x.user_key}, {"target", x.target}, {"rank", x.rank}});
    j["ranks"] = std::move(ranks);
    return j.dump(2) + "\n";
}

void save_report(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << to_json(report);
}

EvalReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    try {
        const auto j = json::parse(in);
        EvalReport r;
        r.dataset = j.at("dataset").get<std::string>();
        r.mode = j.at("mode") == "zero-shot" ? EvalMode::ZeroShot : EvalMode::Standard;
        r.users = j.at("users").get<std::size_t>();
        r.hr5 = j.at("HR@5").get<double>();
        r.hr10 = j.at("HR@10").get<double>();
        r.ndcg5 = j.at("NDCG@5").get<double>();
        r.ndcg10 = j.at("NDCG@10").get<double>();
        for (const auto& x : j.at("ranks"))
            r.ranks.push_back({x.at("user").get<std::string>(), x.at("target").get<std::string>(), x.at("rank").get<int>()});
        return r;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidInput, path.string() + ": " + e.what());
    }
}

} // namespace idgenrec

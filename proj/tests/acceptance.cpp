// Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <boost/math/distributions/binomial.hpp>
#include <spdlog/spdlog.h>

#include "idgenrec/cli.hpp"
#include "idgenrec/eval.hpp"
#include "idgenrec/recommender.hpp"
#include "idgenrec/synth.hpp"
#include "idgenrec/training.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace idgenrec;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double x, int precision = 4) {
    std::ostringstream ss;
    ss << std::setprecision(precision) << x;
    return ss.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path workdir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("idgenrec_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ModelConfig tiny(int vocab, std::uint64_t seed) {
    ModelConfig c;
    c.d_model = 8;
    c.layers = 1;
    c.heads = 2;
    c.ff_dim = 8;
    c.max_src_len = 16;
    c.max_tgt_len = 20;
    c.vocab_size = vocab;
    c.seed = seed;
    return c;
}

Vocabulary letter_vocab() {
    return Vocabulary::build(std::vector<std::string>{"a b c d e f g h i j k l", "a b c d e f g h i j k l"}, 2);
}

IdRegistry random_registry(const Vocabulary& v, std::size_t n, int max_len, std::mt19937_64& rng) {
    std::set<TokenSequence> seen;
    IdRegistry reg;
    std::uniform_int_distribution<int> len(1, max_len);
    std::uniform_int_distribution<TokenId> tok(kNumSpecials, static_cast<TokenId>(v.size() - 1));
    while (reg.size() < n) {
        TokenSequence s(static_cast<std::size_t>(len(rng)));
        for (auto& t : s) t = tok(rng);
        if (!seen.insert(s).second) continue;
        reg.add({"k" + std::to_string(reg.size()), {s, v.decode(s)}, 1.0, 0});
    }
    return reg;
}

TokenSequence random_prompt(const Vocabulary& v, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len(1, 8);
    std::uniform_int_distribution<TokenId> tok(kNumSpecials, static_cast<TokenId>(v.size() - 1));
    TokenSequence s(static_cast<std::size_t>(len(rng)));
    for (auto& t : s) t = tok(rng);
    return s;
}

// ---------------------------------------------------------------------------

Outcome id_uniqueness() {
    SynthSpec spec;
    spec.items = 100;
    const auto base = synthesize(spec);
    std::vector<ItemRecord> records;
    for (int copy = 0; copy < 10; ++copy)
        for (const auto& it : base.items) {
            ItemRecord r = it;
            r.item_key = it.item_key + "_" + std::to_string(copy);
            records.push_back(std::move(r));
        }
    const Catalog catalog(records);
    std::set<std::string> texts;
    for (const auto& it : catalog.items()) texts.insert(it.text);

    const auto t0 = Clock::now();
    const auto vocab = build_vocabulary(catalog, TemplateBank::default_bank());
    ModelConfig mc;
    mc.vocab_size = static_cast<int>(vocab.size());
    const auto generator = init_params(mc);
    const auto registry = allocate_all(generator, vocab, catalog.items(), AllocatorConfig{});
    const double secs = seconds_since(t0);

    std::set<std::string> ids;
    for (const auto& e : registry.entries()) ids.insert(e.id.text);
    const auto st = registry.stats();
    const bool pass = texts.size() == 100 && registry.size() == 1000 && ids.size() == 1000 && secs < 60.0;
    return {pass, std::to_string(ids.size()) + " distinct IDs for " + std::to_string(registry.size()) + " items over " +
                      std::to_string(texts.size()) + " texts; escalated " + fmt(st.escalated_fraction()) +
                      ", length-extended " + fmt(st.extended_fraction()) + ", fallback " + std::to_string(st.fallback) +
                      "; " + fmt(secs, 3) + " s"};
}

Outcome constrained_soundness() {
    const auto vocab = letter_vocab();
    std::mt19937_64 rng(101);
    long decodes = 0, registered = 0, dists = 0, leaks = 0;
    double worst_sum = 0.0;
    for (std::uint64_t m = 0; m < 100; ++m) {
        const auto params = init_params(tiny(static_cast<int>(vocab.size()), 1000 + m));
        const auto registry = random_registry(vocab, 2 + rng() % 40, 4, rng);
        const auto trie = PrefixTrie::build(registry);
        for (int d = 0; d < 100; ++d, ++decodes) {
            const auto prompt = random_prompt(vocab, rng);
            if (d % 10 == 9) {
                // every tenth decode goes through the constrained beam
                const auto ranked = constrained_beam_search(params, prompt, trie, 3, 3);
                bool ok = !ranked.empty();
                for (const auto& r : ranked) ok = ok && registry.find(r.item_key) != nullptr;
                registered += ok;
                continue;
            }
            const auto state = encode(params, prompt);
            TokenSequence path;
            while (true) {
                const auto logits = decoder_logits(params, state, path);
                const auto valid = trie.valid_next(path);
                Eigen::VectorXd full = Eigen::VectorXd::Zero(logits.size());
                for (const auto& [tok, p] : constrained_distribution(logits, trie, path)) full[tok] = p;
                ++dists;
                worst_sum = std::max(worst_sum, std::abs(full.sum() - 1.0));
                for (Eigen::Index v = 0; v < full.size(); ++v) {
                    const bool is_valid = std::binary_search(valid.begin(), valid.end(), static_cast<TokenId>(v));
                    if (!is_valid && full[v] != 0.0) ++leaks;
                }
                std::discrete_distribution<int> pick(full.data(), full.data() + full.size());
                const auto tok = static_cast<TokenId>(pick(rng));
                path.push_back(tok);
                if (tok == kEos) break;
            }
            registered += trie.terminal(path) != nullptr;
        }
    }
    const bool pass = registered == decodes && leaks == 0 && worst_sum <= 1e-9;
    return {pass, std::to_string(registered) + "/" + std::to_string(decodes) + " decodes registered; " +
                      std::to_string(leaks) + " nonzero invalid tokens over " + std::to_string(dists) +
                      " distributions; max |sum-1| " + fmt(worst_sum, 3)};
}

Outcome total_mass() {
    const auto vocab = letter_vocab();
    std::mt19937_64 rng(202);
    double worst = 0.0;
    int mismatched = 0;
    const int catalogs = 30;
    for (int c = 0; c < catalogs; ++c) {
        const auto params = init_params(tiny(static_cast<int>(vocab.size()), 2000 + static_cast<std::uint64_t>(c)));
        const std::size_t n = 2 + rng() % 49;
        const auto registry = random_registry(vocab, n, 4, rng);
        const auto trie = PrefixTrie::build(registry);
        const auto prompt = random_prompt(vocab, rng);
        const auto state = encode(params, prompt);
        double mass = 0.0;
        for (const auto& e : registry.entries()) mass += std::exp(score_candidate(params, state, e.id, trie));
        worst = std::max(worst, std::abs(mass - 1.0));

        const auto exact = rank_all(params, prompt, registry, trie);
        const auto beam = constrained_beam_search(params, prompt, trie, static_cast<int>(n), std::min<int>(10, static_cast<int>(n)));
        bool same = beam.size() == std::min<std::size_t>(10, n);
        for (std::size_t i = 0; same && i < beam.size(); ++i) same = beam[i].item_key == exact[i].item_key;
        mismatched += !same;
    }
    return {worst <= 1e-9 && mismatched == 0, "max |mass-1| " + fmt(worst, 3) + " over " + std::to_string(catalogs) +
                                                  " catalogs; top-10 mismatches " + std::to_string(mismatched)};
}

struct ToyTraining {
    SplitDataset split = toy::small_split();
    Catalog catalog{split.items};
    Bundle bundle = init_bundle(catalog, toy::tiny_model(), AllocatorConfig{}, TemplateBank::default_bank(), true, 11);
    std::vector<Example> examples = training_examples(split.train);
};

double max_fd_error(ModelParams& params, const Gradients& grads, const std::function<double()>& loss, std::uint64_t seed) {
    double worst = 0.0;
    for (auto c : oracle::sample_coords(params, 25, seed))
        worst = std::max(worst, oracle::relative_error(grads[c.tensor].data()[c.index],
                                                       oracle::central_difference(params, c, loss)));
    return worst;
}

Outcome gradient_fidelity() {
    ToyTraining t;
    UserIdCache users(t.bundle, t.catalog);
    const auto ex = prepare_example(t.bundle, t.bundle.registry, t.catalog, users, t.examples.back(), t.bundle.templates.at(1));

    auto& rec = t.bundle.rec.params;
    auto& gen = t.bundle.idgen.params;
    Gradients rec_grads, gen_grads;
    {
        ad::Tape tape;
        Graph g(tape, rec, true);
        rec_grads = g.backward(recommender_loss(g, ex));
    }
    {
        ad::Tape tape;
        Graph r(tape, rec, false);
        Graph g(tape, gen, true);
        gen_grads = g.backward(generator_loss(r, g, ex));
    }
    const double token_err = max_fd_error(rec, rec_grads, [&] {
        ad::Tape tape;
        return tape.value(recommender_loss(Graph(tape, rec, false), ex))(0, 0);
    }, 41);
    const double spliced_err = max_fd_error(gen, gen_grads, [&] {
        ad::Tape tape;
        return tape.value(generator_loss(Graph(tape, rec, false), Graph(tape, gen, false), ex))(0, 0);
    }, 42);
    return {token_err < 1e-4 && spliced_err < 1e-4,
            "d_model " + std::to_string(rec.config.d_model) + ", 25 coordinates each; max relative error: token path " +
                fmt(token_err, 3) + ", expected-embedding path " + fmt(spliced_err, 3)};
}

Outcome reduction_identity() {
    ToyTraining t;
    UserIdCache users(t.bundle, t.catalog);
    std::mt19937_64 rng(55);
    const auto vocab = static_cast<Eigen::Index>(t.bundle.vocab.size());
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const auto& e = t.examples[rng() % t.examples.size()];
        const auto ex = prepare_example(t.bundle, t.bundle.registry, t.catalog, users, e, t.bundle.templates.sample(rng));
        ad::Tape tape;
        Graph rec(tape, t.bundle.rec.params, false);
        std::vector<ad::Var> logits;
        for (const auto& s : ex.slots) {
            Mat one_hot = Mat::Zero(static_cast<Eigen::Index>(s.id.size()), vocab);
            for (std::size_t r = 0; r < s.id.size(); ++r) one_hot(static_cast<Eigen::Index>(r), s.id[r]) = 1e3;
            logits.push_back(tape.constant(one_hot));
        }
        const double spliced = tape.value(spliced_loss(rec, ex, logits))(0, 0);
        const double token = tape.value(recommender_loss(rec, ex))(0, 0);
        worst = std::max(worst, std::abs(spliced - token));
    }
    return {worst <= 1e-9, "50 examples; max |spliced - token| " + fmt(worst, 3)};
}

Outcome metric_oracle() {
    std::mt19937_64 rng(66);
    int mismatches = 0;
    for (int list = 0; list < 1000; ++list) {
        const int n = 1 + static_cast<int>(rng() % 50);
        const long catalog = 1 + static_cast<long>(rng() % 100);
        std::vector<RankResult> ranks;
        double hr5 = 0, hr10 = 0, nd5 = 0, nd10 = 0;
        for (int u = 0; u < n; ++u) {
            const long rank = 1 + static_cast<long>(rng() % static_cast<std::uint64_t>(catalog));
            ranks.push_back({"u", "t", static_cast<int>(rank)});
            hr5 += oracle::hr_at(rank, 5);
            hr10 += oracle::hr_at(rank, 10);
            nd5 += oracle::ndcg_at(rank, 5);
            nd10 += oracle::ndcg_at(rank, 10);
        }
        const auto r = summarize("m", EvalMode::Standard, ranks);
        mismatches += !(r.hr5 == hr5 / n && r.hr10 == hr10 / n && r.ndcg5 == nd5 / n && r.ndcg10 == nd10 / n);
    }
    const double ndcg = metric_at_k(3, 5).ndcg;
    return {mismatches == 0 && ndcg == 0.5,
            std::to_string(mismatches) + " mismatching lists of 1000; NDCG@5 at rank 3 = " + fmt(ndcg, 17)};
}

Outcome dbs_degeneracy() {
    const auto vocab = letter_vocab();
    const AllocatorConfig defaults;
    const auto range = defaults.length_ranges.front();
    std::mt19937_64 rng(77);
    int equal = 0;
    for (std::uint64_t m = 0; m < 100; ++m) {
        const auto params = init_params(tiny(static_cast<int>(vocab.size()), 3000 + m));
        const auto src = random_prompt(vocab, rng);
        GeneratorScorer a(params, src), b(params, src);
        const auto dbs = diverse_beam_search(a, 1, defaults.beams_per_group, defaults.lambda_init, range);
        equal += dbs.size() == 1 &&
                 dbs.front() == oracle::vanilla_beam_search(b, defaults.beams_per_group, range.lo, range.max_len());
    }
    return {equal == 100, std::to_string(equal) + "/100 models token-identical (beam width " +
                              std::to_string(defaults.beams_per_group) + ")"};
}

// Full CLI pipeline on the bundled cyclic dataset: synth, ingest, train, eval.
struct PipelineRun {
    fs::path dir;
    bool ok = false;
    double seconds = 0.0;
};

PipelineRun run_pipeline(const std::string& name) {
    PipelineRun run;
    run.dir = workdir(name);
    std::ostringstream out, err;
    const auto t0 = Clock::now();
    const auto d = [&](const char* sub) { return (run.dir / sub).string(); };
    run.ok = run_cli({"synth", "--out", d("raw"), "--seed", "0"}, out, err) == 0 &&
             run_cli({"ingest", "--data", d("raw"), "--out", d("split")}, out, err) == 0 &&
             run_cli({"train", "--data", d("split"), "--out", d("run"), "--seed", "0"}, out, err) == 0 &&
             run_cli({"eval", "--bundle", d("run/final"), "--data", d("split"), "--out", d("eval")}, out, err) == 0;
    run.seconds = seconds_since(t0);
    if (!run.ok) std::cerr << err.str();
    return run;
}

Outcome learnability(const PipelineRun& run) {
    if (!run.ok) return {false, "pipeline failed"};
    const auto test = load_report(run.dir / "eval" / "metrics.json");
    const auto bundle = load_bundle(run.dir / "run" / "final");
    const auto split = load_split(run.dir / "split");
    const Catalog catalog(split.items);
    // last training item of every user, predicted from the items before it
    std::vector<HeldOut> train_targets;
    for (const auto& log : split.train)
        train_targets.push_back({log.user_key, {log.item_keys.begin(), log.item_keys.end() - 1}, log.item_keys.back()});
    const auto train = evaluate(bundle, catalog, bundle.registry, train_targets, split.name);
    int hits = 0;
    for (const auto& r : train.ranks) hits += r.rank == 1;
    const double hr1 = static_cast<double>(hits) / static_cast<double>(train.ranks.size());
    return {hr1 >= 0.9 && test.hr5 >= 0.8 && run.seconds < 300.0,
            "train-split HR@1 " + fmt(hr1) + ", test HR@5 " + fmt(test.hr5) + " (" + std::to_string(test.users) +
                " users, " + std::to_string(split.items.size()) + " items); " + fmt(run.seconds, 4) + " s"};
}

Outcome zero_shot_integrity() {
    SynthSpec a;
    a.pattern = SynthPattern::Alternating;
    a.name = "domain-a";
    a.users = 60;
    a.items = 30;
    a.seed = 9;
    SynthSpec b = a;
    b.name = "domain-b";
    b.users = 100;
    b.items = 40;
    b.seed = 10;
    b.key_prefix = "b_";
    b.text_offset = 30;
    const auto split_a = leave_one_out_split(synthesize(a));
    const auto split_b = leave_one_out_split(synthesize(b));

    std::set<std::string> texts_a, keys_a;
    for (const auto& it : split_a.items) {
        texts_a.insert(flatten_metadata(it));
        keys_a.insert(it.item_key);
    }
    int shared = 0;
    for (const auto& it : split_b.items) shared += texts_a.count(flatten_metadata(it)) + keys_a.count(it.item_key);

    const Catalog catalog_a(split_a.items);
    Bundle bundle = init_bundle(catalog_a, ModelConfig{}, AllocatorConfig{}, TemplateBank::default_bank(), true, 0);
    alternate_train(bundle, split_a, TrainConfig{});

    const auto rec = bundle.rec.params.hash();
    const auto gen = bundle.idgen.params.hash();
    const auto ids = bundle.registry.content_hash();
    const Bundle& frozen = bundle;
    const auto first = zero_shot_evaluate(frozen, split_b);
    const auto second = zero_shot_evaluate(frozen, split_b);
    const bool unchanged =
        bundle.rec.params.hash() == rec && bundle.idgen.params.hash() == gen && bundle.registry.content_hash() == ids;
    const bool deterministic = to_json(first) == to_json(second);

    const auto n = static_cast<unsigned>(first.users);
    const auto hits = static_cast<unsigned>(std::lround(first.hr10 * n));
    const double baseline = 10.0 / static_cast<double>(split_b.items.size());
    const boost::math::binomial_distribution<double> null(n, baseline);
    const double p_value = hits == 0 ? 1.0 : boost::math::cdf(boost::math::complement(null, hits - 1));

    return {shared == 0 && unchanged && deterministic && p_value < 0.01,
            "B shares " + std::to_string(shared) + " keys/texts with A; params " + (unchanged ? "unchanged" : "CHANGED") +
                "; report " + (deterministic ? "deterministic" : "NOT deterministic") + "; HR@10 " + fmt(first.hr10) +
                " vs baseline " + fmt(baseline) + " over " + std::to_string(n) + " users, one-sided binomial p " +
                fmt(p_value, 3)};
}

Outcome determinism(const PipelineRun& a, const PipelineRun& b) {
    if (!a.ok || !b.ok) return {false, "pipeline failed"};
    int compared = 0, differing = 0;
    for (const auto& sub : {"run/iter_1", "run/iter_2", "run/iter_3", "run/final"})
        for (const auto& file : {"ids.tsv", "metrics.json"}) {
            ++compared;
            const auto pa = a.dir / sub / file;
            differing += !fs::exists(pa) || slurp(pa) != slurp(b.dir / sub / file);
        }
    ++compared;
    differing += slurp(a.dir / "eval" / "metrics.json") != slurp(b.dir / "eval" / "metrics.json");
    return {differing == 0, std::to_string(compared - differing) + "/" + std::to_string(compared) +
                                " ids.tsv/metrics.json files byte-identical across two seeded runs"};
}

void report(int n, const std::string& title, const Outcome& o, int& failures) {
    std::cout << "criterion " << n << " (" << title << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
    failures += !o.pass;
}

Outcome guarded(const std::function<Outcome()>& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        return {false, std::string("exception: ") + e.what()};
    }
}

} // namespace

int main() {
    ::setenv("IDGEN_LOG", "warn", 0);
    spdlog::set_level(spdlog::level::warn);
    int failures = 0;
    report(1, "ID uniqueness and termination", guarded(id_uniqueness), failures);
    report(2, "constrained decoding soundness", guarded(constrained_soundness), failures);
    report(3, "total mass and beam/exhaustive agreement", guarded(total_mass), failures);
    report(4, "gradient fidelity", guarded(gradient_fidelity), failures);
    report(5, "one-hot reduction identity", guarded(reduction_identity), failures);
    report(6, "metric oracle", guarded(metric_oracle), failures);
    report(7, "DBS degeneracy", guarded(dbs_degeneracy), failures);
    PipelineRun first, second;
    report(8, "learnability", guarded([&] {
               first = run_pipeline("run_a");
               return learnability(first);
           }),
           failures);
    report(9, "zero-shot integrity", guarded(zero_shot_integrity), failures);
    report(10, "determinism", guarded([&] {
               second = run_pipeline("run_b");
               return determinism(first, second);
           }),
           failures);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}

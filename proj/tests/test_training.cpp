#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "idgenrec/error.hpp"
#include "idgenrec/training.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace idgenrec;

namespace {

struct Fixture {
    SplitDataset split = toy::small_split();
    Catalog catalog{split.items};
    Bundle bundle = init_bundle(catalog, toy::tiny_model(), AllocatorConfig{}, TemplateBank::default_bank(), true, 11);
    std::vector<Example> examples = training_examples(split.train);
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("idgenrec_training_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

TrainConfig quick_config() {
    TrainConfig c;
    c.iterations = 1;
    c.rec_epochs_per_iter = 1;
    c.batch_size = 4;
    c.seed = 5;
    return c;
}

double value(const ad::Tape& t, ad::Var v) { return t.value(v)(0, 0); }

} // namespace

TEST_CASE("training examples are every prefix, capped at the prompt history limit") {
    std::vector<InteractionLog> logs(2);
    logs[0].user_key = "u0";
    logs[0].item_keys = {"a", "b", "c", "d"};
    logs[1].user_key = "u1";
    for (int i = 0; i < 25; ++i) logs[1].item_keys.push_back("i" + std::to_string(i));
    const auto ex = training_examples(logs);
    REQUIRE(ex.size() == 3 + 24);
    CHECK(ex[0].history == std::vector<std::string>{"a"});
    CHECK(ex[0].target == "b");
    CHECK(ex[2].history == std::vector<std::string>{"a", "b", "c"});
    CHECK(ex[2].target == "d");
    const auto& last = ex.back();
    CHECK(last.history.size() == kMaxPromptHistory);
    CHECK(last.history.front() == "i4");
    CHECK(last.target == "i24");
}

TEST_CASE("config and catalog validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.lr_idgen = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);

    std::vector<ItemRecord> items(2);
    items[0].item_key = items[1].item_key = "x";
    CHECK_THROWS_AS(Catalog{items}, Error);
    Catalog ok(std::span<const ItemRecord>(items.data(), 1));
    CHECK(ok.contains("x"));
    CHECK_THROWS_AS(ok.text("y"), Error);
}

TEST_CASE("prepared examples carry one slot per interpolated ID") {
    Fixture f;
    UserIdCache users(f.bundle, f.catalog);
    const auto& ex = f.examples.back();
    const auto& with_user = f.bundle.templates.at(1);
    REQUIRE(with_user.has_user());
    auto p = prepare_example(f.bundle, f.bundle.registry, f.catalog, users, ex, with_user);
    REQUIRE(p.slots.size() == ex.history.size() + 1);
    CHECK(p.prompt.spans[p.slots[0].span].role == SpanRole::User);
    CHECK(p.slots[0].id == users.get(ex.history).tokens);
    for (std::size_t i = 1; i < p.slots.size(); ++i) {
        const auto& span = p.prompt.spans[p.slots[i].span];
        CHECK(p.slots[i].id == f.bundle.registry.at(ex.history[span.index]).id.tokens);
        CHECK(TokenSequence(p.prompt.tokens.begin() + static_cast<std::ptrdiff_t>(span.start),
                            p.prompt.tokens.begin() + static_cast<std::ptrdiff_t>(span.end)) == p.slots[i].id);
    }
    CHECK(p.target.back() == kEos);
    CHECK(TokenSequence(p.target.begin(), p.target.end() - 1) == f.bundle.registry.at(ex.target).id.tokens);

    f.bundle.use_user_id = false;
    auto q = prepare_example(f.bundle, f.bundle.registry, f.catalog, users, ex, with_user);
    CHECK(q.slots.size() == ex.history.size());
    for (const auto& s : q.prompt.spans) CHECK(s.role == SpanRole::History);
}

TEST_CASE("one-hot generator logits reduce the spliced loss to the token loss") {
    Fixture f;
    UserIdCache users(f.bundle, f.catalog);
    std::mt19937_64 rng(21);
    const auto vocab = static_cast<Eigen::Index>(f.bundle.vocab.size());
    for (int trial = 0; trial < 50; ++trial) {
        const auto& ex = f.examples[rng() % f.examples.size()];
        auto p = prepare_example(f.bundle, f.bundle.registry, f.catalog, users, ex, f.bundle.templates.sample(rng));
        ad::Tape tape;
        Graph rec(tape, f.bundle.rec.params, false);
        std::vector<ad::Var> logits;
        for (const auto& s : p.slots) {
            Mat one_hot = Mat::Zero(static_cast<Eigen::Index>(s.id.size()), vocab);
            for (std::size_t i = 0; i < s.id.size(); ++i) one_hot(static_cast<Eigen::Index>(i), s.id[i]) = 1e3;
            logits.push_back(tape.constant(one_hot));
        }
        const double spliced = value(tape, spliced_loss(rec, p, logits));
        const double token = value(tape, recommender_loss(rec, p));
        CHECK(std::abs(spliced - token) < 1e-9);
    }
}

TEST_CASE("spliced loss rejects mismatched logits") {
    Fixture f;
    UserIdCache users(f.bundle, f.catalog);
    auto p = prepare_example(f.bundle, f.bundle.registry, f.catalog, users, f.examples[0], f.bundle.templates.at(1));
    ad::Tape tape;
    Graph rec(tape, f.bundle.rec.params, false);
    CHECK_THROWS_AS(spliced_loss(rec, p, {}), Error);
    std::vector<ad::Var> wrong(p.slots.size(), tape.constant(Mat::Zero(1, f.bundle.vocab.size())));
    wrong[0] = tape.constant(Mat::Zero(static_cast<Eigen::Index>(p.slots[0].id.size()) + 1, f.bundle.vocab.size()));
    CHECK_THROWS_AS(spliced_loss(rec, p, wrong), Error);
}

TEST_CASE("recommender and generator losses match finite differences") {
    Fixture f;
    UserIdCache users(f.bundle, f.catalog);
    auto p = prepare_example(f.bundle, f.bundle.registry, f.catalog, users, f.examples.back(), f.bundle.templates.at(1));

    SUBCASE("token path into the recommender") {
        auto& params = f.bundle.rec.params;
        ad::Tape tape;
        Graph rec(tape, params, true);
        const auto grads = rec.backward(recommender_loss(rec, p));
        auto loss = [&] {
            ad::Tape t;
            return value(t, recommender_loss(Graph(t, params, false), p));
        };
        for (auto c : oracle::sample_coords(params, 25, 3)) {
            const double numeric = oracle::central_difference(params, c, loss);
            INFO(params.names[c.tensor] << "[" << c.index << "]");
            CHECK(oracle::relative_error(grads[c.tensor].data()[c.index], numeric) < 1e-4);
        }
    }
    SUBCASE("expected-embedding path into the generator") {
        auto& params = f.bundle.idgen.params;
        ad::Tape tape;
        Graph rec(tape, f.bundle.rec.params, false);
        Graph gen(tape, params, true);
        const auto grads = gen.backward(generator_loss(rec, gen, p));
        auto loss = [&] {
            ad::Tape t;
            return value(t, generator_loss(Graph(t, f.bundle.rec.params, false), Graph(t, params, false), p));
        };
        int nonzero = 0;
        for (auto c : oracle::sample_coords(params, 25, 4)) {
            const double numeric = oracle::central_difference(params, c, loss);
            const double analytic = grads[c.tensor].data()[c.index];
            nonzero += analytic != 0.0;
            INFO(params.names[c.tensor] << "[" << c.index << "]");
            CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
        }
        CHECK(nonzero > 0);
    }
}

TEST_CASE("phases touch only their own model") {
    Fixture f;
    const auto cfg = quick_config();
    std::mt19937_64 rng(cfg.seed);

    const auto rec0 = f.bundle.rec.params.hash();
    const auto gen0 = f.bundle.idgen.params.hash();
    const auto ids0 = f.bundle.registry.to_tsv();
    train_recommender_phase(f.bundle, f.catalog, f.examples, cfg, rng);
    CHECK(f.bundle.rec.params.hash() != rec0);
    CHECK(f.bundle.idgen.params.hash() == gen0);
    CHECK(f.bundle.registry.to_tsv() == ids0);

    const auto rec1 = f.bundle.rec.params.hash();
    train_idgen_phase(f.bundle, f.catalog, f.examples, cfg, rng);
    CHECK(f.bundle.rec.params.hash() == rec1);
    CHECK(f.bundle.idgen.params.hash() != gen0);
    CHECK(f.bundle.registry.generator_hash == f.bundle.idgen.params.hash());
    CHECK_NOTHROW(f.bundle.check_registry());
}

TEST_CASE("phases refuse a stale registry") {
    Fixture f;
    std::mt19937_64 rng(1);
    f.bundle.registry.generator_hash ^= 1;
    CHECK_THROWS_AS(train_recommender_phase(f.bundle, f.catalog, f.examples, quick_config(), rng), Error);
    CHECK_THROWS_AS(train_idgen_phase(f.bundle, f.catalog, f.examples, quick_config(), rng), Error);
}

TEST_CASE("the recommender can memorize a single example") {
    Fixture f;
    auto cfg = quick_config();
    cfg.rec_epochs_per_iter = 150;
    cfg.lr_rec = 1e-2;
    cfg.batch_size = 1;
    std::mt19937_64 rng(2);
    const std::vector<Example> one{f.examples.back()};
    const auto report = train_recommender_phase(f.bundle, f.catalog, one, cfg, rng);
    CHECK(report.epoch_loss.front() > 1.0);
    CHECK(report.epoch_loss.back() < 0.05);
}

TEST_CASE("alternate training is deterministic and writes per-iteration bundles") {
    auto cfg = quick_config();
    cfg.iterations = 2;
    const auto dir_a = scratch_dir("a");
    const auto dir_b = scratch_dir("b");
    std::vector<std::uint64_t> hashes;
    for (const auto& dir : {dir_a, dir_b}) {
        Fixture f;
        const auto logs = alternate_train(f.bundle, f.split, cfg, dir);
        REQUIRE(logs.size() == 2);
        CHECK(logs[0].idgen.epoch_loss.size() == 1);
        CHECK(logs[1].rec.epoch_loss.size() == 1);
        CHECK(f.bundle.iteration == 2);
        hashes.push_back(f.bundle.rec.params.hash() ^ f.bundle.idgen.params.hash());
    }
    CHECK(hashes[0] == hashes[1]);
    for (auto sub : {"iter_1", "iter_2", "final"})
        for (auto file : {"ids.tsv", "metrics.json", "rec.ckpt", "idgen.ckpt", "bundle.json"}) {
            INFO(sub << "/" << file);
            REQUIRE(std::filesystem::exists(dir_a / sub / file));
            CHECK(slurp(dir_a / sub / file) == slurp(dir_b / sub / file));
        }
    CHECK(slurp(dir_a / "iter_2" / "ids.tsv") == slurp(dir_a / "final" / "ids.tsv"));

    SUBCASE("recommender-only ablation leaves the generator alone") {
        Fixture f;
        const auto gen0 = f.bundle.idgen.params.hash();
        auto rec_only = quick_config();
        rec_only.train_idgen = false;
        const auto logs = alternate_train(f.bundle, f.split, rec_only);
        CHECK(logs[0].idgen.epoch_loss.empty());
        CHECK(f.bundle.idgen.params.hash() == gen0);
    }
}

TEST_CASE("bundle round trip and staleness checks") {
    Fixture f;
    const auto dir = scratch_dir("bundle");
    save_bundle(f.bundle, dir);
    const auto b = load_bundle(dir);
    CHECK(b.rec.params.hash() == f.bundle.rec.params.hash());
    CHECK(b.idgen.params.hash() == f.bundle.idgen.params.hash());
    CHECK(b.registry.to_tsv() == f.bundle.registry.to_tsv());
    CHECK(b.vocab.hash() == f.bundle.vocab.hash());
    CHECK(b.templates.to_text() == f.bundle.templates.to_text());
    CHECK(b.use_user_id == f.bundle.use_user_id);
    CHECK(b.alloc.groups == f.bundle.alloc.groups);

    SUBCASE("edited registry") {
        TokenId w = kNumSpecials;
        while (f.bundle.registry.contains_text(f.bundle.vocab.token_of(w))) ++w;
        auto tsv = f.bundle.registry.to_tsv();
        const auto tab = tsv.find('\t');
        tsv.replace(tab + 1, tsv.find('\t', tab + 1) - tab - 1, f.bundle.vocab.token_of(w));
        std::ofstream(dir / "ids.tsv", std::ios::binary) << tsv;
        try {
            load_bundle(dir);
            FAIL("expected StaleRegistry");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::StaleRegistry);
        }
    }
    SUBCASE("generator changed after allocation") {
        Bundle stale = f.bundle;
        stale.idgen.params.tensors[0](0, 0) += 1.0;
        save_bundle(stale, dir);
        try {
            load_bundle(dir);
            FAIL("expected StaleRegistry");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::StaleRegistry);
        }
    }
    SUBCASE("missing bundle") {
        CHECK_THROWS_AS(load_bundle(dir / "nope"), Error);
    }
}

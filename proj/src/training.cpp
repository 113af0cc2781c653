#include "idgenrec/training.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "idgenrec/error.hpp"
#include "idgenrec/eval.hpp"
#include "idgenrec/hash.hpp"

namespace idgenrec {

using json = nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (iterations < 1 || rec_epochs_per_iter < 1 || idgen_epochs_per_iter < 1 || batch_size < 1)
        throw Error(ErrorKind::InvalidConfig, "iteration, epoch and batch counts must be >= 1");
    if (!(lr_rec > 0) || !(lr_idgen > 0)) throw Error(ErrorKind::InvalidConfig, "learning rates must be positive");
}

Catalog::Catalog(std::span<const ItemRecord> items) {
    items_.reserve(items.size());
    for (const auto& it : items) {
        if (!index_.emplace(it.item_key, items_.size()).second)
            throw Error(ErrorKind::InvalidInput, "duplicate item '" + it.item_key + "'");
        items_.push_back({it.item_key, flatten_metadata(it)});
    }
}

const std::string& Catalog::text(const std::string& item_key) const {
    auto it = index_.find(item_key);
    if (it == index_.end()) throw Error(ErrorKind::UnknownId, "item '" + item_key + "' is not in the catalog");
    return items_[it->second].text;
}

// ---------------------------------------------------------------------------

void Bundle::check_registry() const {
    if (registry.generator_hash != idgen.params.hash())
        throw Error(ErrorKind::StaleRegistry, "ID registry was not produced by the current ID generator");
    if (rec.vocab_hash != vocab.hash() || idgen.vocab_hash != vocab.hash())
        throw Error(ErrorKind::VocabularyMismatch, "model and tokenizer vocabularies differ");
}

Vocabulary build_vocabulary(const Catalog& catalog, const TemplateBank& templates) {
    constexpr int kMinFreq = 2;
    std::vector<std::string> texts;
    for (const auto& it : catalog.items()) texts.push_back(it.text);
    // Template words and the ID separator are always kept.
    for (const auto& t : templates.templates()) {
        std::string plain = t.text;
        for (auto ph : {kUserPlaceholder, kItemsPlaceholder})
            for (auto pos = plain.find(ph); pos != std::string::npos; pos = plain.find(ph)) plain.replace(pos, ph.size(), " ");
        for (int i = 0; i < kMinFreq; ++i) texts.push_back(plain + " ,");
    }
    return Vocabulary::build(texts, kMinFreq);
}

Bundle init_bundle(const Catalog& catalog, ModelConfig model, AllocatorConfig alloc, TemplateBank templates,
                   bool use_user_id, std::uint64_t seed) {
    Bundle b;
    b.templates = std::move(templates);
    b.vocab = build_vocabulary(catalog, b.templates);
    model.vocab_size = static_cast<int>(b.vocab.size());
    model.seed = seed;
    auto rec = init_params(model);
    model.seed = seed + 1;
    auto gen = init_params(model);
    b.rec = {rec, AdamState::zeros_like(rec), b.vocab.hash()};
    b.idgen = {gen, AdamState::zeros_like(gen), b.vocab.hash()};
    b.alloc = std::move(alloc);
    b.use_user_id = use_user_id;
    refresh_registry(b, catalog);
    return b;
}

void refresh_registry(Bundle& bundle, const Catalog& catalog) {
    bundle.registry = allocate_all(bundle.idgen.params, bundle.vocab, catalog.items(), bundle.alloc);
    const auto st = bundle.registry.stats();
    spdlog::info("allocated {} IDs: {} escalated, {} length-extended, {} fallback", st.items, st.escalated,
                 st.length_extended, st.fallback);
}

// ---------------------------------------------------------------------------

namespace {

json allocator_json(const AllocatorConfig& c) {
    json ranges = json::array();
    for (const auto& r : c.length_ranges) ranges.push_back({r.lo, r.hi});
    return {{"groups", c.groups},           {"beams_per_group", c.beams_per_group}, {"lambda_init", c.lambda_init},
            {"lambda_step", c.lambda_step}, {"lambda_max", c.lambda_max},           {"length_ranges", ranges},
            {"seed", c.seed},               {"strict", c.strict}};
}

AllocatorConfig allocator_from_json(const json& j) {
    AllocatorConfig c;
    c.groups = j.at("groups").get<int>();
    c.beams_per_group = j.at("beams_per_group").get<int>();
    c.lambda_init = j.at("lambda_init").get<double>();
    c.lambda_step = j.at("lambda_step").get<double>();
    c.lambda_max = j.at("lambda_max").get<double>();
    c.length_ranges.clear();
    for (const auto& r : j.at("length_ranges")) c.length_ranges.push_back({r.at(0).get<int>(), r.at(1).get<int>()});
    c.seed = j.at("seed").get<std::uint64_t>();
    c.strict = j.at("strict").get<bool>();
    c.validate();
    return c;
}

std::uint64_t parse_hex(const json& j, const char* field) {
    const auto s = j.at(field).get<std::string>();
    try {
        return std::stoull(s, nullptr, 16);
    } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidInput, std::string("bundle.json: bad ") + field);
    }
}

} // namespace

void save_bundle(const Bundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_checkpoint(bundle.rec, dir / "rec.ckpt");
    save_checkpoint(bundle.idgen, dir / "idgen.ckpt");
    bundle.registry.save_tsv(dir / "ids.tsv");
    bundle.vocab.save(dir / "vocab.tsv");
    bundle.templates.save(dir / "templates.txt");
    json j;
    j["format"] = "idgenrec-bundle";
    j["version"] = 1;
    j["iteration"] = bundle.iteration;
    j["use_user_id"] = bundle.use_user_id;
    j["vocab_hash"] = hex_digest(bundle.vocab.hash());
    j["generator_hash"] = hex_digest(bundle.registry.generator_hash);
    j["registry_hash"] = hex_digest(bundle.registry.content_hash());
    j["allocator"] = allocator_json(bundle.alloc);
    std::ofstream out(dir / "bundle.json", std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + (dir / "bundle.json").string());
    out << j.dump(2) << "\n";
}

Bundle load_bundle(const std::filesystem::path& dir) {
    const auto meta_path = dir / "bundle.json";
    std::ifstream in(meta_path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + meta_path.string());
    json j;
    try {
        j = json::parse(in);
        if (j.at("format") != "idgenrec-bundle" || j.at("version") != 1)
            throw Error(ErrorKind::InvalidInput, meta_path.string() + " is not a version 1 bundle");
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidInput, meta_path.string() + ": " + e.what());
    }

    Bundle b;
    b.vocab = Vocabulary::load(dir / "vocab.tsv");
    if (parse_hex(j, "vocab_hash") != b.vocab.hash())
        throw Error(ErrorKind::VocabularyMismatch, "vocab.tsv does not match the bundle's vocabulary hash");
    b.rec = load_checkpoint(dir / "rec.ckpt", b.vocab.hash());
    b.idgen = load_checkpoint(dir / "idgen.ckpt", b.vocab.hash());
    b.templates = TemplateBank::load(dir / "templates.txt");
    try {
        b.alloc = allocator_from_json(j.at("allocator"));
        b.iteration = j.at("iteration").get<int>();
        b.use_user_id = j.at("use_user_id").get<bool>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidInput, meta_path.string() + ": " + e.what());
    }
    b.registry = IdRegistry::load_tsv(dir / "ids.tsv", b.vocab, b.alloc);
    b.registry.generator_hash = parse_hex(j, "generator_hash");
    if (parse_hex(j, "registry_hash") != b.registry.content_hash())
        throw Error(ErrorKind::StaleRegistry, "ids.tsv was modified after the bundle was written");
    b.check_registry();
    return b;
}

// ---------------------------------------------------------------------------

std::vector<Example> training_examples(std::span<const InteractionLog> train) {
    std::vector<Example> out;
    for (const auto& log : train) {
        for (std::size_t t = 1; t < log.item_keys.size(); ++t) {
            const std::size_t from = t > kMaxPromptHistory ? t - kMaxPromptHistory : 0;
            Example ex;
            ex.user_key = log.user_key;
            ex.history.assign(log.item_keys.begin() + static_cast<std::ptrdiff_t>(from),
                              log.item_keys.begin() + static_cast<std::ptrdiff_t>(t));
            ex.target = log.item_keys[t];
            out.push_back(std::move(ex));
        }
    }
    return out;
}

namespace {

std::vector<std::string> history_texts(const Catalog& catalog, std::span<const std::string> history) {
    std::vector<std::string> texts;
    texts.reserve(history.size());
    for (const auto& k : history) texts.push_back(catalog.text(k));
    return texts;
}

} // namespace

const TextualId& UserIdCache::get(std::span<const std::string> history) {
    const auto texts = history_texts(catalog_, history);
    auto key = user_profile_text(texts);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto id = generate_user_id(bundle_.idgen.params, bundle_.vocab, texts, bundle_.alloc);
    return cache_.emplace(std::move(key), std::move(id)).first->second;
}

TokenSequence UserIdCache::source(std::span<const std::string> history) const {
    return generator_source(bundle_.idgen.params, bundle_.vocab, user_profile_text(history_texts(catalog_, history)));
}

PreparedExample prepare_example(const Bundle& bundle, const IdRegistry& registry, const Catalog& catalog,
                                UserIdCache& users, const Example& ex, const Template& tmpl) {
    std::vector<TextualId> ids;
    ids.reserve(ex.history.size());
    for (const auto& k : ex.history) ids.push_back(registry.at(k).id);

    PreparedExample out;
    const auto max_src = static_cast<std::size_t>(bundle.rec.params.config.max_src_len);
    const TextualId* user = nullptr;
    if (bundle.use_user_id && tmpl.has_user()) {
        user = &users.get(ex.history);
        out.prompt = render_prompt(tmpl, bundle.vocab, user, ids, max_src);
    } else {
        out.prompt = render_prompt(tmpl.without_user(), bundle.vocab, nullptr, ids, max_src);
    }

    for (std::size_t s = 0; s < out.prompt.spans.size(); ++s) {
        const auto& span = out.prompt.spans[s];
        IdSlot slot;
        slot.span = s;
        if (span.role == SpanRole::User) {
            slot.source = users.source(ex.history);
            slot.id = user->tokens;
        } else {
            const auto& key = ex.history[span.index];
            slot.source = generator_source(bundle.idgen.params, bundle.vocab, catalog.text(key));
            slot.id = ids[span.index].tokens;
        }
        out.slots.push_back(std::move(slot));
    }
    out.target = registry.at(ex.target).id.tokens;
    out.target.push_back(kEos);
    return out;
}

ad::Var recommender_loss(const Graph& rec, const PreparedExample& ex) {
    return rec.sequence_nll(rec.encode(ex.prompt.tokens), ex.target);
}

ad::Var slot_logits(const Graph& gen, const IdSlot& slot) {
    return gen.decode(gen.encode(slot.source), shift_right(slot.id));
}

ad::Var spliced_loss(const Graph& rec, const PreparedExample& ex, std::span<const ad::Var> logits) {
    if (logits.size() != ex.slots.size()) throw Error(ErrorKind::ShapeMismatch, "one logits block per ID slot expected");
    auto& tape = rec.tape();
    auto prompt = rec.embed(ex.prompt.tokens);
    for (std::size_t i = 0; i < ex.slots.size(); ++i) {
        const auto& span = ex.prompt.spans[ex.slots[i].span];
        if (tape.value(logits[i]).rows() != static_cast<Eigen::Index>(span.size()))
            throw Error(ErrorKind::ShapeMismatch, "slot logits rows differ from the span length");
        auto soft = expected_embeddings(tape, logits[i], rec.embedding());
        prompt = tape.splice_rows(prompt, soft, static_cast<Eigen::Index>(span.start));
    }
    return rec.sequence_nll(rec.encode_embeddings(prompt), ex.target);
}

ad::Var generator_loss(const Graph& rec, const Graph& gen, const PreparedExample& ex) {
    std::vector<ad::Var> logits;
    logits.reserve(ex.slots.size());
    for (const auto& slot : ex.slots) logits.push_back(slot_logits(gen, slot));
    return spliced_loss(rec, ex, logits);
}

// ---------------------------------------------------------------------------

namespace {

// Shuffled mini-batches with summed gradients averaged per batch.
template <typename StepFn>
PhaseReport run_epochs(const char* phase, int epochs, std::size_t count, int batch_size, std::mt19937_64& rng,
                       ModelParams& params, AdamState& adam, double lr, StepFn&& step) {
    PhaseReport report;
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t tokens = 0;
        for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end = std::min(count, start + static_cast<std::size_t>(batch_size));
            Gradients grads = zero_gradients(params);
            for (std::size_t i = start; i < end; ++i) {
                auto [loss, n_tokens, g] = step(order[i]);
                loss_sum += loss;
                tokens += n_tokens;
                accumulate(grads, g);
            }
            const double scale = 1.0 / static_cast<double>(end - start);
            for (auto& g : grads) g *= scale;
            apply_update(params, grads, adam, lr);
        }
        const double mean = tokens ? loss_sum / static_cast<double>(tokens) : 0.0;
        report.epoch_loss.push_back(mean);
        spdlog::info("{} epoch {}/{}: loss {:.6f} nats/token", phase, epoch + 1, epochs, mean);
    }
    return report;
}

struct StepResult {
    double loss;
    std::size_t tokens;
    Gradients grads;
};

} // namespace

PhaseReport train_recommender_phase(Bundle& bundle, const Catalog& catalog, std::span<const Example> examples,
                                    const TrainConfig& config, std::mt19937_64& rng) {
    config.validate();
    bundle.check_registry();
    if (examples.empty()) throw Error(ErrorKind::InvalidInput, "no training examples");
    UserIdCache users(bundle, catalog);
    return run_epochs("recommender", config.rec_epochs_per_iter, examples.size(), config.batch_size, rng,
                      bundle.rec.params, bundle.rec.adam, config.lr_rec, [&](std::size_t i) {
                          const auto& tmpl = bundle.templates.sample(rng);
                          auto ex = prepare_example(bundle, bundle.registry, catalog, users, examples[i], tmpl);
                          ad::Tape tape;
                          Graph rec(tape, bundle.rec.params, true);
                          auto loss = recommender_loss(rec, ex);
                          return StepResult{tape.value(loss)(0, 0), ex.target.size(), rec.backward(loss)};
                      });
}

PhaseReport train_idgen_phase(Bundle& bundle, const Catalog& catalog, std::span<const Example> examples,
                              const TrainConfig& config, std::mt19937_64& rng) {
    config.validate();
    bundle.check_registry();
    if (examples.empty()) throw Error(ErrorKind::InvalidInput, "no training examples");
    // User IDs belong to the snapshot, so generate them all before any update.
    UserIdCache users(bundle, catalog);
    if (bundle.use_user_id)
        for (const auto& ex : examples) users.get(ex.history);

    auto report = run_epochs("id-generator", config.idgen_epochs_per_iter, examples.size(), config.batch_size, rng,
                             bundle.idgen.params, bundle.idgen.adam, config.lr_idgen, [&](std::size_t i) {
                                 const auto& tmpl = bundle.templates.sample(rng);
                                 auto ex = prepare_example(bundle, bundle.registry, catalog, users, examples[i], tmpl);
                                 ad::Tape tape;
                                 Graph rec(tape, bundle.rec.params, false);
                                 Graph gen(tape, bundle.idgen.params, true);
                                 auto loss = generator_loss(rec, gen, ex);
                                 return StepResult{tape.value(loss)(0, 0), ex.target.size(), gen.backward(loss)};
                             });
    refresh_registry(bundle, catalog);
    return report;
}

namespace {

json phase_json(const PhaseReport& r) { return json(r.epoch_loss); }

void save_iteration(const Bundle& bundle, const IterationLog& log, const EvalReport& valid,
                    const std::filesystem::path& dir) {
    save_bundle(bundle, dir);
    json j;
    j["iteration"] = log.iteration;
    j["idgen_loss"] = phase_json(log.idgen);
    j["rec_loss"] = phase_json(log.rec);
    j["allocation"] = {{"items", log.allocation.items},
                       {"escalated", log.allocation.escalated},
                       {"length_extended", log.allocation.length_extended},
                       {"fallback", log.allocation.fallback},
                       {"escalated_fraction", log.allocation.escalated_fraction()},
                       {"extended_fraction", log.allocation.extended_fraction()}};
    j["valid"] = json::parse(to_json(valid));
    std::ofstream out(dir / "metrics.json", std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + (dir / "metrics.json").string());
    out << j.dump(2) << "\n";
}

} // namespace

std::vector<IterationLog> alternate_train(Bundle& bundle, const SplitDataset& data, const TrainConfig& config,
                                          const std::optional<std::filesystem::path>& out_dir) {
    config.validate();
    const Catalog catalog(data.items);
    const auto examples = training_examples(data.train);
    std::mt19937_64 rng(config.seed);
    bundle.use_user_id = config.use_user_id;
    if (bundle.registry.generator_hash != bundle.idgen.params.hash() || bundle.registry.size() != catalog.items().size())
        refresh_registry(bundle, catalog);

    std::vector<IterationLog> logs;
    EvalReport valid;
    for (int it = 1; it <= config.iterations; ++it) {
        IterationLog log;
        log.iteration = it;
        if (config.train_idgen) log.idgen = train_idgen_phase(bundle, catalog, examples, config, rng);
        log.rec = train_recommender_phase(bundle, catalog, examples, config, rng);
        log.allocation = bundle.registry.stats();
        bundle.iteration = it;
        valid = evaluate(bundle, catalog, bundle.registry, data.valid, data.name);
        log.valid_hr10 = valid.hr10;
        log.valid_ndcg10 = valid.ndcg10;
        spdlog::info("iteration {}: valid HR@10 {:.4f} NDCG@10 {:.4f}", it, valid.hr10, valid.ndcg10);
        if (out_dir) save_iteration(bundle, log, valid, *out_dir / ("iter_" + std::to_string(it)));
        logs.push_back(std::move(log));
    }
    if (out_dir) save_iteration(bundle, logs.back(), valid, *out_dir / "final");
    return logs;
}

} // namespace idgenrec

#include "idgenrec/allocator.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "idgenrec/error.hpp"
#include "idgenrec/hash.hpp"

namespace idgenrec {

void AllocatorConfig::validate() const {
    if (groups < 1 || beams_per_group < 1) throw Error(ErrorKind::InvalidConfig, "groups and beams_per_group must be >= 1");
    if (lambda_init < 0 || lambda_init > lambda_max) throw Error(ErrorKind::InvalidConfig, "need 0 <= lambda_init <= lambda_max");
    if (lambda_step <= 0) throw Error(ErrorKind::InvalidConfig, "lambda_step must be positive");
    if (length_ranges.empty()) throw Error(ErrorKind::InvalidConfig, "at least one length range is required");
    int prev_hi = 0;
    for (const auto& r : length_ranges) {
        if (r.lo < 1 || r.max_len() < r.lo)
            throw Error(ErrorKind::InvalidConfig, "length range [lo, hi) needs 1 <= lo <= hi - 1");
        if (r.lo < prev_hi) throw Error(ErrorKind::InvalidConfig, "length ranges must be increasing and disjoint");
        prev_hi = r.hi;
    }
}

// ---------------------------------------------------------------------------

GeneratorScorer::GeneratorScorer(const ModelParams& params, std::span<const TokenId> src)
    : params_(params), state_(encode(params, src)) {}

Eigen::VectorXd GeneratorScorer::log_probs(std::span<const TokenId> prefix) {
    TokenSequence key(prefix.begin(), prefix.end());
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto lp = log_softmax(decoder_logits(params_, state_, prefix));
    cache_.emplace(std::move(key), lp);
    return lp;
}

namespace {

struct Hypothesis {
    TokenSequence tokens;
    double score = 0.0;
    bool ended_with_eos = false;
};

bool better(const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
}

} // namespace

std::vector<TokenSequence> diverse_beam_search(NextTokenModel& model, int groups, int beams_per_group, double lambda,
                                               LengthRange range) {
    if (groups < 1 || beams_per_group < 1) throw Error(ErrorKind::InvalidConfig, "groups and beams must be >= 1");
    if (lambda < 0) throw Error(ErrorKind::InvalidConfig, "lambda must be >= 0");
    const int max_len = range.max_len();
    if (max_len < 1 || range.lo > max_len) throw Error(ErrorKind::InvalidConfig, "empty length range");

    // usage[t][token]: how often earlier groups picked `token` at step t
    std::vector<std::unordered_map<TokenId, int>> usage(static_cast<std::size_t>(max_len));
    std::vector<TokenSequence> out;
    out.reserve(static_cast<std::size_t>(groups));

    for (int g = 0; g < groups; ++g) {
        std::vector<Hypothesis> live{Hypothesis{}};
        std::vector<Hypothesis> finished;
        std::vector<std::vector<TokenId>> picked(static_cast<std::size_t>(max_len));

        for (int t = 0; t < max_len && !live.empty(); ++t) {
            const auto& used = usage[static_cast<std::size_t>(t)];
            std::vector<Hypothesis> cand;
            for (const auto& h : live) {
                const Eigen::VectorXd lp = model.log_probs(h.tokens);
                for (TokenId v = 0; v < static_cast<TokenId>(lp.size()); ++v) {
                    if (v == kPad || v == kUnk) continue;
                    if (v == kEos && t < range.lo) continue;
                    double s = h.score + lp[v];
                    if (auto u = used.find(v); u != used.end()) s -= lambda * u->second;
                    Hypothesis n{h.tokens, s, v == kEos};
                    n.tokens.push_back(v);
                    cand.push_back(std::move(n));
                }
            }
            std::sort(cand.begin(), cand.end(), better);

            // A hypothesis reaching max_len finishes without EOS but still takes a beam slot.
            std::vector<Hypothesis> next;
            int slots = 0;
            for (std::size_t rank = 0; rank < cand.size() && slots < beams_per_group; ++rank) {
                auto& c = cand[rank];
                if (c.ended_with_eos) {
                    if (rank < static_cast<std::size_t>(beams_per_group)) {
                        picked[static_cast<std::size_t>(t)].push_back(kEos);
                        c.tokens.pop_back();
                        finished.push_back(std::move(c));
                    }
                    continue;
                }
                picked[static_cast<std::size_t>(t)].push_back(c.tokens.back());
                ++slots;
                if (static_cast<int>(c.tokens.size()) == max_len)
                    finished.push_back(std::move(c));
                else
                    next.push_back(std::move(c));
            }
            live = std::move(next);
        }

        for (int t = 0; t < max_len; ++t)
            for (TokenId v : picked[static_cast<std::size_t>(t)]) ++usage[static_cast<std::size_t>(t)][v];

        if (finished.empty()) {
            out.emplace_back();
            continue;
        }
        out.push_back(std::min_element(finished.begin(), finished.end(), better)->tokens);
    }
    return out;
}

// ---------------------------------------------------------------------------

void IdRegistry::add(IdAssignment entry) {
    if (by_item_.count(entry.item_key)) throw Error(ErrorKind::DuplicateId, "item '" + entry.item_key + "' already has an ID");
    if (texts_.count(entry.id.text)) throw Error(ErrorKind::DuplicateId, "ID '" + entry.id.text + "' already assigned");
    by_item_.emplace(entry.item_key, entries_.size());
    texts_.insert(entry.id.text);
    entries_.push_back(std::move(entry));
}

const IdAssignment* IdRegistry::find(const std::string& item_key) const {
    auto it = by_item_.find(item_key);
    return it == by_item_.end() ? nullptr : &entries_[it->second];
}

const IdAssignment& IdRegistry::at(const std::string& item_key) const {
    if (const auto* e = find(item_key)) return *e;
    throw Error(ErrorKind::UnknownId, "no ID registered for item '" + item_key + "'");
}

AllocationStats IdRegistry::stats() const {
    AllocationStats s;
    s.items = entries_.size();
    const int ranges = static_cast<int>(config_.length_ranges.size());
    for (const auto& e : entries_) {
        if (e.range_index >= ranges) ++s.fallback;
        if (e.range_index > 0) ++s.length_extended;
        if (e.range_index > 0 || e.lambda > config_.lambda_init) ++s.escalated;
    }
    return s;
}

std::uint64_t IdRegistry::content_hash() const {
    Fnv1a h;
    for (const auto& e : entries_) {
        h.update(e.item_key);
        h.update(e.id.text);
    }
    return h.digest();
}

namespace {

std::string format_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

} // namespace

std::string IdRegistry::to_tsv() const {
    std::string out;
    for (const auto& e : entries_) {
        out += e.item_key;
        out += '\t';
        out += e.id.text;
        out += '\t';
        out += format_real(e.lambda);
        out += '\t';
        out += std::to_string(e.range_index);
        out += '\n';
    }
    return out;
}

void IdRegistry::save_tsv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << to_tsv();
}

IdRegistry IdRegistry::from_tsv(std::string_view contents, const Vocabulary& vocab, const AllocatorConfig& config) {
    IdRegistry reg(config);
    std::istringstream in{std::string(contents)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
            f.push_back(line.substr(start, tab - start));
        f.push_back(line.substr(start));
        if (f.size() != 4) throw Error(ErrorKind::InvalidInput, "ids.tsv line " + std::to_string(lineno) + ": expected 4 fields");
        IdAssignment e;
        e.item_key = f[0];
        e.id.tokens = vocab.encode(f[1], f[1].size() + 1);
        e.id.text = vocab.decode(e.id.tokens);
        if (e.id.text != f[1] || std::count(e.id.tokens.begin(), e.id.tokens.end(), kUnk))
            throw Error(ErrorKind::VocabularyMismatch, "ids.tsv line " + std::to_string(lineno) + ": ID '" + f[1] +
                                                           "' is not expressible in this vocabulary");
        double lambda = 0;
        auto r = std::from_chars(f[2].data(), f[2].data() + f[2].size(), lambda);
        if (r.ec != std::errc{}) throw Error(ErrorKind::InvalidInput, "ids.tsv line " + std::to_string(lineno) + ": bad lambda");
        e.lambda = lambda;
        e.range_index = std::stoi(f[3]);
        reg.add(std::move(e));
    }
    return reg;
}

IdRegistry IdRegistry::load_tsv(const std::filesystem::path& path, const Vocabulary& vocab, const AllocatorConfig& config) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_tsv(ss.str(), vocab, config);
}

// ---------------------------------------------------------------------------

TokenSequence generator_source(const ModelParams& generator, const Vocabulary& vocab, std::string_view text) {
    return vocab.encode(text, static_cast<std::size_t>(generator.config.max_src_len));
}

std::string user_profile_text(std::span<const std::string> history_texts) {
    std::string joined;
    for (const auto& t : history_texts) {
        if (!joined.empty()) joined += "; ";
        joined += t;
    }
    return joined;
}

namespace {

// Ordinal suffix in base (vocab - specials) over non-special tokens.
TokenSequence ordinal_tokens(std::size_t n, std::size_t vocab_size) {
    const std::size_t base = vocab_size - static_cast<std::size_t>(kNumSpecials);
    if (base == 1) return TokenSequence(n + 1, kNumSpecials);
    TokenSequence digits;
    do {
        digits.push_back(static_cast<TokenId>(kNumSpecials + static_cast<TokenId>(n % base)));
        n /= base;
    } while (n > 0);
    std::reverse(digits.begin(), digits.end());
    return digits;
}

} // namespace

IdRegistry allocate_all(const ModelParams& generator, const Vocabulary& vocab, std::span<const ItemText> items,
                        const AllocatorConfig& config) {
    if (vocab.size() != static_cast<std::size_t>(generator.config.vocab_size))
        throw Error(ErrorKind::VocabularyMismatch, "generator vocabulary size differs from tokenizer");
    auto reg = allocate_all([&](const TokenSequence& src) { return std::make_unique<GeneratorScorer>(generator, src); },
                            vocab, items, config, static_cast<std::size_t>(generator.config.max_src_len));
    reg.generator_hash = generator.hash();
    return reg;
}

IdRegistry allocate_all(const ScorerFactory& make_scorer, const Vocabulary& vocab, std::span<const ItemText> items,
                        const AllocatorConfig& config, std::size_t max_src_len) {
    config.validate();
    if (items.empty()) throw Error(ErrorKind::InvalidInput, "allocate_all needs at least one item");
    if (vocab.size() <= static_cast<std::size_t>(kNumSpecials))
        throw Error(ErrorKind::InvalidConfig, "vocabulary has no ordinary tokens to build IDs from");

    IdRegistry reg(config);


    // Identical sources produce identical candidate lists, so both the decoder
    // scorers and the per-(lambda, range) candidate lists are shared.
    struct SourceCache {
        std::unique_ptr<NextTokenModel> scorer;
        std::map<std::pair<double, int>, std::vector<TokenSequence>> candidates;
    };
    std::map<TokenSequence, SourceCache> caches;

    for (std::size_t pos = 0; pos < items.size(); ++pos) {
        const auto& item = items[pos];
        const auto src = vocab.encode(item.text, max_src_len);
        auto cit = caches.find(src);
        if (cit == caches.end()) {
            // Bound memory on very large catalogs.
            if (caches.size() >= 4096) caches.clear();
            cit = caches.emplace(src, SourceCache{make_scorer(src), {}}).first;
        }
        auto& sc = cit->second;

        double lambda = config.lambda_init;
        std::size_t range = 0;
        std::vector<TokenSequence> last;
        bool found = false;
        while (!found) {
            auto key = std::pair{lambda, static_cast<int>(range)};
            auto it = sc.candidates.find(key);
            if (it == sc.candidates.end())
                it = sc.candidates
                         .emplace(key, diverse_beam_search(*sc.scorer, config.groups, config.beams_per_group, lambda,
                                                           config.length_ranges[range]))
                         .first;
            last = it->second;
            for (const auto& cand : it->second) {
                if (cand.empty()) continue;
                auto text = vocab.decode(cand);
                if (reg.contains_text(text)) continue;
                reg.add({item.item_key, {cand, std::move(text)}, lambda, static_cast<int>(range)});
                found = true;
                break;
            }
            if (found) break;
            lambda += config.lambda_step;
            if (lambda > config.lambda_max) {
                ++range;
                lambda = config.lambda_init;
                if (range == config.length_ranges.size()) break;
            }
        }
        if (found) continue;

        if (config.strict)
            throw Error(ErrorKind::IdSpaceExhausted, "no unique ID for item '" + item.item_key + "' within all ranges");
        TokenSequence base = last.empty() ? TokenSequence{} : last.front();
        const auto& final_range = config.length_ranges.back();
        for (std::size_t salt = pos;; salt += items.size()) {
            auto suffix = ordinal_tokens(salt, vocab.size());
            TokenSequence id = base;
            const auto room = static_cast<std::size_t>(std::max(final_range.max_len(), 1));
            if (id.size() + suffix.size() > room) id.resize(room > suffix.size() ? room - suffix.size() : 0);
            id.insert(id.end(), suffix.begin(), suffix.end());
            auto text = vocab.decode(id);
            if (reg.contains_text(text)) continue;
            spdlog::warn("ID space exhausted for item '{}'; using ordinal fallback '{}'", item.item_key, text);
            reg.add({item.item_key, {id, std::move(text)}, config.lambda_max, static_cast<int>(config.length_ranges.size())});
            break;
        }
    }
    return reg;
}

TextualId generate_user_id(const ModelParams& generator, const Vocabulary& vocab,
                           std::span<const std::string> history_texts, const AllocatorConfig& config) {
    if (history_texts.empty()) throw Error(ErrorKind::EmptyHistory, "user ID needs a non-empty history");
    const auto src = generator_source(generator, vocab, user_profile_text(history_texts));
    GeneratorScorer scorer(generator, src);
    auto ids = diverse_beam_search(scorer, 1, config.beams_per_group, 0.0, config.length_ranges.front());
    TextualId out{ids.front(), {}};
    out.text = vocab.decode(out.tokens);
    return out;
}

} // namespace idgenrec

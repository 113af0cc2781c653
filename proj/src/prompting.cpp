#include "idgenrec/prompting.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "idgenrec/error.hpp"

namespace idgenrec {

namespace {

std::size_t count_of(std::string_view text, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
    return n;
}

void validate_template(const Template& t) {
    if (count_of(t.text, kItemsPlaceholder) != 1)
        throw Error(ErrorKind::InvalidConfig, "template " + std::to_string(t.id) + " must contain {item_ids} exactly once");
    if (count_of(t.text, kUserPlaceholder) > 1)
        throw Error(ErrorKind::InvalidConfig, "template " + std::to_string(t.id) + " contains {user_id} more than once");
}

const char* const kDefaultTemplates[] = {
    "user {user_id} has purchased items {item_ids} ; predict the next possible item to be bought by the user",
    "here is the purchase history of user {user_id} : {item_ids} ; what will the user buy next",
    "user {user_id} has bought {item_ids} ; which item will the user buy next",
    "given the items {item_ids} bought by user {user_id} , predict the next item",
    "user {user_id} purchased {item_ids} in this order ; recommend the next item for the user",
    "the shopping record of user {user_id} is {item_ids} ; guess the next item",
    "according to the history {item_ids} of user {user_id} , what is the next item",
    "items purchased so far : {item_ids} ; predict the next item",
    "a user bought {item_ids} ; what will be bought next",
    "purchase sequence {item_ids} ; recommend the next possible item",
};

} // namespace

Template Template::without_user() const {
    Template out{id, text};
    auto pos = out.text.find(kUserPlaceholder);
    if (pos == std::string::npos) return out;
    out.text.erase(pos, kUserPlaceholder.size());
    std::string collapsed;
    for (char c : out.text)
        if (!(c == ' ' && (collapsed.empty() || collapsed.back() == ' '))) collapsed.push_back(c);
    while (!collapsed.empty() && collapsed.back() == ' ') collapsed.pop_back();
    out.text = std::move(collapsed);
    return out;
}

TemplateBank::TemplateBank(std::vector<Template> templates) : templates_(std::move(templates)) {
    if (templates_.size() != kSize)
        throw Error(ErrorKind::InvalidConfig,
                    "template bank needs exactly " + std::to_string(kSize) + " templates, got " + std::to_string(templates_.size()));
    std::sort(templates_.begin(), templates_.end(), [](const Template& a, const Template& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < templates_.size(); ++i) {
        if (templates_[i].id != static_cast<int>(i) + 1)
            throw Error(ErrorKind::InvalidConfig, "template ids must be 1..10 without gaps or repeats");
        validate_template(templates_[i]);
    }
}

TemplateBank TemplateBank::default_bank() {
    std::vector<Template> t;
    int id = 1;
    for (const char* text : kDefaultTemplates) t.push_back({id++, text});
    return TemplateBank(std::move(t));
}

TemplateBank TemplateBank::from_text(std::string_view contents) {
    std::vector<Template> t;
    std::istringstream in{std::string(contents)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw Error(ErrorKind::InvalidInput, "templates line " + std::to_string(lineno) + ": expected id<TAB>text");
        Template tmpl;
        try {
            tmpl.id = std::stoi(line.substr(0, tab));
        } catch (const std::exception&) {
            throw Error(ErrorKind::InvalidInput, "templates line " + std::to_string(lineno) + ": bad id");
        }
        tmpl.text = line.substr(tab + 1);
        t.push_back(std::move(tmpl));
    }
    return TemplateBank(std::move(t));
}

TemplateBank TemplateBank::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

std::string TemplateBank::to_text() const {
    std::string out;
    for (const auto& t : templates_) out += std::to_string(t.id) + "\t" + t.text + "\n";
    return out;
}

void TemplateBank::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << to_text();
}

const Template& TemplateBank::sample(std::mt19937_64& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, templates_.size() - 1);
    return templates_[pick(rng)];
}

const Template& TemplateBank::at(int id) const {
    if (id < 1 || id > static_cast<int>(templates_.size()))
        throw Error(ErrorKind::InvalidConfig, "no template with id " + std::to_string(id));
    return templates_[static_cast<std::size_t>(id - 1)];
}

Prompt render_prompt(const Template& tmpl, const Vocabulary& vocab, const TextualId* user_id,
                     std::span<const TextualId> item_ids, std::size_t max_len) {
    validate_template(tmpl);
    if (item_ids.empty()) throw Error(ErrorKind::EmptyHistory, "prompt needs at least one history item");
    const bool wants_user = tmpl.has_user();
    if (wants_user && user_id == nullptr)
        throw Error(ErrorKind::MissingUserId, "template " + std::to_string(tmpl.id) + " needs a user ID");

    // Literal segments around the placeholders, in template order.
    struct Piece {
        TokenSequence literal;
        enum { Literal, User, Items } kind = Literal;
    };
    std::vector<Piece> pieces;
    std::string_view rest = tmpl.text;
    while (!rest.empty()) {
        auto u = wants_user ? rest.find(kUserPlaceholder) : std::string_view::npos;
        auto i = rest.find(kItemsPlaceholder);
        auto next = std::min(u, i);
        pieces.push_back({vocab.encode(rest.substr(0, next), rest.size()), Piece::Literal});
        if (next == std::string_view::npos) break;
        if (next == u) {
            pieces.push_back({{}, Piece::User});
            rest.remove_prefix(next + kUserPlaceholder.size());
        } else {
            pieces.push_back({{}, Piece::Items});
            rest.remove_prefix(next + kItemsPlaceholder.size());
        }
    }

    std::size_t fixed = 0;
    for (const auto& p : pieces) fixed += p.literal.size();
    if (wants_user) fixed += user_id->tokens.size();

    std::size_t first = item_ids.size() > kMaxPromptHistory ? item_ids.size() - kMaxPromptHistory : 0;
    auto items_cost = [&](std::size_t from) {
        std::size_t n = item_ids.size() - from - 1; // separators
        for (std::size_t k = from; k < item_ids.size(); ++k) n += item_ids[k].tokens.size();
        return n;
    };
    while (first < item_ids.size() && fixed + items_cost(first) > max_len) ++first;
    if (first == item_ids.size())
        throw Error(ErrorKind::SequenceTooLong, "prompt exceeds " + std::to_string(max_len) + " tokens even with one history item");

    const TokenId comma = vocab.id_of(",");
    Prompt out;
    auto append_id = [&](const TextualId& id, SpanRole role, std::size_t index) {
        Span s{role, index, out.tokens.size(), 0};
        out.tokens.insert(out.tokens.end(), id.tokens.begin(), id.tokens.end());
        s.end = out.tokens.size();
        out.spans.push_back(s);
    };
    for (const auto& p : pieces) {
        switch (p.kind) {
        case Piece::Literal:
            out.tokens.insert(out.tokens.end(), p.literal.begin(), p.literal.end());
            break;
        case Piece::User:
            append_id(*user_id, SpanRole::User, 0);
            break;
        case Piece::Items:
            for (std::size_t k = first; k < item_ids.size(); ++k) {
                if (k > first) out.tokens.push_back(comma);
                append_id(item_ids[k], SpanRole::History, k);
            }
            break;
        }
    }
    return out;
}

} // namespace idgenrec

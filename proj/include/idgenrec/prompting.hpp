#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "idgenrec/allocator.hpp"
#include "idgenrec/tokenizer.hpp"

namespace idgenrec {

inline constexpr std::string_view kUserPlaceholder = "{user_id}";
inline constexpr std::string_view kItemsPlaceholder = "{item_ids}";

/// Most recent history items kept in a prompt.
inline constexpr std::size_t kMaxPromptHistory = 20;

struct Template {
    int id = 0;
    std::string text;

    bool has_user() const { return text.find(kUserPlaceholder) != std::string::npos; }
    /// The same template with the user placeholder removed.
    Template without_user() const;
};

class TemplateBank {
public:
    static constexpr std::size_t kSize = 10;

    static TemplateBank default_bank();
    /// `id<TAB>text` per line. Exactly ten templates with ids 1..10.
    static TemplateBank from_text(std::string_view contents);
    static TemplateBank load(const std::filesystem::path& path);

    std::string to_text() const;
    void save(const std::filesystem::path& path) const;

    const Template& sample(std::mt19937_64& rng) const;
    const Template& at(int id) const;
    const std::vector<Template>& templates() const { return templates_; }

private:
    explicit TemplateBank(std::vector<Template> templates);
    std::vector<Template> templates_;
};

enum class SpanRole { User, History, Target };

struct Span {
    SpanRole role = SpanRole::History;
    /// Position in the caller's item list for History spans, 0 otherwise.
    std::size_t index = 0;
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - start; }
    friend bool operator==(const Span&, const Span&) = default;
};

struct Prompt {
    TokenSequence tokens;
    std::vector<Span> spans;
};

/// Interpolates the IDs into the template. Only the most recent
/// kMaxPromptHistory items are used, and the oldest are dropped whole until
/// the prompt fits `max_len` tokens.
Prompt render_prompt(const Template& tmpl, const Vocabulary& vocab, const TextualId* user_id,
                     std::span<const TextualId> item_ids, std::size_t max_len);

} // namespace idgenrec

#include "idgenrec/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "idgenrec/corpus.hpp"
#include "idgenrec/eval.hpp"
#include "idgenrec/synth.hpp"

namespace idgenrec {

using json = nlohmann::ordered_json;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::StaleRegistry:
    case ErrorKind::VocabularyMismatch:
    case ErrorKind::TargetMissing:
    case ErrorKind::IdSpaceExhausted:
        return kExitState;
    case ErrorKind::InvalidTokenId:
    case ErrorKind::ShapeMismatch:
    case ErrorKind::DuplicateId:
    case ErrorKind::DeadEnd:
        return kExitInternal;
    default:
        return kExitInput;
    }
}

namespace {

template <typename T>
void read_field(const json& section, const char* key, T& into) {
    if (section.contains(key)) into = section.at(key).get<T>();
}

void reject_unknown(const json& section, const std::string& name, std::initializer_list<const char*> known) {
    if (!section.is_object()) throw Error(ErrorKind::InvalidConfig, "config section '" + name + "' must be an object");
    for (const auto& [key, _] : section.items())
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
            throw Error(ErrorKind::InvalidConfig, "unknown config key '" + name + "." + key + "'");
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidInput, path.string() + ": " + e.what());
    }
}

} // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
    const auto j = read_json(path);
    RunConfig c;
    try {
        reject_unknown(j, "config", {"model", "train", "allocator"});
        if (j.contains("model")) {
            const auto& m = j.at("model");
            reject_unknown(m, "model", {"d_model", "layers", "heads", "ff_dim", "max_src_len", "max_tgt_len"});
            read_field(m, "d_model", c.model.d_model);
            read_field(m, "layers", c.model.layers);
            read_field(m, "heads", c.model.heads);
            read_field(m, "ff_dim", c.model.ff_dim);
            read_field(m, "max_src_len", c.model.max_src_len);
            read_field(m, "max_tgt_len", c.model.max_tgt_len);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            reject_unknown(t, "train",
                           {"iterations", "rec_epochs", "idgen_epochs", "lr_rec", "lr_idgen", "batch_size", "train_idgen"});
            read_field(t, "iterations", c.train.iterations);
            read_field(t, "rec_epochs", c.train.rec_epochs_per_iter);
            read_field(t, "idgen_epochs", c.train.idgen_epochs_per_iter);
            read_field(t, "lr_rec", c.train.lr_rec);
            read_field(t, "lr_idgen", c.train.lr_idgen);
            read_field(t, "batch_size", c.train.batch_size);
            read_field(t, "train_idgen", c.train.train_idgen);
        }
        if (j.contains("allocator")) {
            const auto& a = j.at("allocator");
            reject_unknown(a, "allocator",
                           {"groups", "beams_per_group", "lambda_init", "lambda_step", "lambda_max", "length_ranges", "strict"});
            read_field(a, "groups", c.alloc.groups);
            read_field(a, "beams_per_group", c.alloc.beams_per_group);
            read_field(a, "lambda_init", c.alloc.lambda_init);
            read_field(a, "lambda_step", c.alloc.lambda_step);
            read_field(a, "lambda_max", c.alloc.lambda_max);
            read_field(a, "strict", c.alloc.strict);
            if (a.contains("length_ranges")) {
                c.alloc.length_ranges.clear();
                for (const auto& r : a.at("length_ranges")) c.alloc.length_ranges.push_back({r.at(0).get<int>(), r.at(1).get<int>()});
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
    }
    c.train.validate();
    c.alloc.validate();
    return c;
}

namespace {

struct Options {
    std::string data;
    std::string out;
    std::string config;
    std::string templates;
    std::string bundle;
    std::optional<std::uint64_t> seed;
    bool no_user_id = false;

    // synth
    std::string pattern = "cyclic";
    SynthSpec synth;

    // ingest
    int k = 5;
    std::string name;

    // eval / zeroshot
    std::optional<int> beam;
    bool exact = false;
    bool unnormalized = false;
    std::string split = "test";
    int template_id = 1;
};

RunConfig run_config(const Options& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
    if (o.seed) {
        c.model.seed = *o.seed;
        c.train.seed = *o.seed;
        c.alloc.seed = *o.seed;
    }
    if (o.no_user_id) c.train.use_user_id = false;
    return c;
}

TemplateBank template_bank(const Options& o) {
    return o.templates.empty() ? TemplateBank::default_bank() : TemplateBank::load(o.templates);
}

Bundle fresh_bundle(const Options& o, const RunConfig& c, const Catalog& catalog) {
    return init_bundle(catalog, c.model, c.alloc, template_bank(o), c.train.use_user_id, c.model.seed);
}

void print_stats(std::ostream& out, const AllocationStats& st) {
    out << "items " << st.items << ", escalated " << st.escalated << " (" << st.escalated_fraction() << "), length-extended "
        << st.length_extended << " (" << st.extended_fraction() << "), fallback " << st.fallback << "\n";
}

void print_report(std::ostream& out, const EvalReport& r) {
    out << r.dataset << " (" << r.users << " users): HR@5 " << r.hr5 << " HR@10 " << r.hr10 << " NDCG@5 " << r.ndcg5
        << " NDCG@10 " << r.ndcg10 << "\n";
}

void cmd_synth(const Options& o, std::ostream& out) {
    auto spec = o.synth;
    spec.pattern = parse_synth_pattern(o.pattern);
    if (o.seed) spec.seed = *o.seed;
    const auto ds = synthesize(spec);
    save_dataset(ds, o.out);
    out << "wrote " << ds.logs.size() << " users and " << ds.items.size() << " items to " << o.out << "\n";
}

void cmd_ingest(const Options& o, std::ostream& out) {
    const std::filesystem::path data(o.data);
    const auto name = o.name.empty() ? data.lexically_normal().filename().string() : o.name;
    const auto raw = load_dataset(data, name);
    const auto split = leave_one_out_split(filter_k_core(raw, o.k));
    save_split(split, o.out);
    out << split.name << ": " << split.train.size() << " users, " << split.items.size() << " items after " << o.k
        << "-core filtering\n";
}

void cmd_fuse(const Options& o, std::ostream& out) {
    const std::filesystem::path manifest(o.config);
    const auto j = read_json(manifest);
    FusionSpec spec;
    try {
        reject_unknown(j, "manifest", {"sources", "user_cap", "seed"});
        for (const auto& s : j.at("sources")) {
            std::filesystem::path dir = s.get<std::string>();
            if (dir.is_relative()) dir = manifest.parent_path() / dir;
            spec.sources.push_back(load_dataset(dir, dir.lexically_normal().filename().string()));
        }
        read_field(j, "user_cap", spec.user_cap);
        read_field(j, "seed", spec.seed);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, manifest.string() + ": " + e.what());
    }
    if (o.seed) spec.seed = *o.seed;
    const auto fused = build_fusion(spec);
    save_dataset(fused, o.out);
    out << "fused " << spec.sources.size() << " sources: " << fused.logs.size() << " users, " << fused.items.size()
        << " items\n";
}

void cmd_allocate(const Options& o, std::ostream& out) {
    const auto split = load_split(o.data);
    const Catalog catalog(split.items);
    if (!o.bundle.empty()) {
        const auto bundle = load_bundle(o.bundle);
        const auto registry = allocate_all(bundle.idgen.params, bundle.vocab, catalog.items(), bundle.alloc);
        std::filesystem::create_directories(o.out);
        registry.save_tsv(std::filesystem::path(o.out) / "ids.tsv");
        print_stats(out, registry.stats());
        return;
    }
    const auto bundle = fresh_bundle(o, run_config(o), catalog);
    save_bundle(bundle, o.out);
    print_stats(out, bundle.registry.stats());
}

void cmd_train(const Options& o, std::ostream& out) {
    const auto split = load_split(o.data);
    const Catalog catalog(split.items);
    const auto cfg = run_config(o);
    Bundle bundle = o.bundle.empty() ? fresh_bundle(o, cfg, catalog) : load_bundle(o.bundle);
    const auto logs = alternate_train(bundle, split, cfg.train, std::filesystem::path(o.out));
    for (const auto& l : logs) {
        out << "iteration " << l.iteration << ": valid HR@10 " << l.valid_hr10 << " NDCG@10 " << l.valid_ndcg10 << "; ";
        print_stats(out, l.allocation);
    }
    out << "bundle written to " << (std::filesystem::path(o.out) / "final").string() << "\n";
}

EvalOptions eval_options(const Options& o) {
    if (o.beam && o.exact) throw Error(ErrorKind::InvalidConfig, "--beam and --exact are mutually exclusive");
    if (o.beam && *o.beam < 1) throw Error(ErrorKind::InvalidConfig, "--beam must be >= 1");
    EvalOptions e;
    e.beam = o.beam;
    e.template_id = o.template_id;
    e.normalization = o.unnormalized ? Normalization::Unnormalized : Normalization::Renormalized;
    return e;
}

void write_report(const EvalReport& r, const Options& o, std::ostream& out) {
    std::filesystem::create_directories(o.out);
    save_report(r, std::filesystem::path(o.out) / "metrics.json");
    print_report(out, r);
}

void cmd_eval(const Options& o, std::ostream& out) {
    const auto options = eval_options(o);
    const auto bundle = load_bundle(o.bundle);
    const auto split = load_split(o.data);
    const Catalog catalog(split.items);
    const auto& users = o.split == "valid" ? split.valid : split.test;
    write_report(evaluate(bundle, catalog, bundle.registry, users, split.name, options), o, out);
}

void cmd_zeroshot(const Options& o, std::ostream& out) {
    const auto options = eval_options(o);
    const auto bundle = load_bundle(o.bundle);
    write_report(zero_shot_evaluate(bundle, load_split(o.data), options), o, out);
}

void configure_logging() {
    auto logger = spdlog::get("idgenrec");
    if (!logger) logger = spdlog::stderr_color_mt("idgenrec");
    spdlog::set_default_logger(logger);
    const char* env = std::getenv("IDGEN_LOG");
    const std::string name = env ? env : "info";
    const auto level = spdlog::level::from_str(name);
    if (level == spdlog::level::off && name != "off")
        throw Error(ErrorKind::InvalidConfig, "IDGEN_LOG must be one of trace, debug, info, warn, error, critical, off");
    spdlog::set_level(level);
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Textual-ID generative recommendation: data preparation, ID allocation, training and evaluation",
                 "idgenrec"};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset with a planted sequential pattern");
    synth->add_option("--out", o.out, "Output dataset directory")->required();
    synth->add_option("--pattern", o.pattern, "cyclic or alternating")->capture_default_str();
    synth->add_option("--users", o.synth.users)->capture_default_str();
    synth->add_option("--items", o.synth.items)->capture_default_str();
    synth->add_option("--min-len", o.synth.min_len)->capture_default_str();
    synth->add_option("--max-len", o.synth.max_len)->capture_default_str();
    synth->add_option("--key-prefix", o.synth.key_prefix, "Prefix for item and user keys");
    synth->add_option("--text-offset", o.synth.text_offset, "Shift the item descriptions")->capture_default_str();
    synth->add_option("--name", o.synth.name)->capture_default_str();
    synth->add_option("--seed", o.seed);

    auto* ingest = app.add_subcommand("ingest", "k-core filter and leave-one-out split a jsonl dataset");
    ingest->add_option("--data", o.data, "Directory with items.jsonl and interactions.jsonl")->required();
    ingest->add_option("--out", o.out, "Output split directory")->required();
    ingest->add_option("--k", o.k, "k-core threshold")->capture_default_str();
    ingest->add_option("--name", o.name, "Dataset name (default: directory name)");

    auto* fuse = app.add_subcommand("fuse", "Build a fusion corpus from a manifest");
    fuse->add_option("--config", o.config, "Manifest JSON: {\"sources\": [dirs], \"user_cap\": n, \"seed\": s}")->required();
    fuse->add_option("--out", o.out, "Output dataset directory")->required();
    fuse->add_option("--seed", o.seed, "Overrides the manifest seed");

    auto* allocate = app.add_subcommand("allocate", "Allocate textual IDs (fresh bundle, or with --bundle just ids.tsv)");
    auto* train = app.add_subcommand("train", "Alternate training of the ID generator and the recommender");
    for (auto* cmd : {allocate, train}) {
        cmd->add_option("--data", o.data, "Split directory written by ingest")->required();
        cmd->add_option("--out", o.out, "Output directory")->required();
        cmd->add_option("--config", o.config, "JSON with model/train/allocator overrides");
        cmd->add_option("--seed", o.seed, "Seed for initialization and training");
        cmd->add_option("--templates", o.templates, "Template bank file (id<TAB>text per line)");
        cmd->add_flag("--no-user-id", o.no_user_id, "Leave the user ID out of prompts");
        cmd->add_option("--bundle", o.bundle, "Start from an existing bundle");
    }

    auto* eval = app.add_subcommand("eval", "Leave-one-out evaluation of a trained bundle");
    auto* zeroshot = app.add_subcommand("zeroshot", "Frozen-model evaluation on an unseen dataset");
    for (auto* cmd : {eval, zeroshot}) {
        cmd->add_option("--bundle", o.bundle, "Bundle directory (e.g. <train out>/final)")->required();
        cmd->add_option("--data", o.data, "Split directory written by ingest")->required();
        cmd->add_option("--out", o.out, "Directory for metrics.json")->required();
        cmd->add_option("--beam", o.beam, "Rank with constrained beam search of this width");
        cmd->add_flag("--exact", o.exact, "Score every catalog item (default)");
        cmd->add_flag("--unnormalized", o.unnormalized, "Do not renormalize over valid continuations");
        cmd->add_option("--template", o.template_id, "Template id used for prompts")->capture_default_str();
    }
    eval->add_option("--split", o.split, "test or valid")->check(CLI::IsMember({"test", "valid"}))->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        configure_logging();
        if (*synth) cmd_synth(o, out);
        else if (*ingest) cmd_ingest(o, out);
        else if (*fuse) cmd_fuse(o, out);
        else if (*allocate) cmd_allocate(o, out);
        else if (*train) cmd_train(o, out);
        else if (*eval) cmd_eval(o, out);
        else if (*zeroshot) cmd_zeroshot(o, out);
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

} // namespace idgenrec

#include "idgenrec/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "idgenrec/error.hpp"
#include "idgenrec/hash.hpp"

namespace idgenrec {

using ad::Var;

void ModelConfig::validate() const {
    if (d_model < 1 || layers < 1 || heads < 1 || ff_dim < 1 || max_src_len < 1 || max_tgt_len < 1 || vocab_size < 1)
        throw Error(ErrorKind::InvalidConfig, "model dimensions must be >= 1");
    if (d_model % heads != 0) throw Error(ErrorKind::InvalidConfig, "d_model must be divisible by heads");
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
}

std::uint64_t ModelParams::hash() const {
    Fnv1a h;
    for (const auto& t : tensors) {
        h.update(static_cast<std::uint64_t>(t.rows()));
        h.update(static_cast<std::uint64_t>(t.cols()));
        h.update(std::span<const double>(t.data(), static_cast<std::size_t>(t.size())));
    }
    return h.digest();
}

ModelParams init_params(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    const int d = config.d_model;
    auto add = [&](std::string name, int rows, int cols) {
        p.names.push_back(std::move(name));
        p.tensors.emplace_back(rows, cols);
        return p.tensors.size() - 1;
    };
    auto add_attention = [&](const std::string& prefix) {
        return AttentionWeights{add(prefix + ".wq", d, d), add(prefix + ".wk", d, d), add(prefix + ".wv", d, d),
                                add(prefix + ".wo", d, d)};
    };
    auto add_ff = [&](const std::string& prefix) {
        return FeedForwardWeights{add(prefix + ".w1", d, config.ff_dim), add(prefix + ".b1", 1, config.ff_dim),
                                  add(prefix + ".w2", config.ff_dim, d), add(prefix + ".b2", 1, d)};
    };

    p.layout.embed = add("embed", config.vocab_size, d);
    p.layout.pos_src = add("pos_src", config.max_src_len, d);
    p.layout.pos_tgt = add("pos_tgt", config.max_tgt_len, d);
    for (int l = 0; l < config.layers; ++l) {
        const auto pre = "enc." + std::to_string(l);
        EncoderLayerWeights w;
        w.self = add_attention(pre + ".self");
        w.ff = add_ff(pre + ".ff");
        p.layout.encoder.push_back(w);
    }
    for (int l = 0; l < config.layers; ++l) {
        const auto pre = "dec." + std::to_string(l);
        DecoderLayerWeights w;
        w.self = add_attention(pre + ".self");
        w.cross = add_attention(pre + ".cross");
        w.ff = add_ff(pre + ".ff");
        p.layout.decoder.push_back(w);
    }

    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& t : p.tensors)
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
    return p;
}

// ---------------------------------------------------------------------------

Graph::Graph(ad::Tape& tape, const ModelParams& params, bool track_params) : tape_(tape), params_(params) {
    vars_.reserve(params.tensors.size());
    for (const auto& t : params.tensors) vars_.push_back(tape.ref(t, track_params));
}

Var Graph::embed(std::span<const TokenId> ids) const { return tape_.gather_rows(embedding(), ids); }

Var Graph::attention(Var query_in, Var kv_in, const AttentionWeights& w, bool causal) const {
    auto& t = tape_;
    const int heads = params_.config.heads;
    const int dh = params_.config.d_model / heads;
    Var q = t.matmul(query_in, vars_[w.wq]);
    Var k = t.matmul(kv_in, vars_[w.wk]);
    Var v = t.matmul(kv_in, vars_[w.wv]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = t.cols(q, h * dh, dh);
        Var kh = t.cols(k, h * dh, dh);
        Var vh = t.cols(v, h * dh, dh);
        Var probs = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), scale), causal);
        outs.push_back(t.matmul(probs, vh));
    }
    return t.matmul(t.concat_cols(outs), vars_[w.wo]);
}

Var Graph::feed_forward(Var x, const FeedForwardWeights& w) const {
    auto& t = tape_;
    Var h = t.gelu(t.add_row(t.matmul(x, vars_[w.w1]), vars_[w.b1]));
    return t.add_row(t.matmul(h, vars_[w.w2]), vars_[w.b2]);
}

Var Graph::encode(std::span<const TokenId> src) const {
    if (src.size() > static_cast<std::size_t>(params_.config.max_src_len))
        throw Error(ErrorKind::SequenceTooLong, "source length " + std::to_string(src.size()) + " exceeds " +
                                                    std::to_string(params_.config.max_src_len));
    return encode_embeddings(embed(src));
}

Var Graph::encode_embeddings(Var src_embs) const {
    auto& t = tape_;
    const auto& x0 = t.value(src_embs);
    if (x0.cols() != params_.config.d_model) throw Error(ErrorKind::ShapeMismatch, "source embeddings must have width d_model");
    if (x0.rows() > params_.config.max_src_len)
        throw Error(ErrorKind::SequenceTooLong, "source length " + std::to_string(x0.rows()) + " exceeds " +
                                                    std::to_string(params_.config.max_src_len));
    Var x = t.add(src_embs, t.rows(vars_[params_.layout.pos_src], 0, x0.rows()));
    for (const auto& layer : params_.layout.encoder) {
        Var h = t.layer_norm(x);
        x = t.add(x, attention(h, h, layer.self, false));
        x = t.add(x, feed_forward(t.layer_norm(x), layer.ff));
    }
    return t.layer_norm(x);
}

Var Graph::decode(Var context, std::span<const TokenId> decoder_input) const {
    auto& t = tape_;
    const auto m = static_cast<Eigen::Index>(decoder_input.size());
    if (m > params_.config.max_tgt_len)
        throw Error(ErrorKind::SequenceTooLong, "target length " + std::to_string(m) + " exceeds " +
                                                    std::to_string(params_.config.max_tgt_len));
    Var x = t.add(embed(decoder_input), t.rows(vars_[params_.layout.pos_tgt], 0, m));
    for (const auto& layer : params_.layout.decoder) {
        Var h = t.layer_norm(x);
        x = t.add(x, attention(h, h, layer.self, true));
        x = t.add(x, attention(t.layer_norm(x), context, layer.cross, false));
        x = t.add(x, feed_forward(t.layer_norm(x), layer.ff));
    }
    return t.matmul_nt(t.layer_norm(x), embedding());
}

Var Graph::sequence_nll(Var context, std::span<const TokenId> target) const {
    if (target.empty() || target.back() != kEos)
        throw Error(ErrorKind::InvalidInput, "sequence_nll target must end with EOS");
    const auto input = shift_right(target);
    return tape_.nll(decode(context, input), target);
}

Gradients Graph::gradients() const {
    Gradients g;
    g.reserve(vars_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        const auto& grad = tape_.grad(vars_[i]);
        if (grad.size() == params_.tensors[i].size() && grad.size() > 0)
            g.push_back(grad);
        else
            g.push_back(Mat::Zero(params_.tensors[i].rows(), params_.tensors[i].cols()));
    }
    return g;
}

Gradients Graph::backward(Var loss) const {
    tape_.backward(loss);
    return gradients();
}

TokenSequence shift_right(std::span<const TokenId> target) {
    TokenSequence in;
    in.reserve(target.size());
    in.push_back(kPad);
    if (!target.empty()) in.insert(in.end(), target.begin(), target.end() - 1);
    return in;
}

// ---------------------------------------------------------------------------

EncoderState encode(const ModelParams& params, std::span<const TokenId> src) {
    ad::Tape tape;
    Graph g(tape, params, false);
    return {tape.value(g.encode(src))};
}

EncoderState encode_embeddings(const ModelParams& params, const Mat& src_embs) {
    ad::Tape tape;
    Graph g(tape, params, false);
    return {tape.value(g.encode_embeddings(tape.constant(src_embs)))};
}

Eigen::VectorXd decoder_logits(const ModelParams& params, const EncoderState& state, std::span<const TokenId> prefix) {
    if (prefix.size() >= static_cast<std::size_t>(params.config.max_tgt_len))
        throw Error(ErrorKind::SequenceTooLong, "prefix length " + std::to_string(prefix.size()) + " reaches max_tgt_len");
    TokenSequence input;
    input.push_back(kPad);
    input.insert(input.end(), prefix.begin(), prefix.end());
    ad::Tape tape;
    Graph g(tape, params, false);
    const auto& all = tape.value(g.decode(tape.ref(state.context, false), input));
    return all.row(all.rows() - 1).transpose();
}

Mat decoder_logits_all(const ModelParams& params, const EncoderState& state, std::span<const TokenId> target) {
    ad::Tape tape;
    Graph g(tape, params, false);
    return tape.value(g.decode(tape.ref(state.context, false), shift_right(target)));
}

double sequence_nll(const ModelParams& params, const EncoderState& state, std::span<const TokenId> target) {
    ad::Tape tape;
    Graph g(tape, params, false);
    return tape.value(g.sequence_nll(tape.ref(state.context, false), target))(0, 0);
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return logits.array() - lse;
}

Eigen::VectorXd expected_embedding(const Eigen::VectorXd& logits, const Mat& table) {
    if (logits.size() != table.rows()) throw Error(ErrorKind::ShapeMismatch, "logits length must equal table rows");
    Eigen::VectorXd p = log_softmax(logits).array().exp();
    return table.transpose() * p;
}

Var expected_embeddings(ad::Tape& tape, Var logits, Var table) {
    return tape.matmul(tape.softmax_rows(logits), table);
}

// ---------------------------------------------------------------------------

AdamState AdamState::zeros_like(const ModelParams& params) {
    AdamState s;
    for (const auto& t : params.tensors) {
        s.m.push_back(Mat::Zero(t.rows(), t.cols()));
        s.v.push_back(Mat::Zero(t.rows(), t.cols()));
    }
    return s;
}

void apply_update(ModelParams& params, const Gradients& grads, AdamState& state, double lr) {
    auto& ts = params.tensors;
    if (grads.size() != ts.size() || state.m.size() != ts.size() || state.v.size() != ts.size())
        throw Error(ErrorKind::ShapeMismatch, "gradient/optimizer tensor count differs from parameters");
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (grads[i].rows() != ts[i].rows() || grads[i].cols() != ts[i].cols() || state.m[i].rows() != ts[i].rows() ||
            state.m[i].cols() != ts[i].cols())
            throw Error(ErrorKind::ShapeMismatch, "shape mismatch for tensor " + params.names[i]);
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < ts.size(); ++i) {
        auto m = state.m[i].array();
        auto v = state.v[i].array();
        const auto g = grads[i].array();
        m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
        v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g.square();
        ts[i].array() -= lr * (m / c1) / ((v / c2).sqrt() + kAdamEps);
    }
}

Gradients zero_gradients(const ModelParams& params) {
    Gradients g;
    for (const auto& t : params.tensors) g.push_back(Mat::Zero(t.rows(), t.cols()));
    return g;
}

void accumulate(Gradients& into, const Gradients& g) {
    if (into.size() != g.size()) throw Error(ErrorKind::ShapeMismatch, "gradient tensor count mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

// ---------------------------------------------------------------------------

namespace {

using json = nlohmann::json;

json tensors_json(const std::vector<Mat>& ts) {
    json arr = json::array();
    for (const auto& t : ts)
        arr.push_back({{"rows", t.rows()}, {"cols", t.cols()},
                       {"data", std::vector<double>(t.data(), t.data() + t.size())}});
    return arr;
}

std::vector<Mat> tensors_from(const json& arr) {
    std::vector<Mat> ts;
    for (const auto& j : arr) {
        Mat t(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
        auto data = j.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != t.size()) throw Error(ErrorKind::InvalidInput, "tensor size mismatch in checkpoint");
        std::copy(data.begin(), data.end(), t.data());
        ts.push_back(std::move(t));
    }
    return ts;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto& c = ckpt.params.config;
    json j;
    j["format"] = "idgenrec-checkpoint";
    j["version"] = 1;
    j["vocab_hash"] = hex_digest(ckpt.vocab_hash);
    j["config"] = {{"d_model", c.d_model}, {"layers", c.layers},         {"heads", c.heads},
                   {"ff_dim", c.ff_dim},   {"max_src_len", c.max_src_len}, {"max_tgt_len", c.max_tgt_len},
                   {"vocab_size", c.vocab_size}, {"seed", c.seed}};
    j["names"] = ckpt.params.names;
    j["tensors"] = tensors_json(ckpt.params.tensors);
    j["adam"] = {{"step", ckpt.adam.step}, {"m", tensors_json(ckpt.adam.m)}, {"v", tensors_json(ckpt.adam.v)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << j.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_vocab_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidInput, path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "idgenrec-checkpoint" || j.value("version", 0) != 1)
        throw Error(ErrorKind::InvalidInput, path.string() + " is not a version 1 checkpoint");
    const auto stored = j.at("vocab_hash").get<std::string>();
    if (stored != hex_digest(expected_vocab_hash))
        throw Error(ErrorKind::VocabularyMismatch,
                    path.string() + " was trained against vocabulary " + stored + ", got " + hex_digest(expected_vocab_hash));

    const auto& jc = j.at("config");
    ModelConfig c;
    c.d_model = jc.at("d_model");
    c.layers = jc.at("layers");
    c.heads = jc.at("heads");
    c.ff_dim = jc.at("ff_dim");
    c.max_src_len = jc.at("max_src_len");
    c.max_tgt_len = jc.at("max_tgt_len");
    c.vocab_size = jc.at("vocab_size");
    c.seed = jc.at("seed");

    Checkpoint ckpt;
    ckpt.params = init_params(c);
    auto tensors = tensors_from(j.at("tensors"));
    if (tensors.size() != ckpt.params.tensors.size()) throw Error(ErrorKind::InvalidInput, "tensor count mismatch in checkpoint");
    for (std::size_t i = 0; i < tensors.size(); ++i)
        if (tensors[i].rows() != ckpt.params.tensors[i].rows() || tensors[i].cols() != ckpt.params.tensors[i].cols())
            throw Error(ErrorKind::InvalidInput, "shape mismatch for " + ckpt.params.names[i]);
    ckpt.params.tensors = std::move(tensors);
    ckpt.adam.step = j.at("adam").at("step");
    ckpt.adam.m = tensors_from(j.at("adam").at("m"));
    ckpt.adam.v = tensors_from(j.at("adam").at("v"));
    ckpt.vocab_hash = expected_vocab_hash;
    return ckpt;
}

} // namespace idgenrec

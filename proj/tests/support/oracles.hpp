#pragma once

// Test-only reference computations. Nothing here calls back into the code
// paths under test except to evaluate a scalar loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "idgenrec/model.hpp"

namespace oracle {

struct Coord {
    std::size_t tensor;
    Eigen::Index index;
};

inline std::vector<Coord> sample_coords(const idgenrec::ModelParams& p, int count, std::uint64_t seed) {
    std::vector<Coord> all;
    for (std::size_t t = 0; t < p.tensors.size(); ++t)
        for (Eigen::Index i = 0; i < p.tensors[t].size(); ++i) all.push_back({t, i});
    std::mt19937_64 rng(seed);
    std::vector<Coord> out;
    std::sample(all.begin(), all.end(), std::back_inserter(out), count, rng);
    return out;
}

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    if (denom == 0.0) return 0.0;
    return std::abs(analytic - numeric) / denom;
}

/// Central finite difference of `loss` w.r.t. one coordinate of `params`.
inline double central_difference(idgenrec::ModelParams& params, Coord c, const std::function<double()>& loss,
                                 double h = 1e-5) {
    double& x = params.tensors[c.tensor].data()[c.index];
    const double saved = x;
    x = saved + h;
    const double up = loss();
    x = saved - h;
    const double down = loss();
    x = saved;
    return (up - down) / (2.0 * h);
}

/// Dense softmax(logits) . table, written out element by element.
inline std::vector<double> softmax_matvec(const std::vector<double>& logits, const std::vector<std::vector<double>>& table) {
    double mx = logits[0];
    for (double z : logits) mx = std::max(mx, z);
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += (p[i] = std::exp(logits[i] - mx));
    std::vector<double> out(table[0].size(), 0.0);
    for (std::size_t i = 0; i < logits.size(); ++i)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += p[i] / s * table[i][j];
    return out;
}

/// Single relevant item metrics computed from scratch.
inline double ndcg_at(long rank, long k) { return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0; }
inline double hr_at(long rank, long k) { return rank <= k ? 1.0 : 0.0; }

} // namespace oracle

#include "idgenrec/allocator.hpp"

namespace oracle {

/// Plain width-`width` beam search with the ID constraints (no PAD/UNK, EOS
/// only after `lo` tokens, forced stop at `max_len`). Written independently
/// of the grouped implementation.
inline idgenrec::TokenSequence vanilla_beam_search(idgenrec::NextTokenModel& model, int width, int lo, int max_len) {
    using idgenrec::TokenSequence;
    struct Beam {
        TokenSequence seq;
        double score;
        bool eos;
    };
    auto order = [](const Beam& a, const Beam& b) { return a.score != b.score ? a.score > b.score : a.seq < b.seq; };
    std::vector<Beam> beams{{{}, 0.0, false}};
    std::vector<Beam> done;
    for (int step = 0; step < max_len && !beams.empty(); ++step) {
        std::vector<Beam> all;
        for (const auto& b : beams) {
            auto lp = model.log_probs(b.seq);
            for (int v = 0; v < lp.size(); ++v) {
                if (v == idgenrec::kPad || v == idgenrec::kUnk) continue;
                if (v == idgenrec::kEos && step < lo) continue;
                Beam n{b.seq, b.score + lp[v], v == idgenrec::kEos};
                if (!n.eos) n.seq.push_back(v);
                all.push_back(n);
            }
        }
        std::sort(all.begin(), all.end(), order);
        std::vector<Beam> keep;
        int alive = 0;
        for (std::size_t r = 0; r < all.size() && alive < width; ++r) {
            if (all[r].eos) {
                if (static_cast<int>(r) < width) done.push_back(all[r]);
                continue;
            }
            ++alive;
            if (static_cast<int>(all[r].seq.size()) == max_len)
                done.push_back(all[r]);
            else
                keep.push_back(all[r]);
        }
        beams = keep;
    }
    if (done.empty()) return {};
    return std::min_element(done.begin(), done.end(), order)->seq;
}

} // namespace oracle

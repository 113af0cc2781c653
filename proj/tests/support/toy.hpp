#pragma once

// Small shared fixtures for the training-level tests.

#include "idgenrec/corpus.hpp"
#include "idgenrec/model.hpp"
#include "idgenrec/synth.hpp"

namespace toy {

inline idgenrec::ModelConfig tiny_model() {
    idgenrec::ModelConfig c;
    c.d_model = 8;
    c.layers = 1;
    c.heads = 2;
    c.ff_dim = 12;
    c.max_src_len = 64;
    c.max_tgt_len = 20;
    return c;
}

inline idgenrec::SplitDataset small_split(std::uint64_t seed = 3) {
    idgenrec::SynthSpec s;
    s.users = 6;
    s.items = 6;
    s.min_len = 5;
    s.max_len = 7;
    s.seed = seed;
    return idgenrec::leave_one_out_split(idgenrec::synthesize(s));
}

} // namespace toy

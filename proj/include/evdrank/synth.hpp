#pragma once
// Bundled synthetic corpus. Two kinds of items:
//
//  - easy items: attributes are exactly the caption's unigrams + bigrams, so
//    the raw query already identifies the item;
//  - confusable pairs: two entities share identical caption contexts, and the
//    items carry the context tokens plus the entities' visual description
//    tokens instead of the entity words themselves. The raw queries for a
//    pair tie; only description-enhanced queries separate them.
//
// Description tokens are taken from the mock backend's generator with a fixed
// seed, so a knowledge base built offline over these captions carries exactly
// the discriminating attribute tokens.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evdrank/encoder.hpp"

namespace evdrank {

struct SynthSpec {
    std::uint64_t desc_seed = 1337;  // must match the KB build's description seed
    std::size_t h = 5;               // descriptions per entity sense
    std::size_t h_present = 3;       // how many of those an item actually displays;
                                     // the rest are noise the rewriter must avoid
};

struct SynthCorpus {
    std::vector<CorpusItem> train;
    std::vector<CorpusItem> test;
};

SynthCorpus make_synth_corpus(const SynthSpec& spec = {});

// Confusable entity pairs baked into each split.
const std::vector<std::pair<std::string, std::string>>& synth_test_pairs();
const std::vector<std::pair<std::string, std::string>>& synth_train_pairs();

// Non-visual filler phrases for the parallel-query baseline that augments
// with generic (non-description) text.
const std::vector<std::string>& nonvisual_fillers();

}  // namespace evdrank

#include "evdrank/synth.hpp"

#include <set>

#include "evdrank/llm.hpp"
#include "evdrank/util.hpp"

namespace evdrank {

namespace {

// unigrams + bigrams of a phrase, deduplicated, in order of appearance
std::vector<std::string> uni_bi(const std::string& text) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    const auto toks = tokenize(text);
    auto push = [&](std::string s) {
        if (seen.insert(s).second) out.push_back(std::move(s));
    };
    for (const auto& t : toks) push(t);
    for (std::size_t i = 0; i + 1 < toks.size(); ++i) push(toks[i] + " " + toks[i + 1]);
    return out;
}

void append_unique(std::vector<std::string>& dst, const std::vector<std::string>& src) {
    std::set<std::string> seen(dst.begin(), dst.end());
    for (const auto& s : src)
        if (seen.insert(s).second) dst.push_back(s);
}

const std::vector<std::string> kOpeners = {
    "children sketch the",  "a muralist paints the", "tourists admire the",
    "a guide describes the", "students measure the", "a curator catalogs the",
    "locals decorate the",
};

const std::vector<std::string> kClosers = {
    "during a field trip",    "before the storm arrives", "at the edge of town",
    "after the market closes", "in the fading light",     "while bells ring nearby",
    "as onlookers gather",     "on a rainy afternoon",    "behind the old depot",
    "beyond the stone wall",   "near the weathered pier",
};

const std::vector<std::string> kThirds = {
    "this january", "this february", "this march",    "this april",  "this may",
    "this june",    "this july",     "this august",   "this september",
    "this october", "this november", "this december", "this weekend",
};

const std::vector<std::string> kPlaces = {
    "meadow",   "harbor",  "ridge",   "shoreline", "trailhead", "clearing", "hillside",
    "marsh",    "dunes",   "prairie", "canyon",    "fjord",     "lagoon",   "grove",
    "knoll",    "moor",    "heath",   "bluff",     "cove",      "glen",     "delta",
    "estuary",  "foothill", "gorge",  "basin",     "plateau",   "savanna",  "tundra",
    "isthmus",  "atoll",   "steppe",  "badlands",
};

const std::vector<std::pair<std::string, std::string>> kTestPairs = {
    {"camp of tents", "village"},   {"kayak", "canoe"},
    {"glacier", "iceberg"},         {"vineyard", "orchard"},
    {"cottage", "cabin"},           {"tugboat", "ferry"},
    {"lighthouse", "water tower"},  {"windmill", "wind turbine"},
    {"igloo", "yurt"},              {"carousel", "ferris wheel"},
};

const std::vector<std::pair<std::string, std::string>> kTrainPairs = {
    {"skateboard", "scooter"}, {"zeppelin", "hot air balloon"},
    {"tractor", "bulldozer"},  {"gondola", "rowboat"},
    {"barn", "stable"},        {"greenhouse", "conservatory"},
};

const std::vector<std::string> kTrainEasy = {
    "whale",     "school bus", "dolphin",  "astronaut",   "saxophone", "cathedral",
    "flamingo",  "pagoda",     "submarine", "waterfall",  "volcano",   "chandelier",
    "aquarium",  "observatory", "drawbridge", "catamaran", "monastery",
};

const std::vector<std::string> kTestEasy = {
    "amphitheater", "obelisk",   "aqueduct",  "planetarium", "velodrome",  "funicular",
    "paddleboat",   "snowplow",  "streetcar", "icebreaker",  "bobsled",    "hovercraft",
    "seaplane",     "forklift",  "excavator", "telescope",   "accordion",  "harpsichord",
    "lantern",      "hammock",   "gazebo",    "trellis",     "birdbath",   "sundial",
    "weathervane",  "dovecote",  "pergola",   "kiln",        "anvil",      "loom",
};

std::string easy_caption(const std::string& entity, std::size_t idx) {
    return kOpeners[idx % kOpeners.size()] + " " + entity + " " +
           kClosers[idx % kClosers.size()] + " " + kThirds[idx % kThirds.size()];
}

CorpusItem make_easy_item(std::string id, const std::string& entity, std::size_t idx) {
    CorpusItem item;
    item.id = std::move(id);
    item.caption = easy_caption(entity, idx);
    item.attributes = uni_bi(item.caption);
    return item;
}

// Tokens of the descriptions the item displays: the first h_present of the
// entity's h descriptions. The remaining ones exist in the knowledge base but
// not in the image stand-in, mirroring noisy or hallucinated descriptions.
std::vector<std::string> description_tokens(const std::string& entity,
                                            const std::optional<std::string>& tag,
                                            const SynthSpec& spec) {
    std::vector<std::string> out;
    const auto descs = mock_descriptions(entity, tag, spec.h, spec.desc_seed);
    for (std::size_t i = 0; i < std::min(spec.h_present, descs.size()); ++i)
        append_unique(out, uni_bi(descs[i]));
    return out;
}

// One confusable item: caption = prefix + entity + suffix; attributes carry
// the context tokens and the entity's description tokens, never the entity
// words themselves. Contexts are kept short so the description overlap
// dominates the score once a rewrite injects one.
CorpusItem make_confusable_item(std::string id, const std::string& entity,
                                const std::optional<std::string>& tag,
                                const std::string& prefix, const std::string& suffix,
                                const SynthSpec& spec) {
    CorpusItem item;
    item.id = std::move(id);
    item.caption = prefix + " " + entity + " " + suffix;
    item.attributes = uni_bi(prefix);
    append_unique(item.attributes, uni_bi(suffix));
    append_unique(item.attributes, description_tokens(entity, tag, spec));
    return item;
}

std::string zero_pad(std::size_t n) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%03zu", n);
    return buf;
}

void add_pair_group(std::vector<CorpusItem>& out, const std::string& id_prefix,
                    std::size_t& counter, const std::pair<std::string, std::string>& pair,
                    std::size_t group, const SynthSpec& spec) {
    const std::string& place0 = kPlaces[(2 * group) % kPlaces.size()];
    const std::string& place1 = kPlaces[(2 * group + 1) % kPlaces.size()];

    const std::string prefix0 = "a photo of the";
    const std::string suffix0 = "near the " + place0;
    const std::string prefix1 = "a view of the";
    const std::string suffix1 = "by the " + place1;

    for (const auto* entity : {&pair.first, &pair.second}) {
        out.push_back(make_confusable_item(id_prefix + zero_pad(counter++), *entity, std::nullopt,
                                           prefix0, suffix0, spec));
        out.push_back(make_confusable_item(id_prefix + zero_pad(counter++), *entity, std::nullopt,
                                           prefix1, suffix1, spec));
    }
}

}  // namespace

const std::vector<std::pair<std::string, std::string>>& synth_test_pairs() { return kTestPairs; }
const std::vector<std::pair<std::string, std::string>>& synth_train_pairs() { return kTrainPairs; }

const std::vector<std::string>& nonvisual_fillers() {
    static const std::vector<std::string> fillers = {
        "in a general sense",          "with respect to the matter",
        "as commonly understood",      "regarding the overall context",
        "in typical circumstances",    "from a broad perspective",
        "concerning the general idea", "by most accounts",
    };
    return fillers;
}

SynthCorpus make_synth_corpus(const SynthSpec& spec) {
    SynthCorpus corpus;

    // train: confusable pairs, two ambiguous-entity items, repeated easy items
    std::size_t tr = 0;
    for (std::size_t g = 0; g < kTrainPairs.size(); ++g)
        add_pair_group(corpus.train, "tr-", tr, kTrainPairs[g], g + kTestPairs.size(), spec);

    corpus.train.push_back(make_confusable_item(
        "tr-" + zero_pad(tr++), "bank", std::string("riverbank"),
        "a fisherman rests by the", "while reeds sway in the current", spec));
    corpus.train.push_back(make_confusable_item(
        "tr-" + zero_pad(tr++), "bank", std::string("financial institution"),
        "customers queue outside the", "before its doors open for trading", spec));

    for (std::size_t i = 0; i < kTrainEasy.size(); ++i) {
        corpus.train.push_back(make_easy_item("tr-" + zero_pad(tr++), kTrainEasy[i], i));
        corpus.train.push_back(
            make_easy_item("tr-" + zero_pad(tr++), kTrainEasy[i], i + kTrainEasy.size()));
    }

    // test: ten confusable pairs plus easy items, every entity appearing twice
    std::size_t te = 0;
    for (std::size_t g = 0; g < kTestPairs.size(); ++g)
        add_pair_group(corpus.test, "te-", te, kTestPairs[g], g, spec);

    for (std::size_t i = 0; i < kTestEasy.size(); ++i) {
        corpus.test.push_back(make_easy_item("te-" + zero_pad(te++), kTestEasy[i], i));
        corpus.test.push_back(
            make_easy_item("te-" + zero_pad(te++), kTestEasy[i], i + 3 * kTestEasy.size() / 2));
    }

    return corpus;
}

}  // namespace evdrank

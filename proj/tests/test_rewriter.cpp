#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "evdrank/rewriter.hpp"
#include "evdrank/util.hpp"
#include "test_support.hpp"

using namespace evdrank;
using evdtest::TempDir;
using evdtest::kb_with;

namespace {

EvdKnowledgeBase five_desc_kb() {
    return kb_with({{"tent",
                     {"has sloped fabric walls", "has guy ropes", "has a domed roof",
                      "has taut nylon panels", "has aluminum poles"}}});
}

EvdKnowledgeBase ambiguous_kb() {
    EvdKnowledgeBase kb;
    kb.insert_entry(EvdEntry{
        EntitySense{"bank", std::string("financial institution"), DescriptionSource::llm},
        {"has marble columns", "has a vaulted lobby", "has teller windows", "has brass doors",
         "has a carved facade"},
        "2000-01-01T00:00:00Z"});
    kb.insert_entry(EvdEntry{
        EntitySense{"bank", std::string("riverbank"), DescriptionSource::llm},
        {"has grassy slopes", "has exposed roots", "has pebbled edges", "has reed beds",
         "has silty shallows"},
        "2000-01-01T00:00:00Z"});
    return kb;
}

// three single-description entities: each slot offers SKIP + 1 desc x 3 templates
EvdKnowledgeBase three_slot_kb() {
    return kb_with({{"tent", {"has fabric walls"}},
                    {"kayak", {"has a narrow hull"}},
                    {"glacier", {"has fissured blue ice"}}});
}

RewritePolicy random_policy(std::size_t dim, Rng& rng, RewriteGrammar grammar = {}) {
    auto policy = make_policy(dim, 5, std::move(grammar));
    for (auto& w : policy.theta) w = 0.3 * rng.next_normal();
    return policy;
}

std::vector<RewriteAction> pick_actions(const ActionSpace& space, Rng& rng) {
    std::vector<RewriteAction> actions;
    for (std::size_t t = 0; t < space.choices.size(); ++t)
        actions.push_back(
            RewriteAction{t, space.choices[t][rng.next_index(space.choices[t].size())]});
    return actions;
}

bool is_token_subsequence(const std::string& needle, const std::string& haystack) {
    const auto a = tokenize(needle);
    const auto b = tokenize(haystack);
    std::size_t i = 0;
    for (const auto& tok : b)
        if (i < a.size() && tok == a[i]) ++i;
    return i == a.size();
}

}  // namespace

TEST_CASE("action space sizes follow 1 + senses x descs x templates") {
    RewriteGrammar grammar;  // h=5, 3 templates

    const auto none = action_space("no entities here", five_desc_kb(), grammar);
    CHECK(none.slots.empty());

    const auto one = action_space("a tent by the lake", five_desc_kb(), grammar);
    REQUIRE(one.slots.size() == 1);
    CHECK(one.choices[0].size() == 16);  // 1 + 5*3*1

    const auto two = action_space("the bank at dusk", ambiguous_kb(), grammar);
    REQUIRE(two.slots.size() == 1);
    CHECK(two.choices[0].size() == 31);  // 1 + 5*3*2
}

TEST_CASE("rendering is the identity under all-SKIP") {
    const auto kb = five_desc_kb();
    RewriteGrammar grammar;
    const std::string query = "a tent by the lake";
    const auto space = action_space(query, kb, grammar);
    std::vector<RewriteAction> skips;
    for (std::size_t t = 0; t < space.slots.size(); ++t)
        skips.push_back(RewriteAction{t, RewriteChoice{}});
    CHECK(render_rewrite(query, space, skips) == query);
}

TEST_CASE("templates expand exactly as specified") {
    const auto kb = kb_with({{"camp of tents", {"rows of fabric shelters"}}});
    RewriteGrammar grammar;
    const std::string query = "a camp of tents";
    const auto space = action_space(query, kb, grammar);
    REQUIRE(space.slots.size() == 1);

    auto with_template = [&](std::size_t tmpl) {
        RewriteChoice c;
        c.skip = false;
        c.desc_index = 0;
        c.template_index = tmpl;
        return render_rewrite(query, space, {RewriteAction{0, c}});
    };
    CHECK(with_template(2) == "a camp of tents (rows of fabric shelters)");
    CHECK(with_template(0) == "a camp of tents, which rows of fabric shelters,");
    CHECK(with_template(1) == "a camp of tents with rows of fabric shelters");
}

TEST_CASE("the relative template strips a leading 'has'") {
    const auto kb = kb_with({{"tent", {"has sloped fabric walls"}}});
    RewriteGrammar grammar;
    const std::string query = "a tent";
    const auto space = action_space(query, kb, grammar);
    RewriteChoice c;
    c.skip = false;
    c.template_index = 1;
    CHECK(render_rewrite(query, space, {RewriteAction{0, c}}) ==
          "a tent with sloped fabric walls");
}

TEST_CASE("multi-slot rendering corrects offsets left to right") {
    const auto kb = kb_with({{"tent", {"has fabric walls"}}, {"kayak", {"has a narrow hull"}}});
    RewriteGrammar grammar;
    const std::string query = "a tent beside a kayak";
    const auto space = action_space(query, kb, grammar);
    REQUIRE(space.slots.size() == 2);

    RewriteChoice par;
    par.skip = false;
    par.template_index = 2;
    const auto text = render_rewrite(query, space, {RewriteAction{0, par}, RewriteAction{1, par}});
    CHECK(text == "a tent (has fabric walls) beside a kayak (has a narrow hull)");

    // re-rendering the output with all-SKIP is the identity on it
    const auto space2 = action_space(text, kb, grammar);
    std::vector<RewriteAction> skips;
    for (std::size_t t = 0; t < space2.slots.size(); ++t)
        skips.push_back(RewriteAction{t, RewriteChoice{}});
    CHECK(render_rewrite(text, space2, skips) == text);
}

TEST_CASE("illegal actions are rejected") {
    const auto kb = five_desc_kb();
    RewriteGrammar grammar;
    const std::string query = "a tent by the lake";
    const auto space = action_space(query, kb, grammar);

    CHECK_THROWS_AS(render_rewrite(query, space, {}), IllegalAction);  // missing slot

    RewriteChoice bad_desc;
    bad_desc.skip = false;
    bad_desc.desc_index = 99;
    CHECK_THROWS_AS(render_rewrite(query, space, {RewriteAction{0, bad_desc}}), IllegalAction);

    RewriteChoice bad_sense;
    bad_sense.skip = false;
    bad_sense.sense_tag = "no such sense";
    CHECK_THROWS_AS(render_rewrite(query, space, {RewriteAction{0, bad_sense}}), IllegalAction);

    const auto policy = make_policy(128, 1);
    CHECK_THROWS_AS(policy_logprob(policy, query, kb, {RewriteAction{0, bad_desc}}),
                    IllegalAction);
}

TEST_CASE("zero-weight policies are uniform per slot") {
    const auto kb = five_desc_kb();
    const auto policy = make_policy(256, 3);
    const std::string query = "a tent by the lake";
    const auto space = action_space(query, kb, policy.grammar);

    const auto lp = policy_logprob(policy, query, kb, {RewriteAction{0, space.choices[0][4]}});
    CHECK(lp.loss == doctest::Approx(-std::log(16.0)).epsilon(1e-12));

    const auto empty = policy_logprob(policy, "no entities at all", kb, {});
    CHECK(empty.loss == 0.0);
    for (double g : empty.grad) CHECK(g == 0.0);
}

TEST_CASE("per-slot choice probabilities sum to one") {
    const auto kb = ambiguous_kb();
    const std::string query = "the bank at dusk";
    Rng rng(61);
    for (int trial = 0; trial < 10; ++trial) {
        const auto policy = random_policy(256, rng);
        const auto space = action_space(query, kb, policy.grammar);
        REQUIRE(space.slots.size() == 1);
        double total = 0.0;
        for (const auto& choice : space.choices[0])
            total += std::exp(policy_logprob(policy, query, kb, {RewriteAction{0, choice}}).loss);
        CHECK(std::abs(total - 1.0) <= 1e-9);
    }
}

TEST_CASE("policy log-probability gradient matches finite differences") {
    const auto kb = ambiguous_kb();
    const std::string query = "the bank at dusk";
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        auto policy = random_policy(128, rng);
        const auto space = action_space(query, kb, policy.grammar);
        const auto actions = pick_actions(space, rng);
        const auto res = policy_logprob(policy, query, kb, actions);
        const auto eval = [&]() { return policy_logprob(policy, query, kb, actions).loss; };
        CHECK(evdtest::max_grad_rel_error(policy.theta, eval, res.grad) <= 1e-5);
    }
}

TEST_CASE("greedy decoding breaks ties toward the smallest choice id") {
    const auto kb = five_desc_kb();
    const auto policy = make_policy(256, 3);  // all-zero weights: every slot ties
    const auto cand = decode_greedy(policy, "a tent by the lake", kb);
    REQUIRE(cand.actions.size() == 1);
    CHECK(cand.actions[0].choice.skip);  // SKIP is id 0
    CHECK(cand.text == "a tent by the lake");

    const auto no_slots = decode_greedy(policy, "nothing to match", kb);
    CHECK(no_slots.actions.empty());
    CHECK(no_slots.text == "nothing to match");
    CHECK(no_slots.logprob == 0.0);
}

TEST_CASE("sampling is reproducible and always legal") {
    const auto kb = ambiguous_kb();
    Rng rng(4242);
    const auto policy = random_policy(512, rng);
    const std::string query = "the bank at dusk";

    const auto a = decode_sample(policy, query, kb, 7, 1.0);
    const auto b = decode_sample(policy, query, kb, 7, 1.0);
    CHECK(a == b);

    const auto space = action_space(query, kb, policy.grammar);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto cand = decode_sample(policy, query, kb, seed, 1.3);
        REQUIRE(cand.actions.size() == space.slots.size());
        for (std::size_t t = 0; t < cand.actions.size(); ++t) {
            bool found = false;
            for (const auto& c : space.choices[t]) found |= c == cand.actions[t].choice;
            CHECK(found);
        }
        CHECK(is_token_subsequence(query, cand.text));
    }
}

TEST_CASE("SFT loss is zero when every slot has a single legal choice") {
    // an empty template list leaves only SKIP at each slot
    RewriteGrammar skip_only;
    skip_only.templates.clear();
    const auto kb = three_slot_kb();
    const auto policy = make_policy(128, 1, skip_only);
    const std::string query = "a tent beside a kayak under the glacier";
    const auto space = action_space(query, kb, skip_only);
    REQUIRE(space.slots.size() == 3);
    for (const auto& choices : space.choices) CHECK(choices.size() == 1);

    std::vector<RewriteAction> skips;
    for (std::size_t t = 0; t < 3; ++t) skips.push_back(RewriteAction{t, RewriteChoice{}});
    const auto res = sft_loss(policy, kb, {RewriteExample{query, skips}});
    CHECK(res.loss == 0.0);
}

TEST_CASE("SFT at zero weights equals slots times log choice-count") {
    const auto kb = three_slot_kb();
    const auto policy = make_policy(512, 1);  // entries carry one description: 4 choices per slot
    const std::string query = "a tent beside a kayak under the glacier";
    const auto space = action_space(query, kb, policy.grammar);
    REQUIRE(space.slots.size() == 3);
    for (const auto& choices : space.choices) REQUIRE(choices.size() == 4);

    Rng rng(8);
    const auto actions = pick_actions(space, rng);
    const auto res = sft_loss(policy, kb, {RewriteExample{query, actions}});
    CHECK(res.loss == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));
    CHECK(std::abs(res.loss - 4.158883) <= 1e-5);
}

TEST_CASE("SFT gradient matches finite differences") {
    const auto kb = three_slot_kb();
    const std::string query = "a tent beside a kayak under the glacier";
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        auto policy = random_policy(128, rng);
        const auto space = action_space(query, kb, policy.grammar);
        std::vector<RewriteExample> dataset = {RewriteExample{query, pick_actions(space, rng)},
                                               RewriteExample{query, pick_actions(space, rng)}};
        const auto res = sft_loss(policy, kb, dataset);
        const auto eval = [&]() { return sft_loss(policy, kb, dataset).loss; };
        CHECK(evdtest::max_grad_rel_error(policy.theta, eval, res.grad) <= 1e-5);
    }
}

TEST_CASE("pairwise preference probability is stable and correct") {
    CHECK(bt_probability(1.0, 1.0) == 0.5);
    CHECK(bt_probability(std::log(3.0), 0.0) == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(bt_probability(1e4, 0.0) == 1.0);  // saturates without overflow
    CHECK(bt_probability(0.0, 1e4) == doctest::Approx(0.0));
    CHECK(std::isfinite(bt_probability(-1e4, 1e4)));
}

TEST_CASE("preference lists sort, collapse ties, and normalize rewards") {
    RewriteCandidate a, b, c, d;
    a.text = "a";
    b.text = "b";
    c.text = "c";
    d.text = "d";
    const auto pref = make_preference_list("q", {a, b, c, d}, {0.3, 0.7, 0.7 + 1e-12, 0.5});
    REQUIRE(pref.candidates.size() == 3);  // the 1e-12 gap collapses into the higher-ranked "c"
    CHECK(pref.candidates[0].text == "c");
    CHECK(pref.candidates[1].text == "d");
    CHECK(pref.candidates[2].text == "a");
    CHECK(pref.rewards.front() == 1.0);
    CHECK(pref.rewards.back() == 0.0);

    // shifting all raw rewards by a constant leaves the normalized rewards
    // unchanged up to fp rounding of the differences
    const auto shifted =
        make_preference_list("q", {a, b, c, d}, {10.3, 10.7, 10.7 + 1e-12, 10.5});
    REQUIRE(shifted.rewards.size() == pref.rewards.size());
    for (std::size_t i = 0; i < pref.rewards.size(); ++i)
        CHECK(shifted.rewards[i] == doctest::Approx(pref.rewards[i]).epsilon(1e-9));

    const auto all_tied = make_preference_list("q", {a, b, c}, {0.5, 0.5, 0.5});
    CHECK(all_tied.candidates.size() == 1);
    CHECK(all_tied.rewards == std::vector<double>{1.0});
}

TEST_CASE("listwise loss: empty sum at k=1, closed form at k=2") {
    const auto kb = five_desc_kb();
    const auto policy = make_policy(256, 3);
    const std::string query = "a tent by the lake";
    const auto space = action_space(query, kb, policy.grammar);

    RewriteCandidate c1, c2;
    c1.actions = {RewriteAction{0, space.choices[0][1]}};
    c1.text = render_rewrite(query, space, c1.actions);
    c2.actions = {RewriteAction{0, space.choices[0][2]}};
    c2.text = render_rewrite(query, space, c2.actions);

    const auto single = make_preference_list(query, {c1}, {0.9});
    const auto res1 = pro_loss(policy, kb, single);
    CHECK(res1.loss == 0.0);
    for (double g : res1.grad) CHECK(g == 0.0);

    // rewards (2, 1) normalize to (1, 0): unit temperature; zero weights give
    // equal normalized log-probabilities
    const auto pair = make_preference_list(query, {c1, c2}, {2.0, 1.0});
    const auto res2 = pro_loss(policy, kb, pair);
    CHECK(res2.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(std::abs(res2.loss - 0.693147) <= 1e-5);
}

TEST_CASE("at k=2 the listwise loss is the pairwise negative log form") {
    const auto kb = five_desc_kb();
    const std::string query = "a tent by the lake";
    Rng rng(53);
    for (int trial = 0; trial < 10; ++trial) {
        auto policy = random_policy(256, rng);
        const auto space = action_space(query, kb, policy.grammar);
        RewriteCandidate c1, c2;
        c1.actions = {RewriteAction{0, space.choices[0][3]}};
        c1.text = render_rewrite(query, space, c1.actions);
        c2.actions = {RewriteAction{0, space.choices[0][7]}};
        c2.text = render_rewrite(query, space, c2.actions);

        const auto pref = make_preference_list(query, {c1, c2}, {1.0, 0.0});
        const auto res = pro_loss(policy, kb, pref);

        const double pi1 = policy_logprob(policy, query, kb, pref.candidates[0].actions).loss;
        const double pi2 = policy_logprob(policy, query, kb, pref.candidates[1].actions).loss;
        const double reference = -std::log(bt_probability(pi1, pi2));
        CHECK(res.loss == doctest::Approx(reference).epsilon(1e-12));
    }
}

TEST_CASE("listwise loss rejects non-decreasing rewards") {
    const auto kb = five_desc_kb();
    const auto policy = make_policy(128, 3);
    const std::string query = "a tent by the lake";
    const auto space = action_space(query, kb, policy.grammar);
    RewriteCandidate c1, c2;
    c1.actions = {RewriteAction{0, space.choices[0][1]}};
    c1.text = render_rewrite(query, space, c1.actions);
    c2 = c1;

    PreferenceList pref;
    pref.x = query;
    pref.candidates = {c1, c2};
    pref.rewards = {0.5, 0.5};
    CHECK_THROWS_AS(pro_loss(policy, kb, pref), DegenerateRanking);
}

TEST_CASE("listwise gradient matches finite differences") {
    const auto kb = ambiguous_kb();
    const std::string query = "the bank at dusk";
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        auto policy = random_policy(128, rng);
        const auto space = action_space(query, kb, policy.grammar);
        std::vector<RewriteCandidate> cands;
        std::vector<double> rewards;
        for (int i = 0; i < 4; ++i) {
            RewriteCandidate c;
            c.actions = pick_actions(space, rng);
            c.text = render_rewrite(query, space, c.actions);
            cands.push_back(std::move(c));
            rewards.push_back(0.1 * static_cast<double>(i) + rng.next_unit() * 0.05);
        }
        const auto pref = make_preference_list(query, cands, rewards);
        if (pref.candidates.size() < 2) continue;
        const auto res = pro_loss(policy, kb, pref);
        CHECK(res.loss >= 0.0);
        const auto eval = [&]() { return pro_loss(policy, kb, pref).loss; };
        CHECK(evdtest::max_grad_rel_error(policy.theta, eval, res.grad) <= 1e-5);
    }
}

TEST_CASE("alignment objective composes the two terms") {
    // beta = 0 reduces to the listwise loss alone
    const auto kb_pro = five_desc_kb();
    const auto zero_policy = make_policy(256, 3);
    const std::string q1 = "a tent by the lake";
    const auto space1 = action_space(q1, kb_pro, zero_policy.grammar);
    RewriteCandidate c1, c2;
    c1.actions = {RewriteAction{0, space1.choices[0][1]}};
    c1.text = render_rewrite(q1, space1, c1.actions);
    c2.actions = {RewriteAction{0, space1.choices[0][2]}};
    c2.text = render_rewrite(q1, space1, c2.actions);
    const auto pref1 = make_preference_list(q1, {c1, c2}, {2.0, 1.0});
    const auto pro_only = align_loss(zero_policy, kb_pro, {pref1}, {}, 0.0);
    CHECK(pro_only.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // beta = 0.2 with PRO = ln 2 and SFT = 3 ln 4 in one KB
    auto kb_all = kb_with({{"tent", {"has fabric walls"}},
                           {"kayak", {"has a narrow hull"}},
                           {"glacier", {"has fissured blue ice"}},
                           {"lantern",
                            {"has amber glass", "has a wire handle", "has a hinged door",
                             "has soot stains", "has a brass cap"}}});
    const std::string q_pro = "a lantern glows";
    const auto space_pro = action_space(q_pro, kb_all, zero_policy.grammar);
    RewriteCandidate p1, p2;
    p1.actions = {RewriteAction{0, space_pro.choices[0][1]}};
    p1.text = render_rewrite(q_pro, space_pro, p1.actions);
    p2.actions = {RewriteAction{0, space_pro.choices[0][2]}};
    p2.text = render_rewrite(q_pro, space_pro, p2.actions);
    const auto pref_all = make_preference_list(q_pro, {p1, p2}, {2.0, 1.0});

    const std::string q_sft = "a tent beside a kayak under the glacier";
    const auto space_sft = action_space(q_sft, kb_all, zero_policy.grammar);
    Rng rng(3);
    const auto sft_actions = pick_actions(space_sft, rng);

    const auto combined =
        align_loss(zero_policy, kb_all, {pref_all}, {RewriteExample{q_sft, sft_actions}}, 0.2);
    CHECK(combined.loss ==
          doctest::Approx(std::log(2.0) + 0.2 * 3.0 * std::log(4.0)).epsilon(1e-9));
    CHECK(std::abs(combined.loss - 1.5249) <= 2e-4);
}

TEST_CASE("alignment gradient matches finite differences") {
    const auto kb = ambiguous_kb();
    const std::string query = "the bank at dusk";
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto policy = random_policy(128, rng);
        const auto space = action_space(query, kb, policy.grammar);
        std::vector<RewriteCandidate> cands;
        std::vector<double> rewards;
        for (int i = 0; i < 3; ++i) {
            RewriteCandidate c;
            c.actions = pick_actions(space, rng);
            c.text = render_rewrite(query, space, c.actions);
            cands.push_back(std::move(c));
            rewards.push_back(static_cast<double>(i) + rng.next_unit() * 0.2);
        }
        const auto pref = make_preference_list(query, cands, rewards);
        if (pref.candidates.size() < 2) continue;
        std::vector<RewriteExample> sft = {RewriteExample{query, pick_actions(space, rng)}};

        const auto res = align_loss(policy, kb, {pref}, sft, 0.2);
        const auto eval = [&]() { return align_loss(policy, kb, {pref}, sft, 0.2).loss; };
        CHECK(evdtest::max_grad_rel_error(policy.theta, eval, res.grad) <= 1e-5);
    }
}

TEST_CASE("warm-up lifts the label above the uniform baseline within 100 steps") {
    const auto kb = five_desc_kb();
    const std::string query = "a tent by the lake";
    auto policy = make_policy(512, 9);
    const auto space = action_space(query, kb, policy.grammar);

    RewriteCandidate label;
    label.actions = {RewriteAction{0, space.choices[0][5]}};
    label.text = render_rewrite(query, space, label.actions);
    label.score = 0.9;

    const double uniform = -std::log(16.0);
    RewriterTrainConfig cfg;
    cfg.lr = 0.5;
    cfg.steps = 100;
    const auto trained =
        train_rewriter(policy, kb, {RewriteDatasetRecord{query, {label}}}, TrainPhase::warmup,
                       cfg);
    const double lifted = policy_logprob(trained, query, kb, label.actions).loss;
    CHECK(lifted > uniform);
}

TEST_CASE("alignment skips records whose rewards are all tied") {
    const auto kb = five_desc_kb();
    const std::string query = "a tent by the lake";
    auto policy = make_policy(256, 9);
    const auto space = action_space(query, kb, policy.grammar);

    RewriteCandidate c1, c2;
    c1.actions = {RewriteAction{0, space.choices[0][1]}};
    c1.text = render_rewrite(query, space, c1.actions);
    c1.score = 0.5;
    c2.actions = {RewriteAction{0, space.choices[0][2]}};
    c2.text = render_rewrite(query, space, c2.actions);
    c2.score = 0.5;  // tie

    RewriterTrainConfig cfg;
    cfg.steps = 10;
    const auto unchanged = train_rewriter(policy, kb, {RewriteDatasetRecord{query, {c1, c2}}},
                                          TrainPhase::align, cfg);
    CHECK(unchanged.theta == policy.theta);
}

TEST_CASE("training is deterministic for a fixed seed and config") {
    const auto kb = five_desc_kb();
    const std::string query = "a tent by the lake";
    auto policy = make_policy(256, 9);
    const auto space = action_space(query, kb, policy.grammar);

    std::vector<RewriteCandidate> cands;
    for (std::size_t i = 1; i <= 3; ++i) {
        RewriteCandidate c;
        c.actions = {RewriteAction{0, space.choices[0][i]}};
        c.text = render_rewrite(query, space, c.actions);
        c.score = 0.5 + 0.1 * static_cast<double>(i);
        cands.push_back(std::move(c));
    }
    std::vector<RewriteDatasetRecord> dataset = {RewriteDatasetRecord{query, cands}};

    RewriterTrainConfig cfg;
    cfg.steps = 40;
    const auto a = train_rewriter(policy, kb, dataset, TrainPhase::align, cfg);
    const auto b = train_rewriter(policy, kb, dataset, TrainPhase::align, cfg);
    CHECK(a.theta == b.theta);
}

TEST_CASE("ambiguous slots decode one parallel rewrite per sense") {
    const auto kb = ambiguous_kb();
    Rng rng(77);
    const auto policy = random_policy(512, rng);
    const auto variants = decode_parallel_senses(policy, "the bank at dusk", kb);
    REQUIRE(variants.size() == 2);
    std::set<std::string> tags;
    for (const auto& v : variants) {
        REQUIRE(v.actions.size() == 1);
        CHECK_FALSE(v.actions[0].choice.skip);
        tags.insert(v.actions[0].choice.sense_tag.value_or(""));
    }
    CHECK(tags == std::set<std::string>{"financial institution", "riverbank"});

    const auto plain = decode_parallel_senses(policy, "a tent glows", five_desc_kb());
    CHECK(plain.size() == 1);
}

TEST_CASE("policy checkpoints round-trip bit-exactly") {
    TempDir dir("pol");
    Rng rng(13);
    RewriteGrammar grammar;
    grammar.h = 4;
    grammar.templates = {"parenthetical", "relative"};
    auto policy = random_policy(128, rng, grammar);
    save_policy(policy, dir.str("policy.ckpt"));
    const auto loaded = load_policy(dir.str("policy.ckpt"));
    CHECK(loaded.theta == policy.theta);
    CHECK(loaded.feature_seed == policy.feature_seed);
    CHECK(loaded.grammar == policy.grammar);
}

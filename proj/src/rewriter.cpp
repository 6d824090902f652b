#include "evdrank/rewriter.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "evdrank/util.hpp"

namespace evdrank {

namespace {

std::vector<RewriteChoice> enumerate_choices(const SlotContext& slot,
                                             const RewriteGrammar& grammar) {
    std::vector<RewriteChoice> out;
    out.push_back(RewriteChoice{});  // id 0 = SKIP
    for (const auto& entry : slot.senses) {
        const std::size_t n_desc = std::min(grammar.h, entry.descriptions.size());
        for (std::size_t d = 0; d < n_desc; ++d) {
            for (std::size_t t = 0; t < grammar.templates.size(); ++t) {
                RewriteChoice c;
                c.skip = false;
                c.desc_index = d;
                c.template_index = t;
                c.sense_tag = entry.sense.sense_tag;
                out.push_back(std::move(c));
            }
        }
    }
    return out;
}

std::string choice_sig(const RewriteChoice& c) {
    if (c.skip) return "s";
    return "d" + std::to_string(c.desc_index) + ".t" + std::to_string(c.template_index) + ".g" +
           c.sense_tag.value_or("-");
}

// Sparse feature buckets for one (slot, choice) decision. Cross features tie
// the choice to the query tokens, the slot entity, and a summary of previous
// actions; plain choice features let preferences generalize to unseen queries.
std::vector<std::uint32_t> choice_features(const std::vector<std::string>& query_tokens,
                                           const SlotContext& slot, const RewriteChoice& choice,
                                           const RewriteGrammar& grammar,
                                           std::size_t prev_nonskip, const std::string& prev_sig,
                                           std::size_t dim, std::uint64_t feature_seed) {
    const std::string sig = choice_sig(choice);
    std::vector<std::string> feats;
    feats.reserve(query_tokens.size() + 8);
    feats.push_back("b|" + sig);
    if (choice.skip) {
        feats.push_back("k|skip");
    } else {
        feats.push_back("k|go");
        feats.push_back("t|" + grammar.templates[choice.template_index]);
        feats.push_back("d|" + std::to_string(choice.desc_index));
        feats.push_back("g|" + choice.sense_tag.value_or("-"));
    }
    feats.push_back("e|" + slot.match.entity + "|" + sig);
    for (const auto& tok : query_tokens) feats.push_back("q|" + tok + "|" + sig);
    feats.push_back("p|" + std::to_string(std::min<std::size_t>(prev_nonskip, 3)) + "|" + sig);
    feats.push_back("pl|" + prev_sig + "|" + sig);

    std::vector<std::uint32_t> buckets;
    buckets.reserve(feats.size());
    const std::uint64_t h0 = hash_mix(kFnvOffset, feature_seed);
    for (const auto& f : feats)
        buckets.push_back(static_cast<std::uint32_t>(fnv1a64(f, h0) % dim));
    return buckets;
}

double dot_theta(const std::vector<double>& theta, const std::vector<std::uint32_t>& buckets) {
    double s = 0.0;
    for (auto b : buckets) s += theta[b];
    return s;
}

std::optional<std::size_t> find_choice_id(const ActionSpace& space, std::size_t slot,
                                          const RewriteChoice& choice) {
    const auto& list = space.choices[slot];
    for (std::size_t i = 0; i < list.size(); ++i)
        if (list[i] == choice) return i;
    return std::nullopt;
}

void check_actions(const ActionSpace& space, const std::vector<RewriteAction>& actions) {
    if (actions.size() != space.slots.size())
        throw IllegalAction("expected " + std::to_string(space.slots.size()) + " actions, got " +
                            std::to_string(actions.size()));
    for (std::size_t t = 0; t < actions.size(); ++t) {
        if (actions[t].slot != t)
            throw IllegalAction("action " + std::to_string(t) + " targets slot " +
                                std::to_string(actions[t].slot));
        if (!find_choice_id(space, t, actions[t].choice))
            throw IllegalAction("choice at slot " + std::to_string(t) +
                                " is outside the action space");
    }
}

std::string strip_leading_has(const std::string& desc) {
    if (desc.rfind("has ", 0) == 0) return desc.substr(4);
    return desc;
}

const EvdEntry& resolve_entry(const SlotContext& slot, const RewriteChoice& choice) {
    for (const auto& entry : slot.senses)
        if (entry.sense.sense_tag == choice.sense_tag) return entry;
    throw IllegalAction("sense tag does not name a sense of '" + slot.match.entity + "'");
}

// Slot logits plus log-softmax, shared by logprob and both decoders.
struct SlotEval {
    std::vector<double> logits;
    std::vector<double> logprobs;
    std::vector<std::vector<std::uint32_t>> features;
};

SlotEval eval_slot(const RewritePolicy& policy, const ActionSpace& space,
                   const std::vector<std::string>& query_tokens, std::size_t slot,
                   std::size_t prev_nonskip, const std::string& prev_sig) {
    SlotEval ev;
    const auto& list = space.choices[slot];
    ev.logits.reserve(list.size());
    ev.features.reserve(list.size());
    for (const auto& c : list) {
        auto buckets = choice_features(query_tokens, space.slots[slot], c, space.grammar,
                                       prev_nonskip, prev_sig, policy.theta.size(),
                                       policy.feature_seed);
        ev.logits.push_back(dot_theta(policy.theta, buckets));
        ev.features.push_back(std::move(buckets));
    }
    const double m = *std::max_element(ev.logits.begin(), ev.logits.end());
    double z = 0.0;
    for (double l : ev.logits) z += std::exp(l - m);
    const double lse = m + std::log(z);
    ev.logprobs.reserve(ev.logits.size());
    for (double l : ev.logits) ev.logprobs.push_back(l - lse);
    return ev;
}

struct PrevState {
    std::size_t nonskip = 0;
    std::string sig = "^";
};

void advance_prev(PrevState& prev, const RewriteChoice& chosen) {
    if (!chosen.skip) ++prev.nonskip;
    prev.sig = choice_sig(chosen);
}

}  // namespace

ActionSpace action_space(const std::string& query, const EvdKnowledgeBase& kb,
                         const RewriteGrammar& grammar) {
    ActionSpace space;
    space.grammar = grammar;
    for (const auto& match : kb.link_entities(query)) {
        SlotContext slot;
        slot.senses = kb.lookup(match.entity);
        slot.match = match;
        space.slots.push_back(std::move(slot));
    }
    for (const auto& slot : space.slots)
        space.choices.push_back(enumerate_choices(slot, grammar));
    return space;
}

ActionSpace action_space_from_matches(
    const std::vector<std::pair<EntityMatch, EvdEntry>>& matched, const RewriteGrammar& grammar) {
    ActionSpace space;
    space.grammar = grammar;
    // Pairs sharing a match span are senses of one slot; spans arrive ordered.
    for (const auto& [match, entry] : matched) {
        if (!space.slots.empty() && space.slots.back().match == match) {
            space.slots.back().senses.push_back(entry);
        } else {
            SlotContext slot;
            slot.match = match;
            slot.senses.push_back(entry);
            space.slots.push_back(std::move(slot));
        }
    }
    for (const auto& slot : space.slots)
        space.choices.push_back(enumerate_choices(slot, grammar));
    return space;
}

std::string render_rewrite(const std::string& query, const ActionSpace& space,
                           const std::vector<RewriteAction>& actions) {
    check_actions(space, actions);
    std::string out;
    std::size_t pos = 0;
    for (std::size_t t = 0; t < actions.size(); ++t) {
        const auto& choice = actions[t].choice;
        if (choice.skip) continue;
        const auto& slot = space.slots[t];
        const auto& entry = resolve_entry(slot, choice);
        if (choice.desc_index >= entry.descriptions.size())
            throw IllegalAction("desc_index out of range at slot " + std::to_string(t));
        const std::string& desc = entry.descriptions[choice.desc_index];
        const std::string entity_text =
            query.substr(slot.match.begin, slot.match.end - slot.match.begin);
        const std::string& tmpl = space.grammar.templates[choice.template_index];

        std::string replacement;
        if (tmpl == "appositive")
            replacement = entity_text + ", which " + desc + ",";
        else if (tmpl == "relative")
            replacement = entity_text + " with " + strip_leading_has(desc);
        else if (tmpl == "parenthetical")
            replacement = entity_text + " (" + desc + ")";
        else
            throw IllegalAction("unknown template: " + tmpl);

        out += query.substr(pos, slot.match.begin - pos);
        out += replacement;
        pos = slot.match.end;
    }
    out += query.substr(pos);
    return out;
}

RewritePolicy make_policy(std::size_t feature_dim, std::uint64_t feature_seed,
                          RewriteGrammar grammar) {
    RewritePolicy p;
    p.theta.assign(feature_dim, 0.0);
    p.feature_seed = feature_seed;
    p.grammar = std::move(grammar);
    return p;
}

LossResult policy_logprob(const RewritePolicy& policy, const std::string& query,
                          const EvdKnowledgeBase& kb, const std::vector<RewriteAction>& actions) {
    const ActionSpace space = action_space(query, kb, policy.grammar);
    check_actions(space, actions);
    const auto query_tokens = tokenize(query);

    LossResult res;
    res.grad.assign(policy.theta.size(), 0.0);
    PrevState prev;
    for (std::size_t t = 0; t < space.slots.size(); ++t) {
        const auto ev = eval_slot(policy, space, query_tokens, t, prev.nonskip, prev.sig);
        const std::size_t taken = *find_choice_id(space, t, actions[t].choice);
        res.loss += ev.logprobs[taken];
        // d logprob / d theta = phi(taken) - sum_c p_c phi(c)
        for (auto b : ev.features[taken]) res.grad[b] += 1.0;
        for (std::size_t c = 0; c < ev.features.size(); ++c) {
            const double p = std::exp(ev.logprobs[c]);
            for (auto b : ev.features[c]) res.grad[b] -= p;
        }
        advance_prev(prev, actions[t].choice);
    }
    return res;
}

namespace {

RewriteCandidate decode_impl(const RewritePolicy& policy, const std::string& query,
                             const EvdKnowledgeBase& kb, Rng* rng, double temperature,
                             const std::optional<std::pair<std::size_t, std::string>>& pin) {
    const ActionSpace space = action_space(query, kb, policy.grammar);
    const auto query_tokens = tokenize(query);

    RewriteCandidate cand;
    double logprob = 0.0;
    PrevState prev;
    for (std::size_t t = 0; t < space.slots.size(); ++t) {
        const auto ev = eval_slot(policy, space, query_tokens, t, prev.nonskip, prev.sig);
        const auto& list = space.choices[t];

        // Candidate choice ids at this slot; a pinned slot is restricted to the
        // concrete choices of one sense.
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (pin && pin->first == t) {
                if (list[i].skip || list[i].sense_tag.value_or("") != pin->second) continue;
            }
            ids.push_back(i);
        }
        if (ids.empty()) ids.push_back(0);

        std::size_t picked = ids[0];
        if (rng == nullptr) {
            for (std::size_t id : ids)
                if (ev.logits[id] > ev.logits[picked]) picked = id;  // ties keep smallest id
        } else {
            const double temp = std::max(temperature, 1e-9);
            double m = ev.logits[ids[0]];
            for (std::size_t id : ids) m = std::max(m, ev.logits[id]);
            std::vector<double> w(ids.size());
            double z = 0.0;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                w[i] = std::exp((ev.logits[ids[i]] - m) / temp);
                z += w[i];
            }
            double u = rng->next_unit() * z;
            std::size_t i = 0;
            for (; i + 1 < ids.size(); ++i) {
                if (u < w[i]) break;
                u -= w[i];
            }
            picked = ids[i];
        }

        logprob += ev.logprobs[picked];
        cand.actions.push_back(RewriteAction{t, list[picked]});
        advance_prev(prev, list[picked]);
    }
    cand.text = render_rewrite(query, space, cand.actions);
    cand.logprob = logprob;
    return cand;
}

}  // namespace

RewriteCandidate decode_greedy(const RewritePolicy& policy, const std::string& query,
                               const EvdKnowledgeBase& kb) {
    return decode_impl(policy, query, kb, nullptr, 0.0, std::nullopt);
}

RewriteCandidate decode_sample(const RewritePolicy& policy, const std::string& query,
                               const EvdKnowledgeBase& kb, std::uint64_t seed,
                               double temperature) {
    Rng rng(hash_mix(seed, fnv1a64(query)));
    return decode_impl(policy, query, kb, &rng, temperature, std::nullopt);
}

std::vector<RewriteCandidate> decode_parallel_senses(const RewritePolicy& policy,
                                                     const std::string& query,
                                                     const EvdKnowledgeBase& kb) {
    const ActionSpace space = action_space(query, kb, policy.grammar);
    std::vector<RewriteCandidate> out;
    std::set<std::string> seen;
    bool any_ambiguous = false;
    for (std::size_t t = 0; t < space.slots.size(); ++t) {
        if (space.slots[t].senses.size() < 2) continue;
        any_ambiguous = true;
        for (const auto& entry : space.slots[t].senses) {
            auto cand = decode_impl(policy, query, kb, nullptr, 0.0,
                                    std::make_pair(t, entry.sense.sense_tag.value_or("")));
            if (seen.insert(cand.text).second) out.push_back(std::move(cand));
        }
    }
    if (!any_ambiguous) out.push_back(decode_greedy(policy, query, kb));
    return out;
}

LossResult sft_loss(const RewritePolicy& policy, const EvdKnowledgeBase& kb,
                    const std::vector<RewriteExample>& dataset) {
    LossResult res;
    res.grad.assign(policy.theta.size(), 0.0);
    if (dataset.empty()) return res;
    const double inv_n = 1.0 / static_cast<double>(dataset.size());
    for (const auto& ex : dataset) {
        const auto lp = policy_logprob(policy, ex.query, kb, ex.actions);
        res.loss -= inv_n * lp.loss;
        for (std::size_t i = 0; i < res.grad.size(); ++i) res.grad[i] -= inv_n * lp.grad[i];
    }
    if (!std::isfinite(res.loss)) throw NonFiniteLoss("sft loss is not finite");
    return res;
}

double bt_probability(double r1, double r2) {
    // exp(r1) / (exp(r1) + exp(r2)) without overflow
    if (r1 >= r2) return 1.0 / (1.0 + std::exp(r2 - r1));
    const double e = std::exp(r1 - r2);
    return e / (1.0 + e);
}

PreferenceList make_preference_list(const std::string& x, std::vector<RewriteCandidate> candidates,
                                    const std::vector<double>& raw_rewards) {
    if (candidates.empty() || candidates.size() != raw_rewards.size())
        throw Error("preference list needs one reward per candidate");

    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return raw_rewards[a] > raw_rewards[b];
    });

    PreferenceList pref;
    pref.x = x;
    for (std::size_t idx : order) {
        const double r = raw_rewards[idx];
        if (!pref.rewards.empty() && pref.rewards.back() - r < 1e-9)
            continue;  // tie with the higher-ranked candidate: collapse
        pref.candidates.push_back(std::move(candidates[idx]));
        pref.rewards.push_back(r);
    }

    if (pref.rewards.size() >= 2) {
        const double hi = pref.rewards.front();
        const double lo = pref.rewards.back();
        for (double& r : pref.rewards) r = (r - lo) / (hi - lo);
    } else {
        pref.rewards.front() = 1.0;
    }
    return pref;
}

LossResult pro_loss(const RewritePolicy& policy, const EvdKnowledgeBase& kb,
                    const PreferenceList& pref) {
    LossResult res;
    res.grad.assign(policy.theta.size(), 0.0);
    const std::size_t k = pref.candidates.size();
    if (k <= 1) return res;  // empty ranking sum

    for (std::size_t j = 0; j + 1 < k; ++j)
        if (!(pref.rewards[j] > pref.rewards[j + 1]))
            throw DegenerateRanking("rewards must be strictly decreasing");

    // Length-normalized candidate log-probabilities and their gradients.
    std::vector<double> pi(k);
    std::vector<std::vector<double>> gpi(k);
    for (std::size_t i = 0; i < k; ++i) {
        auto lp = policy_logprob(policy, pref.x, kb, pref.candidates[i].actions);
        const double inv_len =
            1.0 / static_cast<double>(std::max<std::size_t>(1, pref.candidates[i].actions.size()));
        pi[i] = lp.loss * inv_len;
        for (double& g : lp.grad) g *= inv_len;
        gpi[i] = std::move(lp.grad);
    }

    // coeff c_{j,i} = 1 / T_j^i = r_j - r_i for i > j; the positive term uses
    // T_j^j = min_{i>j} T_j^i, i.e. the largest reward gap in the tail.
    for (std::size_t j = 0; j + 1 < k; ++j) {
        std::vector<double> a(k - j);
        std::vector<double> coeff(k - j);
        coeff[0] = pref.rewards[j] - pref.rewards[k - 1];
        a[0] = pi[j] * coeff[0];
        for (std::size_t i = j + 1; i < k; ++i) {
            coeff[i - j] = pref.rewards[j] - pref.rewards[i];
            a[i - j] = pi[i] * coeff[i - j];
        }

        const double m = *std::max_element(a.begin(), a.end());
        double z = 0.0;
        for (double v : a) z += std::exp(v - m);
        const double lse = m + std::log(z);
        res.loss += lse - a[0];

        for (std::size_t i = j; i < k; ++i) {
            const double p = std::exp(a[i - j] - lse);
            const double w = (p - (i == j ? 1.0 : 0.0)) * coeff[i - j];
            if (w == 0.0) continue;
            const auto& g = gpi[i];
            for (std::size_t b = 0; b < res.grad.size(); ++b) res.grad[b] += w * g[b];
        }
    }
    if (!std::isfinite(res.loss)) throw NonFiniteLoss("ranking loss is not finite");
    return res;
}

LossResult align_loss(const RewritePolicy& policy, const EvdKnowledgeBase& kb,
                      const std::vector<PreferenceList>& pref_dataset,
                      const std::vector<RewriteExample>& sft_dataset, double beta) {
    LossResult res;
    res.grad.assign(policy.theta.size(), 0.0);
    if (!pref_dataset.empty()) {
        const double inv_n = 1.0 / static_cast<double>(pref_dataset.size());
        for (const auto& pref : pref_dataset) {
            const auto pl = pro_loss(policy, kb, pref);
            res.loss += inv_n * pl.loss;
            for (std::size_t i = 0; i < res.grad.size(); ++i) res.grad[i] += inv_n * pl.grad[i];
        }
    }
    if (beta > 0.0 && !sft_dataset.empty()) {
        const auto sl = sft_loss(policy, kb, sft_dataset);
        res.loss += beta * sl.loss;
        for (std::size_t i = 0; i < res.grad.size(); ++i) res.grad[i] += beta * sl.grad[i];
    }
    return res;
}

namespace {

const RewriteCandidate& best_candidate(const RewriteDatasetRecord& rec) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < rec.candidates.size(); ++i)
        if (rec.candidates[i].score.value_or(0.0) > rec.candidates[best].score.value_or(0.0))
            best = i;
    return rec.candidates[best];
}

}  // namespace

RewritePolicy train_rewriter(RewritePolicy policy, const EvdKnowledgeBase& kb,
                             const std::vector<RewriteDatasetRecord>& dataset, TrainPhase phase,
                             const RewriterTrainConfig& config) {
    if (dataset.empty()) throw Error("rewriter training dataset is empty");

    if (phase == TrainPhase::warmup) {
        std::vector<RewriteExample> examples;
        for (const auto& rec : dataset) {
            if (rec.candidates.empty()) continue;
            examples.push_back(RewriteExample{rec.query, best_candidate(rec).actions});
        }
        if (examples.empty()) throw Error("no labeled candidates for warm-up");
        for (std::size_t step = 0; step < config.steps; ++step) {
            const auto l = sft_loss(policy, kb, examples);
            for (std::size_t i = 0; i < policy.theta.size(); ++i)
                policy.theta[i] -= config.lr * l.grad[i];
        }
        return policy;
    }

    // Preference alignment. With score rewards the lists are fixed constants;
    // with logprob rewards they are rebuilt from the current policy each step.
    auto build_lists = [&](const RewritePolicy& pol) {
        std::vector<PreferenceList> prefs;
        std::vector<RewriteExample> sfts;
        for (const auto& rec : dataset) {
            if (rec.candidates.empty()) continue;
            std::vector<double> rewards;
            for (const auto& cand : rec.candidates) {
                if (config.reward_mode == RewardMode::scores) {
                    rewards.push_back(cand.score.value_or(0.0));
                } else {
                    const auto lp = policy_logprob(pol, rec.query, kb, cand.actions);
                    rewards.push_back(lp.loss /
                                      static_cast<double>(std::max<std::size_t>(
                                          1, cand.actions.size())));
                }
            }
            auto pref = make_preference_list(rec.query, rec.candidates, rewards);
            if (pref.candidates.size() < 2) continue;  // all rewards tied: skip record
            sfts.push_back(RewriteExample{rec.query, pref.candidates.front().actions});
            prefs.push_back(std::move(pref));
        }
        return std::make_pair(std::move(prefs), std::move(sfts));
    };

    auto [prefs, sfts] = build_lists(policy);
    if (prefs.empty()) {
        std::cerr << "warning: preference alignment skipped every record (tied rewards); "
                     "policy unchanged\n";
        return policy;
    }
    for (std::size_t step = 0; step < config.steps; ++step) {
        if (config.reward_mode == RewardMode::logprob) {
            std::tie(prefs, sfts) = build_lists(policy);
            if (prefs.empty()) {
                std::cerr << "warning: preference alignment stopped at step " << step
                          << " (tied rewards)\n";
                return policy;
            }
        }
        const auto l = align_loss(policy, kb, prefs, sfts, config.beta);
        for (std::size_t i = 0; i < policy.theta.size(); ++i)
            policy.theta[i] -= config.lr * l.grad[i];
    }
    return policy;
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void save_policy(const RewritePolicy& policy, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open policy checkpoint for writing: " + path);
    nlohmann::json header;
    header["format"] = "evdrank-rewriter";
    header["schema_version"] = 1;
    header["feature_dim"] = policy.theta.size();
    header["feature_seed"] = policy.feature_seed;
    header["h"] = policy.grammar.h;
    header["templates"] = policy.grammar.templates;
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(policy.theta.data()),
              static_cast<std::streamsize>(policy.theta.size() * sizeof(double)));
    if (!out) throw IoFailure("write failed: " + path);
}

RewritePolicy load_policy(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open policy checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line)) throw MalformedRecord(1, "missing policy header");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "evdrank-rewriter" ||
        header.value("schema_version", -1) != 1)
        throw MalformedRecord(1, "bad policy header");
    RewritePolicy policy;
    const auto dim = header.value("feature_dim", std::size_t{0});
    policy.feature_seed = header.value("feature_seed", std::uint64_t{0});
    policy.grammar.h = header.value("h", std::size_t{5});
    if (header.contains("templates") && header["templates"].is_array())
        policy.grammar.templates = header["templates"].get<std::vector<std::string>>();
    if (dim == 0) throw MalformedRecord(1, "bad feature_dim");
    policy.theta.resize(dim);
    in.read(reinterpret_cast<char*>(policy.theta.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    if (!in) throw MalformedRecord(2, "policy checkpoint truncated");
    return policy;
}

}  // namespace evdrank

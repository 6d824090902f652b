#pragma once
// Description-aware query rewriter. A query is segmented into entity slots;
// each slot takes either SKIP or a (sense, description, template) choice. The
// policy is log-linear and autoregressive over slots: per-slot softmax over
// the legal choices of theta . phi(query, slot, choice, previous actions).
//
// Training has two phases: supervised warm-up on best rewrite labels, and
// listwise preference alignment with reward-gap temperatures plus a weighted
// SFT term. All losses return analytic gradients over theta.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evdrank/errors.hpp"
#include "evdrank/kb.hpp"

namespace evdrank {

// One legal decision at a slot. `skip` leaves the slot untouched; otherwise
// desc_index selects within the resolved entry and template_index selects the
// integration template. sense_tag resolves the entry for ambiguous entities.
struct RewriteChoice {
    bool skip = true;
    std::size_t desc_index = 0;
    std::size_t template_index = 0;
    std::optional<std::string> sense_tag;

    friend bool operator==(const RewriteChoice&, const RewriteChoice&) = default;
};

struct RewriteAction {
    std::size_t slot = 0;
    RewriteChoice choice;

    friend bool operator==(const RewriteAction&, const RewriteAction&) = default;
};

// Inventory shared by the action space, renderer, and policy: how many
// descriptions per entity are usable and which templates exist, in order.
struct RewriteGrammar {
    std::size_t h = 5;
    std::vector<std::string> templates = {"appositive", "relative", "parenthetical"};

    friend bool operator==(const RewriteGrammar&, const RewriteGrammar&) = default;
};

struct SlotContext {
    EntityMatch match;
    std::vector<EvdEntry> senses;  // deterministic order: untagged first, then tag order
};

// Per-slot legal choices; choice id 0 is always SKIP, concrete choices follow
// in (sense, description, template) enumeration order.
struct ActionSpace {
    RewriteGrammar grammar;
    std::vector<SlotContext> slots;
    std::vector<std::vector<RewriteChoice>> choices;
};

ActionSpace action_space(const std::string& query, const EvdKnowledgeBase& kb,
                         const RewriteGrammar& grammar);
ActionSpace action_space_from_matches(
    const std::vector<std::pair<EntityMatch, EvdEntry>>& matched, const RewriteGrammar& grammar);

// Renders the rewrite produced by `actions` (one per slot, in slot order).
// Insertions are applied left to right with byte offsets corrected as the
// output grows. All-SKIP returns the query unchanged.
std::string render_rewrite(const std::string& query, const ActionSpace& space,
                           const std::vector<RewriteAction>& actions);

struct RewriteCandidate {
    std::vector<RewriteAction> actions;
    std::string text;
    std::optional<double> score;    // retriever similarity, filled downstream
    std::optional<double> logprob;  // policy log-probability, filled by decode

    friend bool operator==(const RewriteCandidate&, const RewriteCandidate&) = default;
};

struct RewritePolicy {
    std::vector<double> theta;
    std::uint64_t feature_seed = 0;
    RewriteGrammar grammar;
};

RewritePolicy make_policy(std::size_t feature_dim, std::uint64_t feature_seed,
                          RewriteGrammar grammar = {});

struct LossResult {
    double loss = 0.0;
    std::vector<double> grad;  // over theta
};

// Sum over slots of log softmax(theta . phi) at the taken choice, with the
// analytic gradient. Throws IllegalAction when an action is outside the
// query's action space.
LossResult policy_logprob(const RewritePolicy& policy, const std::string& query,
                          const EvdKnowledgeBase& kb, const std::vector<RewriteAction>& actions);

RewriteCandidate decode_greedy(const RewritePolicy& policy, const std::string& query,
                               const EvdKnowledgeBase& kb);
RewriteCandidate decode_sample(const RewritePolicy& policy, const std::string& query,
                               const EvdKnowledgeBase& kb, std::uint64_t seed,
                               double temperature = 1.0);

// Greedy decodes with ambiguous slots pinned to each of their senses in turn;
// one candidate per (ambiguous slot, sense), or the single unconstrained
// greedy when no slot is ambiguous. Deduplicated by rendered text.
std::vector<RewriteCandidate> decode_parallel_senses(const RewritePolicy& policy,
                                                     const std::string& query,
                                                     const EvdKnowledgeBase& kb);

struct RewriteExample {
    std::string query;
    std::vector<RewriteAction> actions;
};

// Mean negative log-likelihood of the labels.
LossResult sft_loss(const RewritePolicy& policy, const EvdKnowledgeBase& kb,
                    const std::vector<RewriteExample>& dataset);

// Pairwise preference probability exp(r1) / (exp(r1) + exp(r2)), overflow-safe.
double bt_probability(double r1, double r2);

// A ranked candidate list ready for the listwise loss: rewards are the raw
// retriever scores sorted descending, ties (gap < 1e-9) collapsed to the
// higher-ranked candidate, then min-max normalized to [0, 1].
struct PreferenceList {
    std::string x;
    std::vector<RewriteCandidate> candidates;
    std::vector<double> rewards;
};

PreferenceList make_preference_list(const std::string& x, std::vector<RewriteCandidate> candidates,
                                    const std::vector<double>& raw_rewards);

// Listwise ranking loss with reward-gap temperatures: for each rank j the
// positive term uses T_j^j = min_{i>j} T_j^i and the denominator runs over
// i = j..k with T_j^i = 1 / (r_j - r_i). Candidate log-probabilities are
// length-normalized by slot count (identity rewrites count as length 1).
// Rewards are constants; the gradient flows through the policy only.
LossResult pro_loss(const RewritePolicy& policy, const EvdKnowledgeBase& kb,
                    const PreferenceList& pref);

// Listwise loss plus beta-weighted SFT term; gradients sum.
LossResult align_loss(const RewritePolicy& policy, const EvdKnowledgeBase& kb,
                      const std::vector<PreferenceList>& pref_dataset,
                      const std::vector<RewriteExample>& sft_dataset, double beta);

struct RewriteDatasetRecord {
    std::string query;
    std::vector<RewriteCandidate> candidates;  // scores filled, sorted descending
};

enum class TrainPhase { warmup, align };
enum class RewardMode { scores, logprob };

struct RewriterTrainConfig {
    double lr = 0.5;
    std::size_t steps = 200;
    double beta = 0.2;
    std::uint64_t seed = 0;
    RewardMode reward_mode = RewardMode::scores;
};

// Full-batch gradient descent over the dataset. Warm-up minimizes the SFT
// loss on each record's highest-scoring candidate; align minimizes the
// combined listwise + beta * SFT objective on records whose preference list
// still has >= 2 candidates after tie collapsing (others are skipped; if all
// are skipped a warning is printed and the policy is returned unchanged).
RewritePolicy train_rewriter(RewritePolicy policy, const EvdKnowledgeBase& kb,
                             const std::vector<RewriteDatasetRecord>& dataset, TrainPhase phase,
                             const RewriterTrainConfig& config);

// Checkpoint: JSON header line {format, schema_version, feature_dim,
// feature_seed, h, templates}, then theta as little-endian doubles.
void save_policy(const RewritePolicy& policy, const std::string& path);
RewritePolicy load_policy(const std::string& path);

}  // namespace evdrank

#pragma once
// Builds the rewrite training dataset: candidate rewrites per query from the
// LLM gateway, scored against the ground-truth item by the retriever, with
// only strict improvers over the original query kept, in score order.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evdrank/encoder.hpp"
#include "evdrank/kb.hpp"
#include "evdrank/llm.hpp"
#include "evdrank/rewriter.hpp"

namespace evdrank {

struct DqrRecord {
    std::string query_id;
    std::string x;  // source query
    double original_score = 0.0;
    std::vector<RewriteCandidate> candidates;  // score > original, descending
    std::size_t k_effective = 0;

    friend bool operator==(const DqrRecord&, const DqrRecord&) = default;
};

struct DqrBuildReport {
    std::size_t attempted = 0;
    std::size_t kept = 0;
    std::size_t skipped_no_entity = 0;
    std::size_t skipped_no_improver = 0;
};

// Retriever similarity between a candidate text and the truth item.
double score_candidate(const EncoderParams& params, const std::string& candidate_text,
                       const CorpusItem& truth_item);

// Generates k candidates, deduplicates by rendered text (first occurrence
// wins), keeps strict improvers sorted by score descending. Returns nothing
// when no candidate beats the original query. With best_only only the single
// top improver is kept.
std::optional<DqrRecord> build_record(const EncoderParams& params, LlmGateway& gateway,
                                      const EvdKnowledgeBase& kb, const std::string& query_id,
                                      const std::string& x, const CorpusItem& truth_item,
                                      std::size_t k, std::uint64_t seed,
                                      const RewriteGrammar& grammar, bool best_only = false);

// One record attempt per (caption, item) pair, in corpus order.
std::pair<std::vector<DqrRecord>, DqrBuildReport> build_dataset(
    const EncoderParams& params, LlmGateway& gateway, const EvdKnowledgeBase& kb,
    const std::vector<CorpusItem>& corpus, std::size_t k, std::uint64_t seed,
    const RewriteGrammar& grammar, bool best_only = false);

// Line-delimited JSON records; build report serialized separately by the CLI.
void save_dqr(const std::vector<DqrRecord>& records, const std::string& path);
std::vector<DqrRecord> load_dqr(const std::string& path);

}  // namespace evdrank

#pragma once
// Pipeline orchestration behind the CLI: offline KB construction, rewrite
// dataset distillation, both rewriter training phases, retriever fine-tuning
// with probabilistic query rewriting, score-averaged inference, and the
// evaluation harness with parallel-query baselines.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evdrank/dqr.hpp"
#include "evdrank/encoder.hpp"
#include "evdrank/kb.hpp"
#include "evdrank/llm.hpp"
#include "evdrank/rewriter.hpp"

namespace evdrank {

struct PipelineConfig {
    // paths
    std::string kb_path = "kb.jsonl";
    std::string corpus_path = "corpus_train.jsonl";
    std::string test_corpus_path = "corpus_test.jsonl";
    std::string kb_corpus_path;  // defaults to corpus_path when empty
    std::string dqr_path = "dqr.jsonl";
    std::string encoder_checkpoint = "encoder.ckpt";
    std::string policy_checkpoint = "policy.ckpt";
    std::string report_path = "metrics.txt";
    std::optional<std::string> cache_dir;

    // hyperparameters
    double tau = 0.07;
    std::size_t d_feat = 4096;
    std::size_t d_emb = 64;
    std::size_t h_max = 5;   // descriptions per entity sense
    std::size_t k = 5;       // rewrite candidates per query
    double beta = 0.2;       // SFT weight inside the alignment objective
    double p = 0.6;          // rewrite probability during retriever fine-tuning
    double encoder_lr = 1e-2;
    double encoder_momentum = 0.0;
    std::size_t encoder_epochs = 200;
    double rewriter_lr = 0.5;
    std::size_t warmup_steps = 200;
    std::size_t align_steps = 100;
    std::size_t feature_dim = 16384;
    std::uint64_t seed = 42;
    std::uint64_t kb_seed = 1337;  // description-generation seed, kept run-independent
    std::size_t min_entity_freq = 2;
    bool best_only = false;
    RewardMode pro_reward = RewardMode::scores;
    std::string kb_created_at = "2000-01-01T00:00:00Z";

    // backend
    BackendKind backend = BackendKind::mock;
    std::string endpoint;
    std::string model_name = "remote-default";

    std::string strategy = "evd_rewriter";

    void validate() const;
    std::string resolved_kb_corpus() const {
        return kb_corpus_path.empty() ? corpus_path : kb_corpus_path;
    }
};

// Flat UTF-8 key=value file; '#' starts a comment line. Unknown keys fail.
PipelineConfig load_config(const std::string& path);

LlmGateway make_gateway(const PipelineConfig& config);
RewriteGrammar grammar_from(const PipelineConfig& config);

struct KbBuildStats {
    std::size_t captions = 0;
    std::size_t entities_extracted = 0;
    std::size_t entities_kept = 0;
    std::size_t senses = 0;
};

// Extract entities from every caption, frequency-filter, resolve ambiguity,
// generate descriptions per sense, write the KB file.
KbBuildStats cmd_build_kb(const PipelineConfig& config);

DqrBuildReport cmd_build_dqr(const PipelineConfig& config);

void cmd_train_rewriter(const PipelineConfig& config, TrainPhase phase);

// Fine-tunes the encoder on the training corpus; each caption is replaced by
// its greedy rewrite with probability p (fresh draw per epoch and example).
// The rewriter checkpoint must exist and is never updated.
void cmd_finetune_retriever(const PipelineConfig& config);

// Mean of the plain query similarity and the rewritten-query similarity; an
// ambiguous entity contributes one parallel rewrite per sense, averaged.
double final_score(const EncoderParams& params, const RewritePolicy& policy,
                   const EvdKnowledgeBase& kb, const std::string& query, const CorpusItem& item);

enum class Strategy { none, det_style, des_style, evd_rewriter };
Strategy strategy_from_string(const std::string& s);
const char* to_string(Strategy s);

// Query-side texts a strategy scores and averages: the raw caption for the
// plain strategy, the original plus four filler- or description-augmented
// variants for the parallel-query baselines, and the parallel-sense greedy
// rewrites for the trained rewriter. `policy` is only read by the rewriter
// strategy.
std::vector<std::string> strategy_query_variants(Strategy strategy, const CorpusItem& query_item,
                                                 const EvdKnowledgeBase& kb,
                                                 const RewritePolicy* policy,
                                                 const RewriteGrammar& grammar,
                                                 std::uint64_t seed);

struct MetricRow {
    std::string strategy;
    std::string direction;  // "t2i" or "i2t"
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
    std::size_t n_queries = 0;
};

struct MetricsReport {
    std::vector<MetricRow> rows;    // evaluated strategy, then the none baseline
    std::vector<MetricRow> deltas;  // strategy minus none, per direction
    std::string to_text() const;
};

// Scores the test corpus under the chosen augmentation strategy and under the
// plain baseline, both retrieval directions, R@1/5/10.
MetricsReport cmd_evaluate(const PipelineConfig& config, Strategy strategy);

struct KbEditRequest {
    std::string op;  // "inject" or "add-sense"
    std::string entity;
    std::optional<std::string> sense_tag;
    std::vector<std::string> descriptions;
    std::string retag_existing_as = "default";
};

void cmd_kb_edit(const PipelineConfig& config, const KbEditRequest& request);

}  // namespace evdrank

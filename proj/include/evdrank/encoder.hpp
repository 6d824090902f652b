#pragma once
// Trainable dual-encoder retriever at desk scale. Both modalities share a
// signed feature-hashing featurizer (word unigrams + bigrams for text,
// attribute tokens for items) and project through separate matrices into a
// common embedding space. The symmetric temperature-scaled contrastive loss
// comes with analytic gradients; retrieval is exact top-k over a prebuilt
// index, evaluated with recall at h.

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evdrank/errors.hpp"

namespace evdrank {

// Symbolic stand-in for one image: an id, the paired caption, and the bag of
// attribute tokens playing the role of visual content.
struct CorpusItem {
    std::string id;
    std::string caption;
    std::vector<std::string> attributes;

    friend bool operator==(const CorpusItem&, const CorpusItem&) = default;
};

std::vector<CorpusItem> load_corpus(const std::string& path);
void save_corpus(const std::vector<CorpusItem>& corpus, const std::string& path);

// Sparse count vector, entries sorted by index, indices unique.
struct SparseVec {
    std::vector<std::pair<std::uint32_t, double>> entries;
};

// Signed feature hashing: bucket from one hash, +/-1 sign from a second.
SparseVec featurize(std::string_view text, std::size_t d_feat, std::uint64_t hash_seed);
SparseVec featurize(const std::vector<std::string>& attributes, std::size_t d_feat,
                    std::uint64_t hash_seed);

struct EncoderParams {
    std::size_t d_feat = 4096;
    std::size_t d_emb = 64;
    double tau = 0.07;  // fixed softmax temperature
    std::uint64_t hash_seed = 0;
    std::vector<double> w_text;  // row-major d_feat x d_emb
    std::vector<double> w_item;

    friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

EncoderParams init_encoder_params(std::size_t d_feat, std::size_t d_emb, double tau,
                                  std::uint64_t hash_seed, std::uint64_t init_seed);

// Content hash over dimensions, tau, hash seed, and both matrices; used to
// detect stale retrieval indexes.
std::uint64_t params_version(const EncoderParams& params);

// Checkpoint: JSON header line, then both matrices as little-endian doubles.
void save_encoder(const EncoderParams& params, const std::string& path);
EncoderParams load_encoder(const std::string& path);

struct Embedding {
    std::vector<double> values;  // unit L2 norm
};

// L2-normalized projection of the hashed features; an all-zero projection
// maps to the first basis vector so downstream math never sees a zero norm.
Embedding encode_text(const EncoderParams& params, std::string_view text);
Embedding encode_item(const EncoderParams& params, const CorpusItem& item);

double similarity(const Embedding& a, const Embedding& b);

// Batch with the implicit identity pairing: text i matches item i.
struct ContrastiveBatch {
    std::vector<CorpusItem> items;
    std::vector<std::string> texts;
};

struct ContrastiveResult {
    double loss_i2t = 0.0;
    double loss_t2i = 0.0;
    double loss_total = 0.0;
    std::vector<double> grad_w_text;  // same layout as the matrices
    std::vector<double> grad_w_item;
};

// Both contrastive directions with log-sum-exp stabilization and analytic
// gradients through projection + normalization. Denominators run over the N
// batch texts/items. Throws NonFiniteLoss when the result overflows.
ContrastiveResult contrastive_loss(const EncoderParams& params, const ContrastiveBatch& batch);

// Same computation restricted to one direction; gradients and loss_total
// cover only that part. Used to verify each direction's gradient on its own.
enum class ContrastiveDirection { item_to_text, text_to_item, both };
ContrastiveResult contrastive_loss_direction(const EncoderParams& params,
                                             const ContrastiveBatch& batch,
                                             ContrastiveDirection direction);

// One gradient-descent update on the total loss; tau stays fixed.
EncoderParams train_step(const EncoderParams& params, const ContrastiveBatch& batch,
                         double learning_rate);

struct RetrievalIndex {
    std::vector<std::string> item_ids;
    std::vector<double> embeddings;  // row-major n x d_emb, rows unit norm
    std::size_t d_emb = 0;
    std::uint64_t params_version = 0;
};

RetrievalIndex build_index(const EncoderParams& params, const std::vector<CorpusItem>& corpus);

// Exact top-k by dot product, descending, ties broken by ascending id.
// Throws StaleIndex when the index was built under different parameters.
std::vector<std::pair<std::string, double>> top_k(const RetrievalIndex& index,
                                                  const EncoderParams& params,
                                                  const Embedding& query, std::size_t k);

// Fraction of queries whose top-h ranking contains any ground-truth id.
double recall_at_h(const std::vector<std::vector<std::string>>& rankings,
                   const std::vector<std::set<std::string>>& truths, std::size_t h);

}  // namespace evdrank

#include "evdrank/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "evdrank/util.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace evdrank {

using nlohmann::json;

std::vector<CorpusItem> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open corpus file: " + path);
    std::vector<CorpusItem> corpus;
    std::string line;
    std::size_t line_no = 0;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object())
            throw MalformedRecord(line_no, "not a JSON object");
        CorpusItem item;
        if (!rec.contains("id") || !rec["id"].is_string())
            throw MalformedRecord(line_no, "missing id");
        item.id = rec["id"].get<std::string>();
        if (!ids.insert(item.id).second) throw MalformedRecord(line_no, "duplicate id " + item.id);
        if (!rec.contains("caption") || !rec["caption"].is_string())
            throw MalformedRecord(line_no, "missing caption");
        item.caption = rec["caption"].get<std::string>();
        if (!rec.contains("attributes") || !rec["attributes"].is_array() ||
            rec["attributes"].empty())
            throw MalformedRecord(line_no, "attributes must be a non-empty array");
        for (const auto& a : rec["attributes"]) {
            if (!a.is_string()) throw MalformedRecord(line_no, "attribute is not a string");
            item.attributes.push_back(a.get<std::string>());
        }
        corpus.push_back(std::move(item));
    }
    return corpus;
}

void save_corpus(const std::vector<CorpusItem>& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open corpus file for writing: " + path);
    for (const auto& item : corpus) {
        json rec;
        rec["id"] = item.id;
        rec["caption"] = item.caption;
        rec["attributes"] = item.attributes;
        out << rec.dump() << '\n';
    }
    if (!out) throw IoFailure("write failed: " + path);
}

namespace {

void add_token(std::map<std::uint32_t, double>& acc, std::string_view token, std::size_t d_feat,
               std::uint64_t hash_seed) {
    const std::uint64_t bucket_h = fnv1a64(token, hash_mix(kFnvOffset, hash_seed));
    const std::uint64_t sign_h = fnv1a64(token, hash_mix(0x517cc1b727220a95ULL, hash_seed));
    const auto bucket = static_cast<std::uint32_t>(bucket_h % d_feat);
    acc[bucket] += (sign_h & 1) ? 1.0 : -1.0;
}

SparseVec finish(std::map<std::uint32_t, double>& acc) {
    SparseVec v;
    v.entries.reserve(acc.size());
    for (const auto& [idx, val] : acc)
        if (val != 0.0) v.entries.emplace_back(idx, val);
    return v;
}

}  // namespace

SparseVec featurize(std::string_view text, std::size_t d_feat, std::uint64_t hash_seed) {
    if (d_feat < 16) throw Error("d_feat must be >= 16");
    std::map<std::uint32_t, double> acc;
    const auto tokens = tokenize(text);
    for (const auto& t : tokens) add_token(acc, t, d_feat, hash_seed);
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
        add_token(acc, tokens[i] + " " + tokens[i + 1], d_feat, hash_seed);
    return finish(acc);
}

SparseVec featurize(const std::vector<std::string>& attributes, std::size_t d_feat,
                    std::uint64_t hash_seed) {
    if (d_feat < 16) throw Error("d_feat must be >= 16");
    std::map<std::uint32_t, double> acc;
    for (const auto& attr : attributes) {
        // normalize so a two-word attribute hashes like the matching bigram
        const std::string token = join(tokenize(attr), " ");
        if (!token.empty()) add_token(acc, token, d_feat, hash_seed);
    }
    return finish(acc);
}

EncoderParams init_encoder_params(std::size_t d_feat, std::size_t d_emb, double tau,
                                  std::uint64_t hash_seed, std::uint64_t init_seed) {
    if (d_feat < 16) throw Error("d_feat must be >= 16");
    if (d_emb < 1) throw Error("d_emb must be >= 1");
    if (!(tau > 0.0)) throw Error("tau must be positive");
    EncoderParams p;
    p.d_feat = d_feat;
    p.d_emb = d_emb;
    p.tau = tau;
    p.hash_seed = hash_seed;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_feat));
    Rng rng(hash_mix(init_seed, 0x7e11));
    p.w_text.resize(d_feat * d_emb);
    for (auto& w : p.w_text) w = scale * rng.next_normal();
    // Both towers start from the same projection so shared tokens between a
    // text and an item's attributes align from step zero, standing in for a
    // pretrained aligned encoder pair; training updates them separately.
    p.w_item = p.w_text;
    return p;
}

std::uint64_t params_version(const EncoderParams& params) {
    std::uint64_t h = kFnvOffset;
    auto mix_u64 = [&h](std::uint64_t v) { h = hash_mix(h, v); };
    mix_u64(params.d_feat);
    mix_u64(params.d_emb);
    std::uint64_t tau_bits;
    std::memcpy(&tau_bits, &params.tau, sizeof(tau_bits));
    mix_u64(tau_bits);
    mix_u64(params.hash_seed);
    auto mix_matrix = [&](const std::vector<double>& m) {
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()),
                                     m.size() * sizeof(double)),
                    h);
    };
    mix_matrix(params.w_text);
    mix_matrix(params.w_item);
    return h;
}

void save_encoder(const EncoderParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open checkpoint for writing: " + path);
    json header;
    header["format"] = "evdrank-encoder";
    header["schema_version"] = 1;
    header["d_feat"] = params.d_feat;
    header["d_emb"] = params.d_emb;
    header["tau"] = params.tau;
    header["hash_seed"] = params.hash_seed;
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(params.w_text.data()),
              static_cast<std::streamsize>(params.w_text.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(params.w_item.data()),
              static_cast<std::streamsize>(params.w_item.size() * sizeof(double)));
    if (!out) throw IoFailure("write failed: " + path);
}

EncoderParams load_encoder(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line)) throw MalformedRecord(1, "missing checkpoint header");
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "evdrank-encoder" ||
        header.value("schema_version", -1) != 1)
        throw MalformedRecord(1, "bad checkpoint header");
    EncoderParams p;
    p.d_feat = header.value("d_feat", std::size_t{0});
    p.d_emb = header.value("d_emb", std::size_t{0});
    p.tau = header.value("tau", 0.0);
    p.hash_seed = header.value("hash_seed", std::uint64_t{0});
    if (p.d_feat < 16 || p.d_emb < 1 || !(p.tau > 0.0))
        throw MalformedRecord(1, "bad checkpoint dimensions");
    const std::size_t n = p.d_feat * p.d_emb;
    p.w_text.resize(n);
    p.w_item.resize(n);
    in.read(reinterpret_cast<char*>(p.w_text.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    in.read(reinterpret_cast<char*>(p.w_item.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw MalformedRecord(2, "checkpoint truncated");
    return p;
}

namespace {

// u = W^T f over the sparse features
std::vector<double> project(const std::vector<double>& w, std::size_t d_emb, const SparseVec& f) {
    std::vector<double> u(d_emb, 0.0);
    for (const auto& [idx, val] : f.entries) {
        const double* row = w.data() + static_cast<std::size_t>(idx) * d_emb;
        for (std::size_t e = 0; e < d_emb; ++e) u[e] += val * row[e];
    }
    return u;
}

Embedding normalize_or_basis(std::vector<double> u) {
    double sq = 0.0;
    for (double v : u) sq += v * v;
    if (sq == 0.0) {
        u.assign(u.size(), 0.0);
        u[0] = 1.0;
        return Embedding{std::move(u)};
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (double& v : u) v *= inv;
    return Embedding{std::move(u)};
}

struct EncodeTrace {
    SparseVec features;
    std::vector<double> u;  // pre-normalization projection
    double norm = 0.0;      // 0 marks the degenerate basis-vector case
    Embedding emb;
};

EncodeTrace encode_trace(const std::vector<double>& w, std::size_t d_emb, SparseVec f) {
    EncodeTrace tr;
    tr.u = project(w, d_emb, f);
    tr.features = std::move(f);
    double sq = 0.0;
    for (double v : tr.u) sq += v * v;
    tr.norm = std::sqrt(sq);
    tr.emb = normalize_or_basis(tr.u);
    return tr;
}

// dL/du from dL/dF through F = u / |u|; degenerate inputs contribute nothing.
std::vector<double> backprop_normalize(const EncodeTrace& tr, const std::vector<double>& g) {
    std::vector<double> du(tr.u.size(), 0.0);
    if (tr.norm == 0.0) return du;
    double fg = 0.0;
    for (std::size_t e = 0; e < g.size(); ++e) fg += tr.emb.values[e] * g[e];
    for (std::size_t e = 0; e < g.size(); ++e)
        du[e] = (g[e] - tr.emb.values[e] * fg) / tr.norm;
    return du;
}

void accumulate_w_grad(std::vector<double>& gw, std::size_t d_emb, const SparseVec& f,
                       const std::vector<double>& du) {
    for (const auto& [idx, val] : f.entries) {
        double* row = gw.data() + static_cast<std::size_t>(idx) * d_emb;
        for (std::size_t e = 0; e < d_emb; ++e) row[e] += val * du[e];
    }
}

}  // namespace

Embedding encode_text(const EncoderParams& params, std::string_view text) {
    return normalize_or_basis(
        project(params.w_text, params.d_emb, featurize(text, params.d_feat, params.hash_seed)));
}

Embedding encode_item(const EncoderParams& params, const CorpusItem& item) {
    return normalize_or_basis(project(
        params.w_item, params.d_emb, featurize(item.attributes, params.d_feat, params.hash_seed)));
}

double similarity(const Embedding& a, const Embedding& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
    return s;
}

ContrastiveResult contrastive_loss_direction(const EncoderParams& params,
                                             const ContrastiveBatch& batch,
                                             ContrastiveDirection direction) {
    const std::size_t n = batch.items.size();
    if (n == 0 || batch.texts.size() != n)
        throw Error("batch needs equal, non-zero item and text counts");
    const std::size_t d_emb = params.d_emb;
    const bool use_i2t = direction != ContrastiveDirection::text_to_item;
    const bool use_t2i = direction != ContrastiveDirection::item_to_text;

    std::vector<EncodeTrace> items, texts;
    items.reserve(n);
    texts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        items.push_back(encode_trace(
            params.w_item, d_emb,
            featurize(batch.items[i].attributes, params.d_feat, params.hash_seed)));
        texts.push_back(encode_trace(params.w_text, d_emb,
                                     featurize(batch.texts[i], params.d_feat, params.hash_seed)));
    }

    // s[i][j] = item_i . text_j / tau
    std::vector<double> s(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            s[i * n + j] = similarity(items[i].emb, texts[j].emb) / params.tau;

    ContrastiveResult res;
    std::vector<double> g(n * n, 0.0);  // dL_total / ds
    const double inv_n = 1.0 / static_cast<double>(n);

    // item -> text: softmax across row i
    if (use_i2t) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = s.data() + i * n;
            const double m = *std::max_element(row, row + n);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - m);
            const double lse = m + std::log(z);
            res.loss_i2t -= inv_n * (row[i] - lse);
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += inv_n * (std::exp(row[j] - lse) - (i == j ? 1.0 : 0.0));
        }
    }

    // text -> item: softmax down column j
    if (use_t2i) {
        for (std::size_t j = 0; j < n; ++j) {
            double m = s[j];
            for (std::size_t i = 0; i < n; ++i) m = std::max(m, s[i * n + j]);
            double z = 0.0;
            for (std::size_t i = 0; i < n; ++i) z += std::exp(s[i * n + j] - m);
            const double lse = m + std::log(z);
            res.loss_t2i -= inv_n * (s[j * n + j] - lse);
            for (std::size_t i = 0; i < n; ++i)
                g[i * n + j] += inv_n * (std::exp(s[i * n + j] - lse) - (i == j ? 1.0 : 0.0));
        }
    }

    res.loss_total = res.loss_i2t + res.loss_t2i;
    if (!std::isfinite(res.loss_total)) throw NonFiniteLoss("contrastive loss is not finite");

    res.grad_w_text.assign(params.w_text.size(), 0.0);
    res.grad_w_item.assign(params.w_item.size(), 0.0);
    const double inv_tau = 1.0 / params.tau;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> d_item(d_emb, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double w = g[i * n + j] * inv_tau;
            if (w == 0.0) continue;
            for (std::size_t e = 0; e < d_emb; ++e)
                d_item[e] += w * texts[j].emb.values[e];
        }
        accumulate_w_grad(res.grad_w_item, d_emb, items[i].features,
                          backprop_normalize(items[i], d_item));
    }
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> d_text(d_emb, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double w = g[i * n + j] * inv_tau;
            if (w == 0.0) continue;
            for (std::size_t e = 0; e < d_emb; ++e)
                d_text[e] += w * items[i].emb.values[e];
        }
        accumulate_w_grad(res.grad_w_text, d_emb, texts[j].features,
                          backprop_normalize(texts[j], d_text));
    }
    return res;
}

ContrastiveResult contrastive_loss(const EncoderParams& params, const ContrastiveBatch& batch) {
    return contrastive_loss_direction(params, batch, ContrastiveDirection::both);
}

EncoderParams train_step(const EncoderParams& params, const ContrastiveBatch& batch,
                         double learning_rate) {
    if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
    const auto res = contrastive_loss(params, batch);
    EncoderParams next = params;
    for (std::size_t i = 0; i < next.w_text.size(); ++i)
        next.w_text[i] -= learning_rate * res.grad_w_text[i];
    for (std::size_t i = 0; i < next.w_item.size(); ++i)
        next.w_item[i] -= learning_rate * res.grad_w_item[i];
    return next;
}

RetrievalIndex build_index(const EncoderParams& params, const std::vector<CorpusItem>& corpus) {
    if (corpus.empty()) throw Error("corpus must be non-empty");
    RetrievalIndex index;
    index.d_emb = params.d_emb;
    index.params_version = params_version(params);
    index.item_ids.reserve(corpus.size());
    index.embeddings.reserve(corpus.size() * params.d_emb);
    for (const auto& item : corpus) {
        index.item_ids.push_back(item.id);
        const Embedding emb = encode_item(params, item);
        index.embeddings.insert(index.embeddings.end(), emb.values.begin(), emb.values.end());
    }
    return index;
}

std::vector<std::pair<std::string, double>> top_k(const RetrievalIndex& index,
                                                  const EncoderParams& params,
                                                  const Embedding& query, std::size_t k) {
    if (k < 1) throw Error("k must be >= 1");
    if (index.params_version != params_version(params))
        throw StaleIndex("index was built under different encoder parameters");

    const std::size_t n = index.item_ids.size();
    std::vector<std::pair<double, std::size_t>> scored(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = index.embeddings.data() + i * index.d_emb;
        double s = 0.0;
        for (std::size_t e = 0; e < index.d_emb; ++e) s += row[e] * query.values[e];
        scored[i] = {s, i};
    }
    auto cmp = [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return index.item_ids[a.second] < index.item_ids[b.second];
    };
    const std::size_t take = std::min(k, n);
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                      scored.end(), cmp);

    std::vector<std::pair<std::string, double>> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        out.emplace_back(index.item_ids[scored[i].second], scored[i].first);
    return out;
}

double recall_at_h(const std::vector<std::vector<std::string>>& rankings,
                   const std::vector<std::set<std::string>>& truths, std::size_t h) {
    if (h < 1) throw Error("h must be >= 1");
    if (rankings.size() != truths.size())
        throw Error("rankings and truths must have equal lengths");
    if (rankings.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const std::size_t upto = std::min(h, rankings[q].size());
        for (std::size_t r = 0; r < upto; ++r) {
            if (truths[q].count(rankings[q][r])) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

}  // namespace evdrank

#include "evdrank/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "evdrank/synth.hpp"
#include "evdrank/util.hpp"

namespace evdrank {

void PipelineConfig::validate() const {
    if (p < 0.0 || p > 1.0) throw ConfigError("p must be in [0, 1]");
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (h_max < 1) throw ConfigError("h_max must be >= 1");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (backend == BackendKind::remote && endpoint.empty())
        throw ConfigError("remote backend requires endpoint=");
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open config file: " + path);
    PipelineConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + " is not key=value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        try {
            if (key == "kb_path") cfg.kb_path = val;
            else if (key == "corpus_path") cfg.corpus_path = val;
            else if (key == "test_corpus_path") cfg.test_corpus_path = val;
            else if (key == "kb_corpus_path") cfg.kb_corpus_path = val;
            else if (key == "dqr_path") cfg.dqr_path = val;
            else if (key == "encoder_checkpoint") cfg.encoder_checkpoint = val;
            else if (key == "policy_checkpoint") cfg.policy_checkpoint = val;
            else if (key == "report_path") cfg.report_path = val;
            else if (key == "cache_dir") cfg.cache_dir = val;
            else if (key == "tau") cfg.tau = std::stod(val);
            else if (key == "d_feat") cfg.d_feat = std::stoul(val);
            else if (key == "d_emb") cfg.d_emb = std::stoul(val);
            else if (key == "h_max") cfg.h_max = std::stoul(val);
            else if (key == "k") cfg.k = std::stoul(val);
            else if (key == "beta") cfg.beta = std::stod(val);
            else if (key == "p") cfg.p = std::stod(val);
            else if (key == "encoder_lr") cfg.encoder_lr = std::stod(val);
            else if (key == "encoder_momentum") cfg.encoder_momentum = std::stod(val);
            else if (key == "encoder_epochs") cfg.encoder_epochs = std::stoul(val);
            else if (key == "rewriter_lr") cfg.rewriter_lr = std::stod(val);
            else if (key == "warmup_steps") cfg.warmup_steps = std::stoul(val);
            else if (key == "align_steps") cfg.align_steps = std::stoul(val);
            else if (key == "feature_dim") cfg.feature_dim = std::stoul(val);
            else if (key == "seed") cfg.seed = std::stoull(val);
            else if (key == "kb_seed") cfg.kb_seed = std::stoull(val);
            else if (key == "min_entity_freq") cfg.min_entity_freq = std::stoul(val);
            else if (key == "best_only") cfg.best_only = (val == "true" || val == "1");
            else if (key == "pro_reward")
                cfg.pro_reward = (val == "logprob") ? RewardMode::logprob : RewardMode::scores;
            else if (key == "kb_created_at") cfg.kb_created_at = val;
            else if (key == "backend")
                cfg.backend = (val == "remote") ? BackendKind::remote : BackendKind::mock;
            else if (key == "endpoint") cfg.endpoint = val;
            else if (key == "model_name") cfg.model_name = val;
            else if (key == "strategy") cfg.strategy = val;
            else throw ConfigError("unknown config key: " + key);
        } catch (const ConfigError&) {
            throw;
        } catch (...) {
            throw ConfigError("bad value for config key " + key + ": " + val);
        }
    }
    cfg.validate();
    return cfg;
}

LlmGateway make_gateway(const PipelineConfig& config) {
    std::shared_ptr<LlmBackend> backend;
    if (config.backend == BackendKind::mock) {
        backend = std::make_shared<MockLlmBackend>();
    } else {
        RemoteOptions opt;
        opt.endpoint = config.endpoint;
        opt.model = config.model_name;
        backend = std::make_shared<RemoteLlmBackend>(opt);
    }
    return LlmGateway(std::move(backend), config.cache_dir);
}

RewriteGrammar grammar_from(const PipelineConfig& config) {
    RewriteGrammar g;
    g.h = config.h_max;
    return g;
}

KbBuildStats cmd_build_kb(const PipelineConfig& config) {
    config.validate();
    auto gateway = make_gateway(config);
    const auto corpus = load_corpus(config.resolved_kb_corpus());

    KbBuildStats stats;
    stats.captions = corpus.size();

    // entity -> number of captions mentioning it
    std::map<std::string, std::size_t> freq;
    for (const auto& item : corpus) {
        for (const auto& ent : gateway.extract_visual_entities(item.caption, config.kb_seed))
            ++freq[ent];
    }
    stats.entities_extracted = freq.size();

    EvdKnowledgeBase kb;
    for (const auto& [entity, count] : freq) {
        if (count < config.min_entity_freq) continue;
        ++stats.entities_kept;

        std::vector<std::optional<std::string>> tags;
        const auto senses = gateway.resolve_ambiguity(entity, config.kb_seed);
        if (senses.empty()) {
            tags.push_back(std::nullopt);
        } else {
            for (const auto& [tag, gloss] : senses) tags.emplace_back(tag);
        }
        for (const auto& tag : tags) {
            EntitySense sense{entity, tag, DescriptionSource::llm};
            auto descriptions = gateway.generate_descriptions(sense, config.h_max, config.kb_seed);
            kb.insert_entry(EvdEntry{sense, std::move(descriptions), config.kb_created_at});
            ++stats.senses;
        }
    }
    save_kb(kb, config.kb_path);
    return stats;
}

namespace {

EncoderParams initial_encoder(const PipelineConfig& config) {
    return init_encoder_params(config.d_feat, config.d_emb, config.tau, config.seed, config.seed);
}

}  // namespace

DqrBuildReport cmd_build_dqr(const PipelineConfig& config) {
    config.validate();
    auto gateway = make_gateway(config);
    const auto kb = load_kb(config.kb_path);
    const auto corpus = load_corpus(config.corpus_path);
    const EncoderParams params = initial_encoder(config);

    auto [records, report] = build_dataset(params, gateway, kb, corpus, config.k, config.seed,
                                           grammar_from(config), config.best_only);
    save_dqr(records, config.dqr_path);
    return report;
}

void cmd_train_rewriter(const PipelineConfig& config, TrainPhase phase) {
    config.validate();
    const auto kb = load_kb(config.kb_path);
    const auto dqr = load_dqr(config.dqr_path);

    std::vector<RewriteDatasetRecord> dataset;
    dataset.reserve(dqr.size());
    for (const auto& rec : dqr) dataset.push_back(RewriteDatasetRecord{rec.x, rec.candidates});

    RewritePolicy policy;
    if (phase == TrainPhase::warmup) {
        policy = make_policy(config.feature_dim, config.seed, grammar_from(config));
    } else {
        policy = load_policy(config.policy_checkpoint);
    }

    RewriterTrainConfig train_cfg;
    train_cfg.lr = config.rewriter_lr;
    train_cfg.steps = phase == TrainPhase::warmup ? config.warmup_steps : config.align_steps;
    train_cfg.beta = config.beta;
    train_cfg.seed = config.seed;
    train_cfg.reward_mode = config.pro_reward;

    policy = train_rewriter(std::move(policy), kb, dataset, phase, train_cfg);
    save_policy(policy, config.policy_checkpoint);
}

void cmd_finetune_retriever(const PipelineConfig& config) {
    config.validate();
    const auto kb = load_kb(config.kb_path);
    const auto policy = load_policy(config.policy_checkpoint);
    const auto corpus = load_corpus(config.corpus_path);
    if (corpus.empty()) throw Error("training corpus is empty");

    EncoderParams params = initial_encoder(config);
    std::vector<double> vel_text(params.w_text.size(), 0.0);
    std::vector<double> vel_item(params.w_item.size(), 0.0);

    // Greedy rewrites are deterministic per caption; compute them once.
    std::vector<std::string> rewritten(corpus.size());
    if (config.p > 0.0) {
        for (std::size_t i = 0; i < corpus.size(); ++i)
            rewritten[i] = decode_greedy(policy, corpus[i].caption, kb).text;
    }

    ContrastiveBatch batch;
    batch.items = corpus;
    batch.texts.resize(corpus.size());
    for (std::size_t epoch = 0; epoch < config.encoder_epochs; ++epoch) {
        Rng rng(hash_mix(config.seed, 0xf17e + epoch));
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const bool rewrite = config.p > 0.0 && rng.next_unit() < config.p;
            batch.texts[i] = rewrite ? rewritten[i] : corpus[i].caption;
        }
        const auto res = contrastive_loss(params, batch);
        for (std::size_t i = 0; i < params.w_text.size(); ++i) {
            vel_text[i] = config.encoder_momentum * vel_text[i] - config.encoder_lr * res.grad_w_text[i];
            params.w_text[i] += vel_text[i];
        }
        for (std::size_t i = 0; i < params.w_item.size(); ++i) {
            vel_item[i] = config.encoder_momentum * vel_item[i] - config.encoder_lr * res.grad_w_item[i];
            params.w_item[i] += vel_item[i];
        }
    }
    save_encoder(params, config.encoder_checkpoint);
}

double final_score(const EncoderParams& params, const RewritePolicy& policy,
                   const EvdKnowledgeBase& kb, const std::string& query, const CorpusItem& item) {
    const Embedding item_emb = encode_item(params, item);
    const double plain = similarity(encode_text(params, query), item_emb);

    const auto variants = decode_parallel_senses(policy, query, kb);
    double rewritten = 0.0;
    for (const auto& v : variants)
        rewritten += similarity(encode_text(params, v.text), item_emb);
    rewritten /= static_cast<double>(variants.size());

    return 0.5 * plain + 0.5 * rewritten;
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "none") return Strategy::none;
    if (s == "det_style") return Strategy::det_style;
    if (s == "des_style") return Strategy::des_style;
    if (s == "evd_rewriter") return Strategy::evd_rewriter;
    throw ConfigError("unknown strategy: " + s);
}

const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::none: return "none";
        case Strategy::det_style: return "det_style";
        case Strategy::des_style: return "des_style";
        case Strategy::evd_rewriter: return "evd_rewriter";
    }
    return "unknown";
}

std::vector<std::string> strategy_query_variants(Strategy strategy, const CorpusItem& query_item,
                                                 const EvdKnowledgeBase& kb,
                                                 const RewritePolicy* policy,
                                                 const RewriteGrammar& grammar,
                                                 std::uint64_t seed) {
    const std::string& caption = query_item.caption;
    switch (strategy) {
        case Strategy::none:
            return {caption};
        case Strategy::det_style: {
            // original plus four copies extended with non-visual filler
            std::vector<std::string> out = {caption};
            Rng rng(hash_mix(seed, fnv1a64("det|" + query_item.id)));
            const auto& fillers = nonvisual_fillers();
            for (int v = 0; v < 4; ++v)
                out.push_back(caption + " (" + fillers[rng.next_index(fillers.size())] + ")");
            return out;
        }
        case Strategy::des_style: {
            // original plus four rewrites with uniformly chosen descriptions
            std::vector<std::string> out = {caption};
            const ActionSpace space = action_space(caption, kb, grammar);
            Rng rng(hash_mix(seed, fnv1a64("des|" + query_item.id)));
            for (int v = 0; v < 4; ++v) {
                if (space.slots.empty()) {
                    out.push_back(caption);
                    continue;
                }
                std::vector<RewriteAction> actions;
                for (std::size_t t = 0; t < space.choices.size(); ++t) {
                    // skip is id 0; concrete choices start at 1
                    const std::size_t n_concrete = space.choices[t].size() - 1;
                    const std::size_t id = n_concrete == 0 ? 0 : 1 + rng.next_index(n_concrete);
                    actions.push_back(RewriteAction{t, space.choices[t][id]});
                }
                out.push_back(render_rewrite(caption, space, actions));
            }
            return out;
        }
        case Strategy::evd_rewriter: {
            std::vector<std::string> out;
            for (const auto& v : decode_parallel_senses(*policy, caption, kb))
                out.push_back(v.text);
            return out;
        }
    }
    return {caption};
}

namespace {

std::vector<std::vector<std::string>> rank_rows(const std::vector<std::vector<double>>& scores,
                                                const std::vector<std::string>& ids) {
    std::vector<std::vector<std::string>> rankings;
    rankings.reserve(scores.size());
    for (const auto& row : scores) {
        std::vector<std::size_t> order(row.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return ids[a] < ids[b];
        });
        std::vector<std::string> ranked;
        ranked.reserve(order.size());
        for (std::size_t i : order) ranked.push_back(ids[i]);
        rankings.push_back(std::move(ranked));
    }
    return rankings;
}

MetricRow metrics_for(const std::string& strategy, const std::string& direction,
                      const std::vector<std::vector<std::string>>& rankings,
                      const std::vector<std::set<std::string>>& truths) {
    MetricRow row;
    row.strategy = strategy;
    row.direction = direction;
    row.r1 = recall_at_h(rankings, truths, 1);
    row.r5 = recall_at_h(rankings, truths, 5);
    row.r10 = recall_at_h(rankings, truths, 10);
    row.n_queries = rankings.size();
    return row;
}

std::string format_metric(double v, bool signed_value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), signed_value ? "%+.4f" : "%.4f", v);
    return buf;
}

// Scores every (query, item) cell: mean variant similarity, averaged with the
// plain similarity for the rewriter strategy.
std::vector<std::vector<double>> score_matrix(Strategy strategy,
                                              const std::vector<CorpusItem>& corpus,
                                              const EncoderParams& params,
                                              const EvdKnowledgeBase& kb,
                                              const RewritePolicy* policy,
                                              const RewriteGrammar& grammar, std::uint64_t seed) {
    const std::size_t n = corpus.size();
    std::vector<Embedding> item_embs;
    item_embs.reserve(n);
    for (const auto& item : corpus) item_embs.push_back(encode_item(params, item));

    std::vector<std::vector<double>> scores(n, std::vector<double>(n, 0.0));
    for (std::size_t q = 0; q < n; ++q) {
        const auto variants =
            strategy_query_variants(strategy, corpus[q], kb, policy, grammar, seed);
        std::vector<Embedding> variant_embs;
        variant_embs.reserve(variants.size());
        for (const auto& text : variants) variant_embs.push_back(encode_text(params, text));

        const Embedding plain = encode_text(params, corpus[q].caption);
        for (std::size_t i = 0; i < n; ++i) {
            double mean = 0.0;
            for (const auto& emb : variant_embs) mean += similarity(emb, item_embs[i]);
            mean /= static_cast<double>(variant_embs.size());
            if (strategy == Strategy::evd_rewriter) {
                scores[q][i] = 0.5 * similarity(plain, item_embs[i]) + 0.5 * mean;
            } else {
                scores[q][i] = mean;
            }
        }
    }
    return scores;
}

void metrics_both_directions(const std::string& name,
                             const std::vector<std::vector<double>>& scores,
                             const std::vector<std::string>& ids, std::vector<MetricRow>& out) {
    const std::size_t n = ids.size();
    std::vector<std::set<std::string>> truths;
    truths.reserve(n);
    for (const auto& id : ids) truths.push_back({id});

    out.push_back(metrics_for(name, "t2i", rank_rows(scores, ids), truths));

    std::vector<std::vector<double>> transposed(n, std::vector<double>(n));
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t i = 0; i < n; ++i) transposed[i][q] = scores[q][i];
    out.push_back(metrics_for(name, "i2t", rank_rows(transposed, ids), truths));
}

}  // namespace

std::string MetricsReport::to_text() const {
    std::string out;
    for (const auto& row : rows) {
        out += "strategy=" + row.strategy + " direction=" + row.direction +
               " R@1=" + format_metric(row.r1, false) + " R@5=" + format_metric(row.r5, false) +
               " R@10=" + format_metric(row.r10, false) +
               " n_queries=" + std::to_string(row.n_queries) + "\n";
    }
    for (const auto& row : deltas) {
        out += "delta_vs_none strategy=" + row.strategy + " direction=" + row.direction +
               " R@1=" + format_metric(row.r1, true) + " R@5=" + format_metric(row.r5, true) +
               " R@10=" + format_metric(row.r10, true) + "\n";
    }
    return out;
}

MetricsReport cmd_evaluate(const PipelineConfig& config, Strategy strategy) {
    config.validate();
    const auto corpus = load_corpus(config.test_corpus_path);
    if (corpus.empty()) throw Error("test corpus is empty");
    const auto kb = load_kb(config.kb_path);
    const EncoderParams params = load_encoder(config.encoder_checkpoint);
    const RewriteGrammar grammar = grammar_from(config);

    RewritePolicy policy;
    if (strategy == Strategy::evd_rewriter) policy = load_policy(config.policy_checkpoint);

    std::vector<std::string> ids;
    ids.reserve(corpus.size());
    for (const auto& item : corpus) ids.push_back(item.id);

    MetricsReport report;
    const auto scores =
        score_matrix(strategy, corpus, params, kb, &policy, grammar, config.seed);
    metrics_both_directions(to_string(strategy), scores, ids, report.rows);

    std::vector<MetricRow> baseline_rows;
    if (strategy == Strategy::none) {
        baseline_rows = report.rows;
    } else {
        const auto base_scores =
            score_matrix(Strategy::none, corpus, params, kb, nullptr, grammar, config.seed);
        metrics_both_directions("none", base_scores, ids, baseline_rows);
        report.rows.insert(report.rows.end(), baseline_rows.begin(), baseline_rows.end());
    }

    for (std::size_t d = 0; d < 2; ++d) {
        MetricRow delta;
        delta.strategy = to_string(strategy);
        delta.direction = report.rows[d].direction;
        delta.r1 = report.rows[d].r1 - baseline_rows[d].r1;
        delta.r5 = report.rows[d].r5 - baseline_rows[d].r5;
        delta.r10 = report.rows[d].r10 - baseline_rows[d].r10;
        delta.n_queries = report.rows[d].n_queries;
        report.deltas.push_back(delta);
    }

    std::ofstream out(config.report_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot write report: " + config.report_path);
    out << report.to_text();
    return report;
}

void cmd_kb_edit(const PipelineConfig& config, const KbEditRequest& request) {
    config.validate();
    auto kb = load_kb(config.kb_path);
    if (request.op == "inject") {
        EntitySense sense{request.entity, request.sense_tag, DescriptionSource::manual};
        kb = inject_knowledge(kb, std::move(sense), request.descriptions, config.kb_created_at,
                              config.h_max);
    } else if (request.op == "add-sense") {
        if (!request.sense_tag) throw ConfigError("add-sense requires a sense tag");
        kb = add_parallel_sense(kb, request.entity, *request.sense_tag, request.descriptions,
                                config.kb_created_at, request.retag_existing_as, config.h_max);
    } else {
        throw ConfigError("unknown kb-edit op: " + request.op);
    }
    save_kb(kb, config.kb_path);
}

}  // namespace evdrank

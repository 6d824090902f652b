#include "evdrank/dqr.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "evdrank/util.hpp"

namespace evdrank {

using nlohmann::json;

double score_candidate(const EncoderParams& params, const std::string& candidate_text,
                       const CorpusItem& truth_item) {
    return similarity(encode_text(params, candidate_text), encode_item(params, truth_item));
}

std::optional<DqrRecord> build_record(const EncoderParams& params, LlmGateway& gateway,
                                      const EvdKnowledgeBase& kb, const std::string& query_id,
                                      const std::string& x, const CorpusItem& truth_item,
                                      std::size_t k, std::uint64_t seed,
                                      const RewriteGrammar& grammar, bool best_only) {
    if (k < 1) throw Error("k must be >= 1");

    std::vector<std::pair<EntityMatch, EvdEntry>> matched;
    for (const auto& match : kb.link_entities(x))
        for (const auto& entry : kb.lookup(match.entity)) matched.emplace_back(match, entry);

    const double original = score_candidate(params, x, truth_item);
    auto candidates = gateway.generate_rewrite_candidates(x, matched, k, seed, grammar);

    // dedup by rendered text, first occurrence wins
    std::set<std::string> seen;
    std::vector<RewriteCandidate> kept;
    for (auto& cand : candidates) {
        if (!seen.insert(cand.text).second) continue;
        cand.score = score_candidate(params, cand.text, truth_item);
        if (*cand.score > original) kept.push_back(std::move(cand));
    }
    if (kept.empty()) return std::nullopt;

    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return *a.score > *b.score; });
    if (best_only && kept.size() > 1) kept.resize(1);

    DqrRecord rec;
    rec.query_id = query_id;
    rec.x = x;
    rec.original_score = original;
    rec.k_effective = kept.size();
    rec.candidates = std::move(kept);
    return rec;
}

std::pair<std::vector<DqrRecord>, DqrBuildReport> build_dataset(
    const EncoderParams& params, LlmGateway& gateway, const EvdKnowledgeBase& kb,
    const std::vector<CorpusItem>& corpus, std::size_t k, std::uint64_t seed,
    const RewriteGrammar& grammar, bool best_only) {
    if (corpus.empty()) return {{}, {}};

    std::vector<DqrRecord> records;
    DqrBuildReport report;
    for (const auto& item : corpus) {
        ++report.attempted;
        const bool has_entity = !kb.link_entities(item.caption).empty();
        const std::uint64_t record_seed = hash_mix(seed, fnv1a64(item.id));
        auto rec = build_record(params, gateway, kb, item.id, item.caption, item, k, record_seed,
                                grammar, best_only);
        if (rec) {
            ++report.kept;
            records.push_back(std::move(*rec));
        } else if (!has_entity) {
            ++report.skipped_no_entity;
        } else {
            ++report.skipped_no_improver;
        }
    }
    return {std::move(records), report};
}

namespace {

json action_to_json(const RewriteAction& a) {
    json j;
    j["slot"] = a.slot;
    j["skip"] = a.choice.skip;
    if (!a.choice.skip) {
        j["desc_index"] = a.choice.desc_index;
        j["template"] = a.choice.template_index;
        if (a.choice.sense_tag)
            j["sense_tag"] = *a.choice.sense_tag;
        else
            j["sense_tag"] = nullptr;
    }
    return j;
}

RewriteAction action_from_json(const json& j, std::size_t line_no) {
    if (!j.is_object() || !j.contains("slot") || !j.contains("skip"))
        throw MalformedRecord(line_no, "bad action record");
    RewriteAction a;
    a.slot = j["slot"].get<std::size_t>();
    a.choice.skip = j["skip"].get<bool>();
    if (!a.choice.skip) {
        a.choice.desc_index = j.value("desc_index", std::size_t{0});
        a.choice.template_index = j.value("template", std::size_t{0});
        if (j.contains("sense_tag") && !j["sense_tag"].is_null())
            a.choice.sense_tag = j["sense_tag"].get<std::string>();
    }
    return a;
}

}  // namespace

void save_dqr(const std::vector<DqrRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open dataset file for writing: " + path);
    for (const auto& rec : records) {
        json j;
        j["query_id"] = rec.query_id;
        j["x"] = rec.x;
        j["original_score"] = rec.original_score;
        j["k_effective"] = rec.k_effective;
        json cands = json::array();
        for (const auto& cand : rec.candidates) {
            json c;
            json actions = json::array();
            for (const auto& a : cand.actions) actions.push_back(action_to_json(a));
            c["actions"] = std::move(actions);
            c["text"] = cand.text;
            c["score"] = cand.score.value_or(0.0);
            cands.push_back(std::move(c));
        }
        j["candidates"] = std::move(cands);
        out << j.dump() << '\n';
    }
    if (!out) throw IoFailure("write failed: " + path);
}

std::vector<DqrRecord> load_dqr(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open dataset file: " + path);
    std::vector<DqrRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw MalformedRecord(line_no, "not a JSON object");
        DqrRecord rec;
        rec.query_id = j.value("query_id", "");
        rec.x = j.value("x", "");
        if (rec.query_id.empty() || !j.contains("original_score") ||
            !j.contains("candidates") || !j["candidates"].is_array())
            throw MalformedRecord(line_no, "missing required fields");
        rec.original_score = j["original_score"].get<double>();
        rec.k_effective = j.value("k_effective", std::size_t{0});
        for (const auto& c : j["candidates"]) {
            RewriteCandidate cand;
            cand.text = c.value("text", "");
            cand.score = c.value("score", 0.0);
            if (!c.contains("actions") || !c["actions"].is_array())
                throw MalformedRecord(line_no, "candidate missing actions");
            for (const auto& a : c["actions"]) cand.actions.push_back(action_from_json(a, line_no));
            rec.candidates.push_back(std::move(cand));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace evdrank

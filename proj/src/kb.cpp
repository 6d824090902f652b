#include "evdrank/kb.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "evdrank/util.hpp"

namespace evdrank {

using nlohmann::json;

const char* to_string(DescriptionSource s) {
    return s == DescriptionSource::manual ? "manual" : "llm";
}

DescriptionSource source_from_string(const std::string& s) {
    if (s == "llm") return DescriptionSource::llm;
    if (s == "manual") return DescriptionSource::manual;
    throw Error("unknown description source: " + s);
}

namespace {

void validate_descriptions(const std::vector<std::string>& descriptions, std::size_t h_max) {
    if (descriptions.empty()) throw EmptyDescriptions();
    if (descriptions.size() > h_max) throw TooManyDescriptions(descriptions.size(), h_max);
    std::set<std::string> seen;
    for (const auto& d : descriptions) {
        if (d.empty()) throw Error("description strings must be non-empty");
        if (!seen.insert(d).second) throw Error("duplicate description within entry: " + d);
    }
}

// Light shape check; full calendar validation is out of scope.
bool looks_like_rfc3339(const std::string& s) {
    if (s.size() < 20) return false;
    return s[4] == '-' && s[7] == '-' && s[10] == 'T' && s[13] == ':' && s[16] == ':';
}

}  // namespace

std::vector<EvdEntry> EvdKnowledgeBase::lookup(const std::string& entity,
                                               const std::optional<std::string>& sense_tag) const {
    std::vector<EvdEntry> out;
    const std::string key = to_lower_ascii(entity);
    if (sense_tag) {
        auto it = entries_.find(Key{key, sense_tag});
        if (it != entries_.end()) out.push_back(it->second);
        return out;
    }
    for (auto it = entries_.lower_bound(Key{key, std::nullopt});
         it != entries_.end() && it->first.first == key; ++it) {
        out.push_back(it->second);
    }
    return out;
}

std::vector<EntityMatch> EvdKnowledgeBase::link_entities(const std::string& query) const {
    // Distinct entity strings as token sequences, grouped by first token and
    // ordered longest-first so the longest whole-word match wins.
    std::map<std::string, std::vector<std::vector<std::string>>> by_first;
    std::string last_entity;
    for (const auto& [key, entry] : entries_) {
        if (key.first == last_entity) continue;  // senses share the surface form
        last_entity = key.first;
        auto toks = tokenize(key.first);
        if (toks.empty()) continue;
        by_first[toks[0]].push_back(std::move(toks));
    }
    for (auto& [first, seqs] : by_first) {
        std::sort(seqs.begin(), seqs.end(),
                  [](const auto& a, const auto& b) { return a.size() > b.size(); });
    }

    std::vector<EntityMatch> out;
    const auto spans = token_spans(query);
    std::size_t i = 0;
    while (i < spans.size()) {
        auto it = by_first.find(spans[i].lower);
        bool advanced = false;
        if (it != by_first.end()) {
            for (const auto& seq : it->second) {
                if (i + seq.size() > spans.size()) continue;
                bool ok = true;
                for (std::size_t j = 1; j < seq.size(); ++j) {
                    if (spans[i + j].lower != seq[j]) {
                        ok = false;
                        break;
                    }
                }
                if (!ok) continue;
                EntityMatch m;
                m.entity = join(seq, " ");
                m.begin = spans[i].begin;
                m.end = spans[i + seq.size() - 1].end;
                out.push_back(std::move(m));
                i += seq.size();
                advanced = true;
                break;
            }
        }
        if (!advanced) ++i;
    }
    return out;
}

void EvdKnowledgeBase::insert_entry(EvdEntry entry) {
    entry.sense.entity = to_lower_ascii(entry.sense.entity);
    if (entry.sense.entity.empty()) throw Error("entity must be non-empty");
    if (entry.sense.sense_tag && entry.sense.sense_tag->empty())
        throw Error("sense_tag must be non-empty when present");
    validate_descriptions(entry.descriptions, entry.descriptions.size());  // size/dup checks only
    Key key{entry.sense.entity, entry.sense.sense_tag};
    if (entries_.count(key)) throw DuplicateKey(key.first, key.second);
    for (auto it = entries_.lower_bound(Key{key.first, std::nullopt});
         it != entries_.end() && it->first.first == key.first; ++it) {
        if (it->first.second.has_value() != key.second.has_value())
            throw SenseConflict("entity '" + key.first +
                                "' would mix tagged and untagged senses");
    }
    entries_.emplace(std::move(key), std::move(entry));
    ++version_;
}

EvdKnowledgeBase EvdKnowledgeBase::with_injected(EntitySense sense,
                                                 std::vector<std::string> descriptions,
                                                 std::string created_at,
                                                 std::size_t h_max) const {
    validate_descriptions(descriptions, h_max);
    sense.entity = to_lower_ascii(sense.entity);
    if (sense.entity.empty()) throw Error("entity must be non-empty");
    sense.source = DescriptionSource::manual;

    // A tagged upsert may not sit next to an untagged entry for the same
    // entity, and vice versa — unless it replaces that exact entry.
    for (auto it = entries_.lower_bound(Key{sense.entity, std::nullopt});
         it != entries_.end() && it->first.first == sense.entity; ++it) {
        const bool existing_tagged = it->first.second.has_value();
        if (existing_tagged != sense.sense_tag.has_value()) {
            throw SenseConflict("entity '" + sense.entity +
                                "' mixes tagged and untagged senses; retag via "
                                "add_parallel_sense first");
        }
    }

    EvdKnowledgeBase next = *this;
    Key key{sense.entity, sense.sense_tag};
    EvdEntry entry{std::move(sense), std::move(descriptions), std::move(created_at)};
    next.entries_[key] = std::move(entry);
    next.version_ = version_ + 1;
    return next;
}

EvdKnowledgeBase EvdKnowledgeBase::with_parallel_sense(const std::string& entity,
                                                       const std::string& sense_tag,
                                                       std::vector<std::string> descriptions,
                                                       std::string created_at,
                                                       const std::string& retag_existing_as,
                                                       std::size_t h_max) const {
    if (sense_tag.empty()) throw Error("sense_tag must be non-empty");
    validate_descriptions(descriptions, h_max);
    const std::string key_entity = to_lower_ascii(entity);

    if (entries_.count(Key{key_entity, sense_tag}))
        throw DuplicateSense(key_entity, sense_tag);

    EvdKnowledgeBase next = *this;
    auto untagged = next.entries_.find(Key{key_entity, std::nullopt});
    if (untagged != next.entries_.end()) {
        if (retag_existing_as.empty() || retag_existing_as == sense_tag)
            throw DuplicateSense(key_entity, sense_tag);
        EvdEntry retagged = untagged->second;
        retagged.sense.sense_tag = retag_existing_as;
        next.entries_.erase(untagged);
        next.entries_[Key{key_entity, retag_existing_as}] = std::move(retagged);
    }

    EntitySense sense{key_entity, sense_tag, DescriptionSource::manual};
    EvdEntry entry{std::move(sense), std::move(descriptions), std::move(created_at)};
    next.entries_[Key{key_entity, sense_tag}] = std::move(entry);
    next.version_ = version_ + 1;
    return next;
}

EvdKnowledgeBase load_kb(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open KB file: " + path);

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw MalformedRecord(1, "missing header");
    ++line_no;

    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw MalformedRecord(1, "header is not a JSON object");
    if (header.value("format", "") != "evd-kb")
        throw MalformedRecord(1, "header format is not evd-kb");
    if (header.value("schema_version", -1) != 1)
        throw MalformedRecord(1, "unsupported schema_version");
    if (!header.contains("kb_version") || !header["kb_version"].is_number_unsigned())
        throw MalformedRecord(1, "missing kb_version");

    EvdKnowledgeBase kb;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object())
            throw MalformedRecord(line_no, "not a JSON object");
        try {
            EvdEntry entry;
            if (!rec.contains("entity") || !rec["entity"].is_string())
                throw Error("missing entity");
            entry.sense.entity = rec["entity"].get<std::string>();
            if (entry.sense.entity.empty()) throw Error("entity is empty");
            if (rec.contains("sense_tag") && !rec["sense_tag"].is_null()) {
                if (!rec["sense_tag"].is_string()) throw Error("sense_tag is not a string");
                entry.sense.sense_tag = rec["sense_tag"].get<std::string>();
                if (entry.sense.sense_tag->empty()) throw Error("sense_tag is empty");
            }
            if (!rec.contains("descriptions") || !rec["descriptions"].is_array())
                throw Error("missing descriptions");
            for (const auto& d : rec["descriptions"]) {
                if (!d.is_string()) throw Error("description is not a string");
                entry.descriptions.push_back(d.get<std::string>());
            }
            validate_descriptions(entry.descriptions, entry.descriptions.size());
            entry.sense.source = source_from_string(rec.value("source", ""));
            entry.created_at = rec.value("created_at", "");
            if (!looks_like_rfc3339(entry.created_at)) throw Error("bad created_at timestamp");

            EvdKnowledgeBase::Key key{to_lower_ascii(entry.sense.entity), entry.sense.sense_tag};
            if (kb.entries().count(key)) throw DuplicateKey(key.first, key.second);
            kb.insert_entry(std::move(entry));
        } catch (const DuplicateKey&) {
            throw;
        } catch (const Error& e) {
            throw MalformedRecord(line_no, e.what());
        }
    }
    kb.set_version(header["kb_version"].get<std::uint64_t>());
    return kb;
}

void save_kb(const EvdKnowledgeBase& kb, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open KB file for writing: " + path);

    json header;
    header["format"] = "evd-kb";
    header["schema_version"] = 1;
    header["kb_version"] = kb.version();
    out << header.dump() << '\n';

    for (const auto& [key, entry] : kb.entries()) {
        json rec;
        rec["entity"] = entry.sense.entity;
        if (entry.sense.sense_tag)
            rec["sense_tag"] = *entry.sense.sense_tag;
        else
            rec["sense_tag"] = nullptr;
        rec["descriptions"] = entry.descriptions;
        rec["source"] = to_string(entry.sense.source);
        rec["created_at"] = entry.created_at;
        out << rec.dump() << '\n';
    }
    if (!out) throw IoFailure("write failed: " + path);
}

}  // namespace evdrank

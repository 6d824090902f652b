#pragma once
// Entity visual-description knowledge base: the persistent map from entity
// senses to description lists, plus in-query entity linking and the manual
// editing operations (knowledge injection, parallel senses).
//
// The KB is a value type with copy-on-write semantics: readers hold immutable
// snapshots, every mutation returns a fresh snapshot with version + 1.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evdrank/errors.hpp"

namespace evdrank {

enum class DescriptionSource { llm, manual };

const char* to_string(DescriptionSource s);
DescriptionSource source_from_string(const std::string& s);

struct EntitySense {
    std::string entity;                    // lowercase surface form, non-empty
    std::optional<std::string> sense_tag;  // absent ⇔ entity unambiguous
    DescriptionSource source = DescriptionSource::llm;

    friend bool operator==(const EntitySense&, const EntitySense&) = default;
};

struct EvdEntry {
    EntitySense sense;
    std::vector<std::string> descriptions;  // non-empty, no duplicates
    std::string created_at;                 // RFC3339 UTC

    friend bool operator==(const EvdEntry&, const EvdEntry&) = default;
};

// Byte span of one linked entity inside a query string.
struct EntityMatch {
    std::string entity;  // KB key (lowercase)
    std::size_t begin = 0;
    std::size_t end = 0;  // [begin, end)

    friend bool operator==(const EntityMatch&, const EntityMatch&) = default;
};

class EvdKnowledgeBase {
public:
    // (entity, sense_tag); untagged sorts before tagged for a given entity
    using Key = std::pair<std::string, std::optional<std::string>>;

    EvdKnowledgeBase() = default;

    std::uint64_t version() const { return version_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::map<Key, EvdEntry>& entries() const { return entries_; }

    // All senses of an entity, or the single tagged sense when a tag is given.
    // Absence is an empty result, never an error.
    std::vector<EvdEntry> lookup(const std::string& entity,
                                 const std::optional<std::string>& sense_tag = std::nullopt) const;

    // Longest-match, left-to-right, case-insensitive whole-word linking of KB
    // entities in a query. Matches never overlap and come back in span order.
    std::vector<EntityMatch> link_entities(const std::string& query) const;

    // Upsert with source=manual. Throws EmptyDescriptions / TooManyDescriptions
    // on bad input and SenseConflict when a tagged insert would coexist with an
    // untagged entry (or vice versa).
    EvdKnowledgeBase with_injected(EntitySense sense, std::vector<std::string> descriptions,
                                   std::string created_at, std::size_t h_max = 5) const;

    // Add a new tagged sense. If the entity currently has a single untagged
    // entry it is retagged as `retag_existing_as` first, so tagged and
    // untagged entries never coexist.
    EvdKnowledgeBase with_parallel_sense(const std::string& entity, const std::string& sense_tag,
                                         std::vector<std::string> descriptions,
                                         std::string created_at,
                                         const std::string& retag_existing_as = "default",
                                         std::size_t h_max = 5) const;

    friend bool operator==(const EvdKnowledgeBase&, const EvdKnowledgeBase&) = default;

    // Used by load_kb / the offline builder; validates the entry invariants
    // and bumps the version.
    void insert_entry(EvdEntry entry);
    void set_version(std::uint64_t v) { version_ = v; }

private:
    std::map<Key, EvdEntry> entries_;
    std::uint64_t version_ = 0;
};

// File format: UTF-8 JSON lines. Line 1 is the header record
// {"format":"evd-kb","schema_version":1,"kb_version":N}; each following line
// is one entry. Entries are written in sorted key order.
EvdKnowledgeBase load_kb(const std::string& path);
void save_kb(const EvdKnowledgeBase& kb, const std::string& path);

// Spec-surface wrappers over the class operations.
inline std::vector<EvdEntry> lookup(const EvdKnowledgeBase& kb, const std::string& entity,
                                    const std::optional<std::string>& sense_tag = std::nullopt) {
    return kb.lookup(entity, sense_tag);
}

inline std::vector<EntityMatch> link_entities(const EvdKnowledgeBase& kb,
                                              const std::string& query) {
    return kb.link_entities(query);
}

inline EvdKnowledgeBase inject_knowledge(const EvdKnowledgeBase& kb, EntitySense sense,
                                         std::vector<std::string> descriptions,
                                         std::string created_at = "2000-01-01T00:00:00Z",
                                         std::size_t h_max = 5) {
    return kb.with_injected(std::move(sense), std::move(descriptions), std::move(created_at),
                            h_max);
}

inline EvdKnowledgeBase add_parallel_sense(const EvdKnowledgeBase& kb, const std::string& entity,
                                           const std::string& sense_tag,
                                           std::vector<std::string> descriptions,
                                           std::string created_at = "2000-01-01T00:00:00Z",
                                           const std::string& retag_existing_as = "default",
                                           std::size_t h_max = 5) {
    return kb.with_parallel_sense(entity, sense_tag, std::move(descriptions),
                                  std::move(created_at), retag_existing_as, h_max);
}

}  // namespace evdrank

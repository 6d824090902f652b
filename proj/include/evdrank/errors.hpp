#pragma once
// Error types thrown across the library. Everything derives from
// evdrank::Error so callers can catch the whole family at the CLI boundary.

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace evdrank {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoFailure : Error {
    using Error::Error;
};

struct MalformedRecord : Error {
    std::size_t line_no;
    MalformedRecord(std::size_t line, const std::string& detail)
        : Error("malformed record at line " + std::to_string(line) + ": " + detail),
          line_no(line) {}
};

struct DuplicateKey : Error {
    std::string entity;
    std::optional<std::string> sense_tag;
    DuplicateKey(std::string ent, std::optional<std::string> tag)
        : Error("duplicate key: (" + ent + ", " + tag.value_or("<untagged>") + ")"),
          entity(std::move(ent)),
          sense_tag(std::move(tag)) {}
};

struct EmptyDescriptions : Error {
    EmptyDescriptions() : Error("entry requires at least one description") {}
};

struct TooManyDescriptions : Error {
    TooManyDescriptions(std::size_t got, std::size_t h_max)
        : Error("entry has " + std::to_string(got) + " descriptions, limit " +
                std::to_string(h_max)) {}
};

struct DuplicateSense : Error {
    DuplicateSense(const std::string& entity, const std::string& tag)
        : Error("sense (" + entity + ", " + tag + ") already exists") {}
};

// Tagged and untagged senses of one entity may not coexist.
struct SenseConflict : Error {
    using Error::Error;
};

struct BackendUnavailable : Error {
    using Error::Error;
};

struct MalformedResponse : Error {
    using Error::Error;
};

struct IllegalAction : Error {
    using Error::Error;
};

struct NonFiniteLoss : Error {
    using Error::Error;
};

struct DegenerateRanking : Error {
    using Error::Error;
};

struct StaleIndex : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace evdrank

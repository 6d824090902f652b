#pragma once
// Single boundary to any external language model: entity extraction, visual
// description generation, ambiguity handling, and rewrite-candidate
// generation. Ships a deterministic offline mock backend (a pure function of
// request + seed) and an on-disk response cache keyed by content hash, so the
// whole pipeline runs without network access.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evdrank/errors.hpp"
#include "evdrank/kb.hpp"
#include "evdrank/rewriter.hpp"

namespace evdrank {

enum class PromptKind {
    extract_entities,
    describe_entity,
    identify_ambiguous,
    explain_senses,
    rewrite_query,
};

const char* to_string(PromptKind k);

struct PromptTemplate {
    PromptKind name = PromptKind::extract_entities;
    std::string body;  // instruction text with {placeholder} slots
    std::vector<std::string> demonstrations;  // 1..3 QA example strings
};

PromptTemplate default_prompt_template(PromptKind kind);

// Substitutes bindings into the template body and prepends the
// demonstrations. Throws when a placeholder is left unbound.
std::string render_prompt(const PromptTemplate& tmpl,
                          const std::map<std::string, std::string>& bindings);

struct LlmRequest {
    PromptKind template_name = PromptKind::extract_entities;
    std::map<std::string, std::string> bindings;
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

enum class BackendKind { remote, mock };

class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual BackendKind kind() const = 0;
    virtual std::string model_name() const = 0;
    virtual std::string complete(const LlmRequest& request, const std::string& prompt) = 0;
};

// Offline stand-in for a hosted model. Responses are pure functions of the
// request content and seed: entity extraction scans a built-in visual-noun
// lexicon, descriptions are seeded template fills, ambiguity comes from a
// fixed table.
class MockLlmBackend final : public LlmBackend {
public:
    BackendKind kind() const override { return BackendKind::mock; }
    std::string model_name() const override { return "mock-visual-v1"; }
    std::string complete(const LlmRequest& request, const std::string& prompt) override;
};

struct RemoteOptions {
    std::string endpoint;  // e.g. http://host:port/v1/chat/completions
    std::string model = "remote-default";
    double timeout_s = 30.0;
    int max_retries = 3;
    double backoff_initial_s = 0.25;
};

// Chat-completions style client: POST {model, messages, temperature, seed},
// bearer token from EVDRANK_LLM_TOKEN, retries with exponential backoff.
class RemoteLlmBackend final : public LlmBackend {
public:
    explicit RemoteLlmBackend(RemoteOptions options);
    BackendKind kind() const override { return BackendKind::remote; }
    std::string model_name() const override { return options_.model; }
    std::string complete(const LlmRequest& request, const std::string& prompt) override;

private:
    RemoteOptions options_;
};

class LlmGateway {
public:
    explicit LlmGateway(std::shared_ptr<LlmBackend> backend,
                        std::optional<std::string> cache_dir = std::nullopt);

    LlmBackend& backend() { return *backend_; }

    // Cache-aware completion. Key = content hash of (template name, bindings,
    // model name, temperature, seed); a hit returns the stored response
    // without a backend call. Zero-length cache entries count as corrupt and
    // are refetched.
    std::string complete(const LlmRequest& request);

    // Lowercase, deduplicated visual entity strings in order of appearance.
    std::vector<std::string> extract_visual_entities(const std::string& caption,
                                                     std::uint64_t seed = 0);

    // Exactly h distinct non-empty strings, or MalformedResponse.
    std::vector<std::string> generate_descriptions(const EntitySense& sense, std::size_t h,
                                                   std::uint64_t seed = 0);

    // Empty result means the entity is unambiguous; otherwise >= 2 (tag,
    // gloss) pairs. A single-sense response is MalformedResponse.
    std::vector<std::pair<std::string, std::string>> resolve_ambiguity(const std::string& entity,
                                                                       std::uint64_t seed = 0);

    // k candidates over the query's entity slots, each carrying its action
    // sequence and rendered text. The mock path samples action sequences
    // uniformly (distinct when the space permits); zero matched entities
    // yields k identity rewrites.
    std::vector<RewriteCandidate> generate_rewrite_candidates(
        const std::string& query, const std::vector<std::pair<EntityMatch, EvdEntry>>& matched,
        std::size_t k, std::uint64_t seed, const RewriteGrammar& grammar);

private:
    std::shared_ptr<LlmBackend> backend_;
    std::optional<std::string> cache_dir_;
};

// Mock internals, exposed so the bundled corpus generator and tests can rely
// on the exact same deterministic content.
const std::vector<std::string>& mock_visual_lexicon();
const std::map<std::string, std::vector<std::pair<std::string, std::string>>>&
mock_ambiguity_table();
std::vector<std::string> mock_descriptions(const std::string& entity,
                                           const std::optional<std::string>& sense_tag,
                                           std::size_t h, std::uint64_t seed);

// Lenient line-list parsing: strips bullets and "1." / "2)" numbering.
std::vector<std::string> parse_response_lines(const std::string& response);

}  // namespace evdrank

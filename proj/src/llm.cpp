#include "evdrank/llm.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "evdrank/util.hpp"

namespace evdrank {

using nlohmann::json;

const char* to_string(PromptKind k) {
    switch (k) {
        case PromptKind::extract_entities: return "extract_entities";
        case PromptKind::describe_entity: return "describe_entity";
        case PromptKind::identify_ambiguous: return "identify_ambiguous";
        case PromptKind::explain_senses: return "explain_senses";
        case PromptKind::rewrite_query: return "rewrite_query";
    }
    return "unknown";
}

PromptTemplate default_prompt_template(PromptKind kind) {
    PromptTemplate t;
    t.name = kind;
    switch (kind) {
        case PromptKind::extract_entities:
            t.body =
                "List the visually concrete entities in the caption, one per line, "
                "lowercase. Skip abstract or non-visual terms such as place names.\n"
                "Caption: {caption}";
            t.demonstrations = {
                "Q: a man rides a skateboard in front of a crowd\nA: man\nskateboard\ncrowd",
                "Q: a street in New York on a rainy day\nA: street",
            };
            break;
        case PromptKind::describe_entity:
            t.body =
                "Give {count} short visual descriptions of {entity}{tag}, one per line, "
                "covering color, shape, parts, and quantity.";
            t.demonstrations = {
                "Q: describe tent\nA: has sloped fabric walls\nhas guy ropes and pegs",
            };
            break;
        case PromptKind::identify_ambiguous:
            t.body =
                "Does the entity '{entity}' have several distinct visual meanings? "
                "Answer yes or no.";
            t.demonstrations = {"Q: bank\nA: yes", "Q: tent\nA: no"};
            break;
        case PromptKind::explain_senses:
            t.body =
                "List each distinct visual meaning of '{entity}' as 'tag: explanation', "
                "one per line.";
            t.demonstrations = {
                "Q: bank\nA: financial institution: a building where money is kept\n"
                "riverbank: sloping ground at the edge of a river",
            };
            break;
        case PromptKind::rewrite_query:
            t.body =
                "Rewrite the query by weaving in suitable visual descriptions. Choose per "
                "entity slot and answer one line per rewrite as "
                "'slot=<n> sense=<tag|-> desc=<i> template=<name>'.\n"
                "Query: {query}\nOptions:\n{options}";
            t.demonstrations = {
                "Q: a tent by the lake\nA: slot=0 sense=- desc=1 template=parenthetical",
            };
            break;
    }
    return t;
}

std::string render_prompt(const PromptTemplate& tmpl,
                          const std::map<std::string, std::string>& bindings) {
    std::string out;
    for (const auto& demo : tmpl.demonstrations) out += demo + "\n\n";
    const std::string& body = tmpl.body;
    std::size_t i = 0;
    while (i < body.size()) {
        if (body[i] == '{') {
            const auto close = body.find('}', i);
            if (close == std::string::npos) throw Error("unterminated placeholder in template");
            const std::string name = body.substr(i + 1, close - i - 1);
            auto it = bindings.find(name);
            if (it == bindings.end())
                throw Error("unbound placeholder '" + name + "' in template " +
                            to_string(tmpl.name));
            out += it->second;
            i = close + 1;
        } else {
            out += body[i++];
        }
    }
    return out;
}

std::vector<std::string> parse_response_lines(const std::string& response) {
    std::vector<std::string> out;
    std::istringstream in(response);
    std::string line;
    while (std::getline(in, line)) {
        std::size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        std::size_t e = line.find_last_not_of(" \t\r");
        std::string s = line.substr(b, e - b + 1);
        // strip "- ", "* ", "3. ", "3) " prefixes
        if (s.size() >= 2 && (s[0] == '-' || s[0] == '*') && s[1] == ' ') {
            s = s.substr(2);
        } else {
            std::size_t d = 0;
            while (d < s.size() && std::isdigit(static_cast<unsigned char>(s[d]))) ++d;
            if (d > 0 && d + 1 < s.size() && (s[d] == '.' || s[d] == ')') && s[d + 1] == ' ')
                s = s.substr(d + 2);
        }
        b = s.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        e = s.find_last_not_of(" \t");
        out.push_back(s.substr(b, e - b + 1));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mock content tables

const std::vector<std::string>& mock_visual_lexicon() {
    static const std::vector<std::string> lexicon = {
        "accordion", "amphitheater", "anvil", "aquarium", "aqueduct", "astronaut", "bank",
        "barn", "bellows", "birdbath", "bobsled", "bulldozer", "cabin", "camp of tents",
        "canoe", "carousel", "catamaran", "cathedral", "chandelier", "churn", "conservatory",
        "cottage", "crowd", "dolphin", "dovecote", "drawbridge", "excavator", "ferris wheel",
        "ferry", "flamingo", "forklift", "funicular", "gazebo", "glacier", "gondola",
        "greenhouse", "hammock", "harpsichord", "hot air balloon", "hovercraft", "iceberg",
        "icebreaker", "igloo", "kayak", "kiln", "lantern", "lighthouse", "loom", "man",
        "monastery", "mouse", "obelisk", "observatory", "orchard", "paddleboat", "pagoda",
        "pergola", "planetarium", "rowboat", "saxophone", "school bus", "scooter", "seaplane",
        "skateboard", "snowplow", "spindle", "square", "stable", "streetcar", "submarine",
        "sundial", "telescope", "tent", "tractor", "trellis", "tugboat", "velodrome",
        "village", "vineyard", "volcano", "water tower", "waterfall", "weathervane", "whale",
        "wind turbine", "windmill", "yurt", "zeppelin",
    };
    return lexicon;
}

const std::map<std::string, std::vector<std::pair<std::string, std::string>>>&
mock_ambiguity_table() {
    static const std::map<std::string, std::vector<std::pair<std::string, std::string>>> table = {
        {"bank",
         {{"financial institution", "a building where money is kept"},
          {"riverbank", "sloping ground at the edge of a river"}}},
        {"mouse",
         {{"animal", "a small gray rodent with a long tail"},
          {"computer device", "a handheld pointing device with buttons"}}},
        {"square",
         {{"plaza", "an open public space in a town"},
          {"geometric shape", "a four-sided figure with equal sides"}}},
    };
    return table;
}

namespace {

const std::vector<std::string>& attr_pool() {
    static const std::vector<std::string> attrs = {
        "crimson",  "cobalt",   "amber",    "ivory",    "charcoal", "emerald",  "golden",
        "silvery",  "scarlet",  "teal",     "bronze",   "violet",   "slate",    "coppery",
        "pearly",   "ashen",    "russet",   "sable",    "umber",    "auburn",   "cerulean",
        "crimped",  "dappled",  "freckled", "glossy",   "grainy",   "matte",    "mottled",
        "opaline",  "plaited",  "ribbed",   "speckled", "striated", "tawny",    "veined",
        "burnished", "lacquered", "gilded",  "frosted",  "smoked",
    };
    return attrs;
}

const std::vector<std::string>& facet_pool() {
    static const std::vector<std::string> facets = {
        "canvas sheeting",  "cedar paneling",   "clay ridgeline",   "iron framework",
        "linen canopy",     "stone masonry",    "steel plating",    "hemp rigging",
        "oak lattice",      "marble veining",   "tile gabling",     "copper cladding",
        "pine strutwork",   "zinc sheathing",   "brass finial",     "plaster cornice",
        "granite parapet",  "walnut balustrade", "silver filigree", "teak fretwork",
        "gypsum molding",   "glass tracery",    "mahogany corbel",  "bamboo mullion",
        "cork soffit",      "felt gusset",      "nickel flange",    "birch louver",
        "wicker awning",    "ashwood keel",
    };
    return facets;
}

// Whole-word longest-match scan of `phrases` over `text`, results in order of
// first appearance, deduplicated.
std::vector<std::string> scan_phrases(const std::string& text,
                                      const std::vector<std::string>& phrases) {
    std::map<std::string, std::vector<std::vector<std::string>>> by_first;
    for (const auto& p : phrases) {
        auto toks = tokenize(p);
        if (!toks.empty()) by_first[toks[0]].push_back(std::move(toks));
    }
    for (auto& [first, seqs] : by_first)
        std::sort(seqs.begin(), seqs.end(),
                  [](const auto& a, const auto& b) { return a.size() > b.size(); });

    std::vector<std::string> out;
    std::set<std::string> seen;
    const auto spans = token_spans(text);
    std::size_t i = 0;
    while (i < spans.size()) {
        auto it = by_first.find(spans[i].lower);
        bool advanced = false;
        if (it != by_first.end()) {
            for (const auto& seq : it->second) {
                if (i + seq.size() > spans.size()) continue;
                bool ok = true;
                for (std::size_t j = 1; j < seq.size(); ++j)
                    if (spans[i + j].lower != seq[j]) {
                        ok = false;
                        break;
                    }
                if (!ok) continue;
                std::string phrase = join(seq, " ");
                if (seen.insert(phrase).second) out.push_back(std::move(phrase));
                i += seq.size();
                advanced = true;
                break;
            }
        }
        if (!advanced) ++i;
    }
    return out;
}

}  // namespace

std::vector<std::string> mock_descriptions(const std::string& entity,
                                           const std::optional<std::string>& sense_tag,
                                           std::size_t h, std::uint64_t seed) {
    const auto& attrs = attr_pool();
    const auto& facets = facet_pool();
    const std::string key = entity + "|" + sense_tag.value_or("") + "|" + std::to_string(seed);
    const std::uint64_t base = fnv1a64(key);

    std::vector<std::string> out;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < h; ++i) {
        std::size_t a = static_cast<std::size_t>(hash_mix(base, 2 * i + 1) % attrs.size());
        const std::size_t f = static_cast<std::size_t>((hash_mix(base, 0) + i) % facets.size());
        std::string desc = "has " + attrs[a] + " " + facets[f];
        while (!seen.insert(desc).second) {
            a = (a + 1) % attrs.size();
            desc = "has " + attrs[a] + " " + facets[f];
        }
        out.push_back(std::move(desc));
    }
    return out;
}

std::string MockLlmBackend::complete(const LlmRequest& request, const std::string&) {
    const auto& b = request.bindings;
    auto get = [&](const char* name) -> std::string {
        auto it = b.find(name);
        return it == b.end() ? std::string() : it->second;
    };
    switch (request.template_name) {
        case PromptKind::extract_entities: {
            auto found = scan_phrases(get("caption"), mock_visual_lexicon());
            return join(found, "\n");
        }
        case PromptKind::describe_entity: {
            std::size_t h = 1;
            try {
                h = static_cast<std::size_t>(std::stoul(get("count")));
            } catch (...) {
                h = 1;
            }
            std::optional<std::string> tag;
            if (!get("tag").empty()) tag = get("tag");
            return join(mock_descriptions(to_lower_ascii(get("entity")), tag, h, request.seed),
                        "\n");
        }
        case PromptKind::identify_ambiguous:
            return mock_ambiguity_table().count(to_lower_ascii(get("entity"))) ? "yes" : "no";
        case PromptKind::explain_senses: {
            auto it = mock_ambiguity_table().find(to_lower_ascii(get("entity")));
            if (it == mock_ambiguity_table().end()) return "";
            std::vector<std::string> lines;
            for (const auto& [tag, gloss] : it->second) lines.push_back(tag + ": " + gloss);
            return join(lines, "\n");
        }
        case PromptKind::rewrite_query:
            return get("query");
    }
    return "";
}

// ---------------------------------------------------------------------------
// Remote backend

RemoteLlmBackend::RemoteLlmBackend(RemoteOptions options) : options_(std::move(options)) {
    if (options_.endpoint.empty()) throw ConfigError("remote backend requires an endpoint");
}

std::string RemoteLlmBackend::complete(const LlmRequest& request, const std::string& prompt) {
    // split endpoint into base url and path
    std::string base = options_.endpoint;
    std::string path = "/";
    const auto scheme_end = base.find("://");
    if (scheme_end != std::string::npos) {
        const auto slash = base.find('/', scheme_end + 3);
        if (slash != std::string::npos) {
            path = base.substr(slash);
            base = base.substr(0, slash);
        }
    }

    json body;
    body["model"] = options_.model;
    body["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
    body["temperature"] = request.temperature;
    body["seed"] = request.seed;
    const std::string payload = body.dump();

    httplib::Client client(base);
    client.set_connection_timeout(static_cast<time_t>(options_.timeout_s),
                                  static_cast<time_t>(options_.timeout_s * 1e6) % 1000000);
    client.set_read_timeout(static_cast<time_t>(options_.timeout_s), 0);

    httplib::Headers headers;
    if (const char* token = std::getenv("EVDRANK_LLM_TOKEN"))
        headers.emplace("Authorization", std::string("Bearer ") + token);

    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
        if (attempt > 0) {
            const double delay = options_.backoff_initial_s * std::pow(2.0, attempt - 1);
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        auto res = client.Post(path, headers, payload, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw BackendUnavailable("backend returned status " + std::to_string(res->status));

        json parsed = json::parse(res->body, nullptr, false);
        if (parsed.is_discarded() || !parsed.contains("choices") || !parsed["choices"].is_array() ||
            parsed["choices"].empty() || !parsed["choices"][0].contains("message") ||
            !parsed["choices"][0]["message"].contains("content") ||
            !parsed["choices"][0]["message"]["content"].is_string())
            throw MalformedResponse("response body is not chat-completions shaped");
        return parsed["choices"][0]["message"]["content"].get<std::string>();
    }
    throw BackendUnavailable("backend unreachable after retries: " + last_error);
}

// ---------------------------------------------------------------------------
// Gateway

LlmGateway::LlmGateway(std::shared_ptr<LlmBackend> backend, std::optional<std::string> cache_dir)
    : backend_(std::move(backend)), cache_dir_(std::move(cache_dir)) {
    if (!backend_) throw ConfigError("gateway requires a backend");
}

namespace {

std::string cache_key_hex(const LlmRequest& request, const std::string& model) {
    char temp_repr[64];
    std::snprintf(temp_repr, sizeof(temp_repr), "%.17g", request.temperature);
    std::string canon = std::string("tmpl=") + to_string(request.template_name) +
                        "\nmodel=" + model + "\ntemp=" + temp_repr +
                        "\nseed=" + std::to_string(request.seed) + "\n";
    for (const auto& [k, v] : request.bindings) canon += "bind." + k + "=" + v + "\n";
    const std::uint64_t h1 = fnv1a64(canon);
    const std::uint64_t h2 = fnv1a64(canon, hash_mix(kFnvOffset, 0x5eedULL));
    char out[33];
    std::snprintf(out, sizeof(out), "%016llx%016llx", static_cast<unsigned long long>(h1),
                  static_cast<unsigned long long>(h2));
    return out;
}

}  // namespace

std::string LlmGateway::complete(const LlmRequest& request) {
    const std::string prompt = render_prompt(default_prompt_template(request.template_name),
                                             request.bindings);
    if (!cache_dir_) return backend_->complete(request, prompt);

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(*cache_dir_, ec);
    if (ec) throw IoFailure("cannot create cache directory: " + *cache_dir_);

    const fs::path entry = fs::path(*cache_dir_) / cache_key_hex(request, backend_->model_name());
    if (fs::exists(entry, ec) && fs::file_size(entry, ec) > 0) {
        std::ifstream in(entry, std::ios::binary);
        if (in) {
            std::ostringstream buf;
            buf << in.rdbuf();
            return buf.str();
        }
    }

    const std::string response = backend_->complete(request, prompt);
    std::ofstream out(entry, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot write cache entry: " + entry.string());
    out << response;
    return response;
}

std::vector<std::string> LlmGateway::extract_visual_entities(const std::string& caption,
                                                             std::uint64_t seed) {
    if (caption.empty()) throw Error("caption must be non-empty");
    LlmRequest req;
    req.template_name = PromptKind::extract_entities;
    req.bindings["caption"] = caption;
    req.seed = seed;
    const auto lines = parse_response_lines(complete(req));
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& line : lines) {
        const std::string ent = join(tokenize(line), " ");
        if (ent.empty()) continue;
        if (seen.insert(ent).second) out.push_back(ent);
    }
    return out;
}

std::vector<std::string> LlmGateway::generate_descriptions(const EntitySense& sense,
                                                           std::size_t h, std::uint64_t seed) {
    if (h < 1) throw Error("description count must be >= 1");
    LlmRequest req;
    req.template_name = PromptKind::describe_entity;
    req.bindings["entity"] = sense.entity;
    req.bindings["tag"] = sense.sense_tag ? " (" + *sense.sense_tag + ")" : "";
    req.bindings["count"] = std::to_string(h);
    req.seed = seed;
    if (sense.sense_tag) req.bindings["tag_name"] = *sense.sense_tag;

    // Mock descriptions are keyed by the bare tag, not the rendered suffix.
    std::string response;
    if (backend_->kind() == BackendKind::mock) {
        LlmRequest mock_req = req;
        mock_req.bindings["tag"] = sense.sense_tag.value_or("");
        response = complete(mock_req);
    } else {
        response = complete(req);
    }

    auto lines = parse_response_lines(response);
    std::set<std::string> distinct(lines.begin(), lines.end());
    if (lines.size() != h || distinct.size() != h)
        throw MalformedResponse("expected " + std::to_string(h) + " distinct descriptions, got " +
                                std::to_string(lines.size()));
    return lines;
}

std::vector<std::pair<std::string, std::string>> LlmGateway::resolve_ambiguity(
    const std::string& entity, std::uint64_t seed) {
    LlmRequest identify;
    identify.template_name = PromptKind::identify_ambiguous;
    identify.bindings["entity"] = entity;
    identify.seed = seed;
    const std::string verdict = to_lower_ascii(complete(identify));
    if (verdict.find("yes") == std::string::npos) return {};

    LlmRequest explain;
    explain.template_name = PromptKind::explain_senses;
    explain.bindings["entity"] = entity;
    explain.seed = seed;
    const auto lines = parse_response_lines(complete(explain));

    std::vector<std::pair<std::string, std::string>> senses;
    for (const auto& line : lines) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        std::string tag = line.substr(0, colon);
        std::string gloss = line.substr(colon + 1);
        const auto gb = gloss.find_first_not_of(' ');
        if (gb != std::string::npos) gloss = gloss.substr(gb);
        if (!tag.empty()) senses.emplace_back(std::move(tag), std::move(gloss));
    }
    if (senses.size() == 1)
        throw MalformedResponse("ambiguous entity '" + entity + "' needs >= 2 senses");
    return senses;
}

namespace {

std::vector<RewriteAction> sample_actions(const ActionSpace& space, Rng& rng) {
    std::vector<RewriteAction> actions;
    for (std::size_t t = 0; t < space.choices.size(); ++t) {
        const std::size_t id = rng.next_index(space.choices[t].size());
        actions.push_back(RewriteAction{t, space.choices[t][id]});
    }
    return actions;
}

std::optional<std::vector<RewriteAction>> parse_remote_actions(const std::string& line,
                                                               const ActionSpace& space) {
    std::map<std::size_t, RewriteChoice> per_slot;
    std::istringstream in(line);
    std::string field;
    std::size_t cur_slot = 0;
    bool have_slot = false;
    RewriteChoice cur;
    cur.skip = false;
    auto flush = [&]() {
        if (have_slot) per_slot[cur_slot] = cur;
        have_slot = false;
        cur = RewriteChoice{};
        cur.skip = false;
    };
    while (in >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) return std::nullopt;
        const std::string key = field.substr(0, eq);
        const std::string val = field.substr(eq + 1);
        try {
            if (key == "slot") {
                flush();
                cur_slot = std::stoul(val);
                have_slot = true;
            } else if (key == "desc") {
                cur.desc_index = std::stoul(val);
            } else if (key == "template") {
                const auto& names = space.grammar.templates;
                auto it = std::find(names.begin(), names.end(), val);
                if (it == names.end()) return std::nullopt;
                cur.template_index = static_cast<std::size_t>(it - names.begin());
            } else if (key == "sense") {
                if (val != "-") cur.sense_tag = val;
            }
        } catch (...) {
            return std::nullopt;
        }
    }
    flush();

    std::vector<RewriteAction> actions;
    for (std::size_t t = 0; t < space.slots.size(); ++t) {
        auto it = per_slot.find(t);
        RewriteAction a;
        a.slot = t;
        if (it != per_slot.end()) a.choice = it->second;
        // unspecified slots stay SKIP
        bool legal = false;
        for (const auto& c : space.choices[t])
            if (c == a.choice) {
                legal = true;
                break;
            }
        if (!legal) return std::nullopt;
        actions.push_back(std::move(a));
    }
    return actions;
}

}  // namespace

std::vector<RewriteCandidate> LlmGateway::generate_rewrite_candidates(
    const std::string& query, const std::vector<std::pair<EntityMatch, EvdEntry>>& matched,
    std::size_t k, std::uint64_t seed, const RewriteGrammar& grammar) {
    if (k < 1) throw Error("candidate count must be >= 1");
    const ActionSpace space = action_space_from_matches(matched, grammar);

    std::vector<RewriteCandidate> out;
    if (space.slots.empty()) {
        RewriteCandidate identity;
        identity.text = query;
        out.assign(k, identity);
        return out;
    }

    std::vector<std::vector<RewriteAction>> sequences;
    std::set<std::string> seen_sigs;
    auto sequence_key = [](const std::vector<RewriteAction>& actions) {
        std::string s;
        for (const auto& a : actions) {
            if (a.choice.skip)
                s += "s/";
            else
                s += "d" + std::to_string(a.choice.desc_index) + "t" +
                     std::to_string(a.choice.template_index) + "g" +
                     a.choice.sense_tag.value_or("-") + "/";
        }
        return s;
    };

    if (backend_->kind() == BackendKind::remote) {
        LlmRequest req;
        req.template_name = PromptKind::rewrite_query;
        req.bindings["query"] = query;
        std::string options;
        for (std::size_t t = 0; t < space.slots.size(); ++t) {
            const auto& slot = space.slots[t];
            options += "slot " + std::to_string(t) + ": " + slot.match.entity + "\n";
            for (const auto& entry : slot.senses) {
                options += "  sense " + entry.sense.sense_tag.value_or("-") + ":\n";
                for (std::size_t d = 0; d < std::min(grammar.h, entry.descriptions.size()); ++d)
                    options += "    desc " + std::to_string(d) + ": " + entry.descriptions[d] +
                               "\n";
            }
        }
        req.bindings["options"] = options;
        req.seed = seed;
        for (const auto& line : parse_response_lines(complete(req))) {
            if (sequences.size() >= k) break;
            if (auto actions = parse_remote_actions(line, space)) {
                if (seen_sigs.insert(sequence_key(*actions)).second)
                    sequences.push_back(std::move(*actions));
            }
        }
    }

    // Local seeded sampling: the whole mock path, and padding for a remote
    // response that came back short. Distinct sequences when the space allows.
    Rng rng(hash_mix(seed, fnv1a64(query)));
    std::size_t attempts = 0;
    const std::size_t max_attempts = 64 * k;
    while (sequences.size() < k) {
        auto actions = sample_actions(space, rng);
        if (seen_sigs.insert(sequence_key(actions)).second || ++attempts > max_attempts)
            sequences.push_back(std::move(actions));
    }

    for (auto& actions : sequences) {
        RewriteCandidate cand;
        cand.text = render_rewrite(query, space, actions);
        cand.actions = std::move(actions);
        out.push_back(std::move(cand));
    }
    return out;
}

}  // namespace evdrank

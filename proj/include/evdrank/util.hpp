#pragma once
// Deterministic low-level helpers shared by all modules: stable string
// hashing, a splittable RNG, and byte-offset tokenization. std::hash and the
// <random> distributions are avoided on purpose — outputs here feed cache
// keys, feature buckets, and checkpoints that must be reproducible run to run.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace evdrank {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : s) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combination
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Splitmix64 stream. Cheap to fork: child streams are keyed off the parent
// state so independent pipeline stages can draw without interfering.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform index in [0, n); n must be > 0
    std::size_t next_index(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // standard normal via Box-Muller (no <random> so draws are stable)
    double next_normal() {
        double u1 = next_unit();
        double u2 = next_unit();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    Rng fork(std::uint64_t key) const { return Rng(hash_mix(state_, key)); }

private:
    std::uint64_t state_;
};

inline std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
        return static_cast<char>(std::tolower(c));
    });
    return out;
}

struct TokenSpan {
    std::size_t begin = 0;  // byte offsets into the source string
    std::size_t end = 0;
    std::string lower;  // lowercased token text
};

// A token is a maximal run of alphanumeric bytes; bytes >= 0x80 are kept as
// word characters so UTF-8 text is not split mid-codepoint.
inline std::vector<TokenSpan> token_spans(std::string_view text) {
    std::vector<TokenSpan> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto is_word = [](unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; };
    while (i < n) {
        while (i < n && !is_word(static_cast<unsigned char>(text[i]))) ++i;
        if (i >= n) break;
        std::size_t start = i;
        while (i < n && is_word(static_cast<unsigned char>(text[i]))) ++i;
        TokenSpan s;
        s.begin = start;
        s.end = i;
        s.lower = to_lower_ascii(text.substr(start, i - start));
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    for (auto& s : token_spans(text)) out.push_back(std::move(s.lower));
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

}  // namespace evdrank

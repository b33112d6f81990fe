#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcc/common.hpp"
#include "rcc/rng.hpp"
#include "rcc/tokenizer.hpp"

namespace rcc {

// ---------------------------------------------------------------------------
// passkey retrieval samples
// ---------------------------------------------------------------------------

struct PasskeySpec {
    int key = 0;        // 5-digit
    int m_repeats = 0;  // filler before the key sentence
    int n_repeats = 0;  // filler after the key sentence

    void validate() const {
        if (key < 10000 || key > 99999)
            throw ParamError("passkey: key must be a 5-digit integer");
        if (m_repeats < 0 || n_repeats < 0)
            throw ParamError("passkey: repeat counts must be non-negative");
    }
};

inline const std::string& passkey_preamble() {
    static const std::string s =
        "There is an important info hidden inside a lot of irrelevant text. Find it and "
        "memorize them. I will quiz you about the important information there.";
    return s;
}

inline const std::string& passkey_filler() {
    static const std::string s =
        "The grass is green. The sky is blue. The sun is yellow. Here we go. There and "
        "back again.";
    return s;
}

inline const std::string& passkey_query() {
    static const std::string s = "What is the pass key? The pass key is";
    return s;
}

inline std::string gen_passkey_text(const PasskeySpec& spec) {
    spec.validate();
    const std::string key = std::to_string(spec.key);
    std::string out = passkey_preamble();
    for (int i = 0; i < spec.m_repeats; ++i) out += " " + passkey_filler();
    out += " The pass key is " + key + ". Remember it. " + key + " is the pass key.";
    for (int i = 0; i < spec.n_repeats; ++i) out += " " + passkey_filler();
    out += " " + passkey_query();
    return out;
}

struct PasskeySample {
    std::string text;
    int key = 0;
    int m = 0;
    int n = 0;
};

// Samples with the requested token length (to within one filler sentence),
// uniform keys, and the key position uniform given the length.
inline std::vector<PasskeySample> gen_passkey_dataset(int count, int target_length,
                                                      const Tokenizer& tok, Rng& rng) {
    if (count <= 0) throw ParamError("gen_passkey_dataset: count must be positive");
    const int base =
        static_cast<int>(tok.encode(gen_passkey_text({12345, 0, 0})).size());
    const int per = static_cast<int>(tok.encode(" " + passkey_filler()).size());
    int total = 0;
    if (target_length > base)
        total = static_cast<int>((target_length - base + per / 2) / per);
    const int achieved = base + total * per;
    if (std::abs(achieved - target_length) > per)
        throw ParamError("gen_passkey_dataset: target length " +
                         std::to_string(target_length) +
                         " not reachable (closest is " + std::to_string(achieved) + ")");
    std::vector<PasskeySample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        PasskeySample s;
        s.key = rng.uniform_int(10000, 99999);
        s.m = rng.uniform_int(0, total);
        s.n = total - s.m;
        s.text = gen_passkey_text({s.key, s.m, s.n});
        out.push_back(std::move(s));
    }
    return out;
}

// First window of five consecutive digits, if any.
inline std::optional<int> extract_first_5digit(const std::string& text) {
    int run = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] >= '0' && text[i] <= '9') {
            if (++run == 5) {
                const std::string digits = text.substr(i - 4, 5);
                return std::stoi(digits);
            }
        } else {
            run = 0;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// synthetic corpora
// ---------------------------------------------------------------------------

enum class CorpusKind { markov_chars, random_tokens, template_facts };

inline CorpusKind corpus_kind_from_string(const std::string& s) {
    if (s == "markov-chars") return CorpusKind::markov_chars;
    if (s == "random-tokens") return CorpusKind::random_tokens;
    if (s == "template-facts") return CorpusKind::template_facts;
    throw ParamError("unknown corpus kind \"" + s + "\"");
}

inline std::string to_string(CorpusKind k) {
    switch (k) {
        case CorpusKind::markov_chars: return "markov-chars";
        case CorpusKind::random_tokens: return "random-tokens";
        default: return "template-facts";
    }
}

namespace detail {

inline const std::string& markov_alphabet() {
    static const std::string a = "abcdefghijklmnopqrstuvwxyz ";
    return a;
}

// Seeded order-2 character chain: each (c1, c2) context allows a handful of
// successors with random weights.
inline std::string markov_chars_text(std::size_t n_chars, Rng& rng) {
    const std::string& alpha = markov_alphabet();
    const int a = static_cast<int>(alpha.size());
    const int branch = 4;
    std::vector<std::array<int, 4>> succ(static_cast<std::size_t>(a) * a);
    std::vector<std::array<double, 4>> cumw(static_cast<std::size_t>(a) * a);
    for (int c = 0; c < a * a; ++c) {
        double acc = 0.0;
        for (int b = 0; b < branch; ++b) {
            succ[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)] =
                rng.uniform_int(0, a - 1);
            const double w = rng.uniform01() + 0.05;
            acc += w * w;
            cumw[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)] = acc;
        }
    }
    std::string text;
    text.reserve(n_chars);
    int c1 = rng.uniform_int(0, a - 1), c2 = rng.uniform_int(0, a - 1);
    for (std::size_t i = 0; i < n_chars; ++i) {
        const int ctx = c1 * a + c2;
        const double total = cumw[static_cast<std::size_t>(ctx)][branch - 1];
        const double u = rng.uniform01() * total;
        int pick = 0;
        while (pick + 1 < branch &&
               u > cumw[static_cast<std::size_t>(ctx)][static_cast<std::size_t>(pick)])
            ++pick;
        const int nxt = succ[static_cast<std::size_t>(ctx)][static_cast<std::size_t>(pick)];
        text.push_back(alpha[static_cast<std::size_t>(nxt)]);
        c1 = c2;
        c2 = nxt;
    }
    return text;
}

inline const std::vector<std::string>& fact_attributes() {
    static const std::vector<std::string> v = {"color", "size", "flavor", "owner"};
    return v;
}

inline const std::vector<std::vector<std::string>>& fact_values() {
    static const std::vector<std::vector<std::string>> v = {
        {"red", "blue", "green", "yellow", "purple", "orange", "black", "white", "pink",
         "brown", "gray", "cyan"},
        {"tiny", "small", "big", "huge", "giant", "little", "narrow", "wide", "short",
         "tall", "long", "round"},
        {"sweet", "sour", "bitter", "salty", "spicy", "mild", "fresh", "smoky", "fruity",
         "nutty", "creamy", "sharp"},
        {"anna", "bob", "carl", "dana", "eric", "fred", "gina", "hugo", "iris", "jack",
         "kate", "liam"}};
    return v;
}

inline std::string random_entity_name(Rng& rng) {
    static const std::vector<std::string> syllables = {
        "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki",
        "ko", "ku", "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na",
        "ne", "ni", "no", "nu", "pa", "pe", "pi", "po", "pu", "ra", "re", "ri", "ro",
        "ru", "sa", "se", "si", "so", "su", "ta", "te", "ti", "to", "tu"};
    std::string name;
    const int parts = 2 + static_cast<int>(rng.uniform_u64(2));
    for (int i = 0; i < parts; ++i)
        name += syllables[rng.uniform_u64(syllables.size())];
    return name;
}

inline std::string fact_sentence(const std::string& entity, int attr_idx,
                                 const std::string& value) {
    return "The " + fact_attributes()[static_cast<std::size_t>(attr_idx)] + " of the " +
           entity + " is " + value + ".";
}

}  // namespace detail

// One contiguous token stream of exactly the requested length.
inline TokenSeq build_synthetic_corpus(CorpusKind kind, std::size_t size,
                                       const Tokenizer& tok, std::uint64_t seed) {
    if (size == 0) throw ParamError("build_synthetic_corpus: size must be positive");
    Rng rng(derive_seed(seed, "corpus", static_cast<std::uint64_t>(kind)));
    TokenSeq out;
    out.reserve(size);
    switch (kind) {
        case CorpusKind::markov_chars: {
            const std::string text = detail::markov_chars_text(size, rng);
            out = tok.encode(text);
            break;
        }
        case CorpusKind::random_tokens: {
            for (std::size_t i = 0; i < size; ++i)
                out.push_back(static_cast<TokenId>(
                    rng.uniform_u64(static_cast<std::uint64_t>(tok.content_size()))));
            break;
        }
        case CorpusKind::template_facts: {
            std::string text;
            while (text.size() < size) {
                const int attr = rng.uniform_int(
                    0, static_cast<int>(detail::fact_attributes().size()) - 1);
                const auto& values = detail::fact_values()[static_cast<std::size_t>(attr)];
                text += detail::fact_sentence(detail::random_entity_name(rng), attr,
                                              values[rng.uniform_u64(values.size())]) +
                        " ";
            }
            out = tok.encode(text);
            break;
        }
    }
    out.resize(size);
    return out;
}

// ---------------------------------------------------------------------------
// template-facts QA items
// ---------------------------------------------------------------------------

struct QaItem {
    std::string context;
    std::string instruction;
    std::string answer;
};

// Contexts of distinct (entity, attribute) facts; the question targets one of
// them, so answering requires reading the context.
inline std::vector<QaItem> gen_qa_dataset(int count, int facts_per_context, Rng& rng) {
    if (count <= 0 || facts_per_context <= 0)
        throw ParamError("gen_qa_dataset: counts must be positive");
    std::vector<QaItem> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        std::vector<std::string> entities;
        std::vector<int> attrs;
        std::vector<std::string> values;
        std::string context;
        for (int f = 0; f < facts_per_context; ++f) {
            std::string entity = detail::random_entity_name(rng);
            const int attr =
                rng.uniform_int(0, static_cast<int>(detail::fact_attributes().size()) - 1);
            const auto& vals = detail::fact_values()[static_cast<std::size_t>(attr)];
            const std::string value = vals[rng.uniform_u64(vals.size())];
            if (f) context += " ";
            context += detail::fact_sentence(entity, attr, value);
            entities.push_back(std::move(entity));
            attrs.push_back(attr);
            values.push_back(value);
        }
        const int pick = rng.uniform_int(0, facts_per_context - 1);
        QaItem item;
        item.context = std::move(context);
        item.instruction = "What is the " +
                           detail::fact_attributes()[static_cast<std::size_t>(
                               attrs[static_cast<std::size_t>(pick)])] +
                           " of the " + entities[static_cast<std::size_t>(pick)] + "?";
        item.answer = values[static_cast<std::size_t>(pick)];
        out.push_back(std::move(item));
    }
    return out;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

// Raw little-endian 32-bit token ids plus a JSON sidecar at <path>.json.
inline void save_corpus(const std::string& path, const TokenSeq& tokens,
                        const nlohmann::json& meta) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write corpus: " + path);
    out.write(reinterpret_cast<const char*>(tokens.data()),
              static_cast<std::streamsize>(tokens.size() * sizeof(TokenId)));
    if (!out) throw IoError("corpus write failed: " + path);
    std::ofstream side(path + ".json", std::ios::trunc);
    if (!side) throw IoError("cannot write corpus sidecar: " + path + ".json");
    side << meta.dump(2) << '\n';
}

inline TokenSeq load_corpus(const std::string& path, nlohmann::json* meta_out = nullptr) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open corpus: " + path);
    const std::streamsize bytes = in.tellg();
    if (bytes % static_cast<std::streamsize>(sizeof(TokenId)) != 0)
        throw IoError("corpus file size is not a multiple of 4: " + path);
    in.seekg(0);
    TokenSeq tokens(static_cast<std::size_t>(bytes) / sizeof(TokenId));
    in.read(reinterpret_cast<char*>(tokens.data()), bytes);
    if (!in) throw IoError("corpus read failed: " + path);
    if (meta_out) {
        std::ifstream side(path + ".json");
        if (side) {
            try {
                side >> *meta_out;
            } catch (const nlohmann::json::exception& e) {
                throw IoError("corpus sidecar is not valid JSON: " + std::string(e.what()));
            }
        }
    }
    return tokens;
}

inline void save_passkey_jsonl(const std::string& path,
                               const std::vector<PasskeySample>& samples) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write dataset: " + path);
    for (const auto& s : samples)
        out << nlohmann::json{{"text", s.text}, {"key", s.key}, {"m", s.m}, {"n", s.n}}
                   .dump()
            << '\n';
}

inline std::vector<PasskeySample> load_passkey_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::vector<PasskeySample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out.push_back(PasskeySample{j.at("text").get<std::string>(),
                                    j.at("key").get<int>(), j.at("m").get<int>(),
                                    j.at("n").get<int>()});
    }
    return out;
}

inline void save_qa_jsonl(const std::string& path, const std::vector<QaItem>& items) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write dataset: " + path);
    for (const auto& q : items)
        out << nlohmann::json{{"context", q.context},
                              {"instruction", q.instruction},
                              {"answer", q.answer}}
                   .dump()
            << '\n';
}

inline std::vector<QaItem> load_qa_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::vector<QaItem> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out.push_back(QaItem{j.at("context").get<std::string>(),
                             j.at("instruction").get<std::string>(),
                             j.at("answer").get<std::string>()});
    }
    return out;
}

}  // namespace rcc

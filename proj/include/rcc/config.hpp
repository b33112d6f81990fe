#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "rcc/common.hpp"

namespace rcc {

enum class PositionalScheme { rotary, learned };

inline std::string to_string(PositionalScheme s) {
    return s == PositionalScheme::rotary ? "rotary" : "learned";
}

inline PositionalScheme positional_scheme_from_string(const std::string& s) {
    if (s == "rotary") return PositionalScheme::rotary;
    if (s == "learned") return PositionalScheme::learned;
    throw ConfigError("positional_scheme must be \"rotary\" or \"learned\", got \"" + s +
                      "\"");
}

// All architecture hyperparameters of an encoder-decoder compression model.
struct ModelConfig {
    int vocab_size = 258;
    int d_model = 128;
    int n_heads = 4;
    int n_enc_layers = 4;
    int n_dec_layers = 4;
    int encoder_window = 256;    // W, tokens per encoder segment
    int compression_rate = 8;    // r, tokens summarized per compressed vector
    int decoder_budget = 128;    // max uncompressed decoder input, tokens
    int max_segments = 8;
    int decoder_capacity = 512;  // total decoder positions (compressed + tokens)
    PositionalScheme positional_scheme = PositionalScheme::rotary;
    // Whether the embedding output counts as compressed level 0 in addition to
    // the per-block outputs.
    bool include_embedding_level = true;
    int mlp_ratio = 4;

    int vectors_per_segment() const { return encoder_window / compression_rate; }
    int n_levels() const { return n_enc_layers + (include_embedding_level ? 1 : 0); }
    int max_context_tokens() const { return max_segments * encoder_window; }

    void validate() const {
        auto positive = [](int v, const char* field) {
            if (v <= 0) throw ConfigError(std::string("model config: ") + field +
                                          " must be positive");
        };
        positive(vocab_size, "vocab_size");
        positive(d_model, "d_model");
        positive(n_heads, "n_heads");
        positive(n_enc_layers, "n_enc_layers");
        positive(n_dec_layers, "n_dec_layers");
        positive(encoder_window, "encoder_window");
        positive(compression_rate, "compression_rate");
        positive(decoder_budget, "decoder_budget");
        positive(max_segments, "max_segments");
        positive(decoder_capacity, "decoder_capacity");
        positive(mlp_ratio, "mlp_ratio");
        if (encoder_window % compression_rate != 0)
            throw ConfigError(
                "model config: encoder_window must be a multiple of compression_rate");
        if (d_model % n_heads != 0)
            throw ConfigError("model config: d_model must be a multiple of n_heads");
        if ((d_model / n_heads) % 2 != 0)
            throw ConfigError("model config: head width must be even");
        if (decoder_budget + max_segments * vectors_per_segment() > decoder_capacity)
            throw ConfigError(
                "model config: decoder_budget + max_segments * (W/r) exceeds "
                "decoder_capacity");
    }
};

namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
    }
}

template <class V>
V get_or(const nlohmann::json& j, const std::string& key, V fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("invalid value for \"" + key + "\"");
    }
}
}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"d_model", c.d_model},
                          {"n_heads", c.n_heads},
                          {"n_enc_layers", c.n_enc_layers},
                          {"n_dec_layers", c.n_dec_layers},
                          {"encoder_window", c.encoder_window},
                          {"compression_rate", c.compression_rate},
                          {"decoder_budget", c.decoder_budget},
                          {"max_segments", c.max_segments},
                          {"decoder_capacity", c.decoder_capacity},
                          {"positional_scheme", to_string(c.positional_scheme)},
                          {"include_embedding_level", c.include_embedding_level},
                          {"mlp_ratio", c.mlp_ratio}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j,
        {"vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers",
         "encoder_window", "compression_rate", "decoder_budget", "max_segments",
         "decoder_capacity", "positional_scheme", "include_embedding_level", "mlp_ratio"},
        "model config");
    ModelConfig c;
    c.vocab_size = detail::get_or(j, "vocab_size", c.vocab_size);
    c.d_model = detail::get_or(j, "d_model", c.d_model);
    c.n_heads = detail::get_or(j, "n_heads", c.n_heads);
    c.n_enc_layers = detail::get_or(j, "n_enc_layers", c.n_enc_layers);
    c.n_dec_layers = detail::get_or(j, "n_dec_layers", c.n_dec_layers);
    c.encoder_window = detail::get_or(j, "encoder_window", c.encoder_window);
    c.compression_rate = detail::get_or(j, "compression_rate", c.compression_rate);
    c.decoder_budget = detail::get_or(j, "decoder_budget", c.decoder_budget);
    c.max_segments = detail::get_or(j, "max_segments", c.max_segments);
    c.decoder_capacity = detail::get_or(j, "decoder_capacity", c.decoder_capacity);
    if (j.contains("positional_scheme"))
        c.positional_scheme =
            positional_scheme_from_string(j.at("positional_scheme").get<std::string>());
    c.include_embedding_level =
        detail::get_or(j, "include_embedding_level", c.include_embedding_level);
    c.mlp_ratio = detail::get_or(j, "mlp_ratio", c.mlp_ratio);
    c.validate();
    return c;
}

}  // namespace rcc

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "rcc/model.hpp"

namespace rcc {

// Analytic inference-memory model: bytes a plain causal decoder must hold in
// its KV-cache for a context of seq_len tokens versus what the compressing
// encoder-decoder holds (compressed state, one transient encoder segment, and
// the decoder KV over compressed slots plus a decode tail). Parameter bytes
// are reported separately per side.
struct MemoryReport {
    std::int64_t seq_len = 0;
    std::int64_t baseline_bytes = 0;  // = baseline_kv
    std::int64_t rcc_bytes = 0;       // = compressed_state + encoder_transient + decoder_kv
    std::int64_t baseline_kv = 0;
    std::int64_t rcc_compressed_state = 0;
    std::int64_t rcc_encoder_transient = 0;
    std::int64_t rcc_decoder_kv = 0;
    std::int64_t baseline_params_bytes = 0;
    std::int64_t rcc_params_bytes = 0;

    std::int64_t baseline_total_with_params() const {
        return baseline_bytes + baseline_params_bytes;
    }
    std::int64_t rcc_total_with_params() const { return rcc_bytes + rcc_params_bytes; }
};

inline std::int64_t n_compressed_for_length(const ModelConfig& cfg, std::int64_t seq_len) {
    const std::int64_t w = cfg.encoder_window, r = cfg.compression_rate;
    const std::int64_t full = seq_len / w;
    const std::int64_t tail = seq_len % w;
    return full * (w / r) + (tail + r - 1) / r;
}

inline std::int64_t decoder_param_count(const ModelConfig& cfg) {
    std::int64_t n = 0;
    for_each_param_spec(cfg, [&n](const std::string& name, const std::vector<int>& shape) {
        if (name.rfind("decoder.", 0) != 0) return;
        std::int64_t c = 1;
        for (int v : shape) c *= v;
        n += c;
    });
    return n;
}

inline MemoryReport memory_report(const ModelConfig& cfg, std::int64_t seq_len,
                                  int bytes_per_elem, std::int64_t decoder_tail) {
    if (seq_len < 0) throw ParamError("memory_report: seq_len must be >= 0");
    if (bytes_per_elem <= 0) throw ParamError("memory_report: bytes_per_elem must be positive");
    if (decoder_tail < 0) throw ParamError("memory_report: decoder_tail must be >= 0");
    const std::int64_t d = cfg.d_model;
    const std::int64_t bytes = bytes_per_elem;
    MemoryReport r;
    r.seq_len = seq_len;
    const std::int64_t nc = n_compressed_for_length(cfg, seq_len);
    r.baseline_kv = 2 * cfg.n_dec_layers * d * seq_len * bytes;
    r.rcc_compressed_state = static_cast<std::int64_t>(cfg.n_levels()) * nc * d * bytes;
    r.rcc_encoder_transient = 2 * cfg.n_enc_layers * d *
                              std::min<std::int64_t>(seq_len, cfg.encoder_window) * bytes;
    r.rcc_decoder_kv = 2 * cfg.n_dec_layers * d * (nc + decoder_tail) * bytes;
    r.baseline_bytes = r.baseline_kv;
    r.rcc_bytes = r.rcc_compressed_state + r.rcc_encoder_transient + r.rcc_decoder_kv;
    r.baseline_params_bytes = decoder_param_count(cfg) * bytes;
    r.rcc_params_bytes = param_count(cfg) * bytes;
    return r;
}

// Per-token growth of each side, in bytes.
inline double baseline_slope(const ModelConfig& cfg, int bytes_per_elem) {
    return 2.0 * cfg.n_dec_layers * cfg.d_model * bytes_per_elem;
}

inline double rcc_slope(const ModelConfig& cfg, int bytes_per_elem) {
    return (static_cast<double>(cfg.n_levels()) + 2.0 * cfg.n_dec_layers) * cfg.d_model *
           bytes_per_elem / cfg.compression_rate;
}

// Smallest scanned length at which the compressing side, parameters included,
// drops below the baseline.
inline std::optional<std::int64_t> memory_crossover(const ModelConfig& cfg,
                                                    int bytes_per_elem,
                                                    std::int64_t decoder_tail,
                                                    std::int64_t max_len,
                                                    std::int64_t step = 256) {
    for (std::int64_t len = step; len <= max_len; len += step) {
        const MemoryReport r = memory_report(cfg, len, bytes_per_elem, decoder_tail);
        if (r.rcc_total_with_params() < r.baseline_total_with_params()) return len;
    }
    return std::nullopt;
}

inline nlohmann::json to_json(const MemoryReport& r) {
    return nlohmann::json{{"seq_len", r.seq_len},
                          {"baseline_bytes", r.baseline_bytes},
                          {"rcc_bytes", r.rcc_bytes},
                          {"breakdown",
                           {{"baseline_kv", r.baseline_kv},
                            {"rcc_compressed_state", r.rcc_compressed_state},
                            {"rcc_encoder_transient", r.rcc_encoder_transient},
                            {"rcc_decoder_kv", r.rcc_decoder_kv}}},
                          {"baseline_params_bytes", r.baseline_params_bytes},
                          {"rcc_params_bytes", r.rcc_params_bytes}};
}

}  // namespace rcc

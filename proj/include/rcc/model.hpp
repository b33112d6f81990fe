#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rcc/config.hpp"
#include "rcc/ops.hpp"
#include "rcc/rng.hpp"
#include "rcc/tensor.hpp"

namespace rcc {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kRopeBase = 10000.0;

// ---------------------------------------------------------------------------
// parameter inventory
// ---------------------------------------------------------------------------

// Single source of truth for the model's parameter set; the builder, the
// checkpoint format and the analytic memory model all walk this list.
inline void for_each_param_spec(
    const ModelConfig& cfg,
    const std::function<void(const std::string&, const std::vector<int>&)>& fn) {
    const int d = cfg.d_model;
    const int md = cfg.mlp_ratio * d;
    auto block = [&](const std::string& prefix) {
        fn(prefix + ".ln1.gain", {d});
        fn(prefix + ".ln1.bias", {d});
        fn(prefix + ".attn.wq", {d, d});
        fn(prefix + ".attn.bq", {d});
        fn(prefix + ".attn.wk", {d, d});
        fn(prefix + ".attn.bk", {d});
        fn(prefix + ".attn.wv", {d, d});
        fn(prefix + ".attn.bv", {d});
        fn(prefix + ".attn.wo", {d, d});
        fn(prefix + ".attn.bo", {d});
        fn(prefix + ".ln2.gain", {d});
        fn(prefix + ".ln2.bias", {d});
        fn(prefix + ".mlp.w1", {d, md});
        fn(prefix + ".mlp.b1", {md});
        fn(prefix + ".mlp.w2", {md, d});
        fn(prefix + ".mlp.b2", {d});
    };
    fn("encoder.embed", {cfg.vocab_size, d});
    if (cfg.positional_scheme == PositionalScheme::learned)
        fn("encoder.pos_table", {cfg.encoder_window, d});
    for (int i = 0; i < cfg.n_enc_layers; ++i) block("encoder.block." + std::to_string(i));
    fn("decoder.embed", {cfg.vocab_size, d});
    if (cfg.positional_scheme == PositionalScheme::learned)
        fn("decoder.pos_table", {cfg.decoder_capacity, d});
    for (int i = 0; i < cfg.n_dec_layers; ++i) block("decoder.block." + std::to_string(i));
    fn("decoder.ln_f.gain", {d});
    fn("decoder.ln_f.bias", {d});
    fn("decoder.head.w", {d, cfg.vocab_size});
    fn("decoder.head.b", {cfg.vocab_size});
    for (int s = 0; s <= cfg.n_dec_layers; ++s) {
        fn("inject." + std::to_string(s) + ".w", {d, d});
        fn("inject." + std::to_string(s) + ".b", {d});
    }
}

inline std::int64_t param_count(const ModelConfig& cfg) {
    std::int64_t n = 0;
    for_each_param_spec(cfg, [&n](const std::string&, const std::vector<int>& shape) {
        std::int64_t c = 1;
        for (int v : shape) c *= v;
        n += c;
    });
    return n;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <class T>
struct BlockParams {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct RccModel {
    ModelConfig cfg;
    std::vector<Parameter<T>> params;  // canonical order, unique names

    // Structured handles sharing storage with params.
    Tensor<T> enc_embed, dec_embed;
    Tensor<T> enc_pos, dec_pos;  // learned scheme only
    std::vector<BlockParams<T>> enc_blocks, dec_blocks;
    Tensor<T> lnf_gain, lnf_bias, head_w, head_b;
    std::vector<Tensor<T>> inject_w, inject_b;  // slot 0..n_dec_layers

    Parameter<T>* find(const std::string& name) {
        for (auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }

    void set_encoder_trainable(bool trainable) {
        for (auto& p : params)
            if (p.name.rfind("encoder.", 0) == 0) p.set_trainable(trainable);
    }

    // FNV-1a over the raw bytes of every encoder parameter.
    std::uint64_t encoder_hash() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& p : params) {
            if (p.name.rfind("encoder.", 0) != 0) continue;
            const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor.data());
            const std::size_t nb = static_cast<std::size_t>(p.tensor.numel()) * sizeof(T);
            for (std::size_t i = 0; i < nb; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        }
        return h;
    }
};

template <class T>
RccModel<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RccModel<T> m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, "init"));

    const T base_std = static_cast<T>(0.02);
    auto init_std = [&](const std::string& name) -> T {
        const bool enc = name.rfind("encoder.", 0) == 0;
        const int layers = enc ? cfg.n_enc_layers : cfg.n_dec_layers;
        const T residual_scale =
            static_cast<T>(1.0 / std::sqrt(2.0 * static_cast<double>(layers)));
        if (name.find(".attn.wo") != std::string::npos ||
            name.find(".mlp.w2") != std::string::npos)
            return base_std * residual_scale;
        return base_std;
    };

    for_each_param_spec(cfg, [&](const std::string& name, const std::vector<int>& shape) {
        Tensor<T> t = Tensor<T>::zeros(shape, /*requires_grad=*/true);
        const bool is_weight = name.ends_with(".embed") || name.ends_with(".pos_table") ||
                               name.ends_with(".wq") || name.ends_with(".wk") ||
                               name.ends_with(".wv") || name.ends_with(".wo") ||
                               name.ends_with(".w1") || name.ends_with(".w2") ||
                               name.ends_with(".w");
        if (name.ends_with(".gain")) {
            t.fill(T(1));
        } else if (is_weight) {
            t.fill_normal(rng, init_std(name));
        }  // biases stay zero
        m.params.push_back(Parameter<T>{name, t, true});
    });

    auto grab = [&m](const std::string& name) {
        Parameter<T>* p = m.find(name);
        if (!p) throw Error("internal: parameter " + name + " missing");
        return p->tensor;
    };
    auto grab_block = [&](const std::string& prefix) {
        BlockParams<T> b;
        b.ln1_gain = grab(prefix + ".ln1.gain");
        b.ln1_bias = grab(prefix + ".ln1.bias");
        b.wq = grab(prefix + ".attn.wq");
        b.bq = grab(prefix + ".attn.bq");
        b.wk = grab(prefix + ".attn.wk");
        b.bk = grab(prefix + ".attn.bk");
        b.wv = grab(prefix + ".attn.wv");
        b.bv = grab(prefix + ".attn.bv");
        b.wo = grab(prefix + ".attn.wo");
        b.bo = grab(prefix + ".attn.bo");
        b.ln2_gain = grab(prefix + ".ln2.gain");
        b.ln2_bias = grab(prefix + ".ln2.bias");
        b.w1 = grab(prefix + ".mlp.w1");
        b.b1 = grab(prefix + ".mlp.b1");
        b.w2 = grab(prefix + ".mlp.w2");
        b.b2 = grab(prefix + ".mlp.b2");
        return b;
    };

    m.enc_embed = grab("encoder.embed");
    m.dec_embed = grab("decoder.embed");
    if (cfg.positional_scheme == PositionalScheme::learned) {
        m.enc_pos = grab("encoder.pos_table");
        m.dec_pos = grab("decoder.pos_table");
    }
    for (int i = 0; i < cfg.n_enc_layers; ++i)
        m.enc_blocks.push_back(grab_block("encoder.block." + std::to_string(i)));
    for (int i = 0; i < cfg.n_dec_layers; ++i)
        m.dec_blocks.push_back(grab_block("decoder.block." + std::to_string(i)));
    m.lnf_gain = grab("decoder.ln_f.gain");
    m.lnf_bias = grab("decoder.ln_f.bias");
    m.head_w = grab("decoder.head.w");
    m.head_b = grab("decoder.head.b");
    for (int s = 0; s <= cfg.n_dec_layers; ++s) {
        m.inject_w.push_back(grab("inject." + std::to_string(s) + ".w"));
        m.inject_b.push_back(grab("inject." + std::to_string(s) + ".b"));
    }
    return m;
}

// Pre-norm transformer block over an already position-encoded (learned) or
// to-be-rotated (rotary) sequence.
template <class T>
Tensor<T> block_forward(const BlockParams<T>& b, const Tensor<T>& x,
                        const Tensor<T>& mask, const std::vector<int>& positions,
                        int n_heads, PositionalScheme scheme) {
    const T eps = static_cast<T>(kLayerNormEps);
    Tensor<T> h = layernorm(x, b.ln1_gain, b.ln1_bias, eps);
    Tensor<T> q = add_bias(matmul(h, b.wq), b.bq);
    Tensor<T> k = add_bias(matmul(h, b.wk), b.bk);
    Tensor<T> v = add_bias(matmul(h, b.wv), b.bv);
    if (scheme == PositionalScheme::rotary) {
        q = rope(q, positions, n_heads, kRopeBase);
        k = rope(k, positions, n_heads, kRopeBase);
    }
    Tensor<T> a = attention(q, k, v, mask, n_heads);
    Tensor<T> x1 = add(x, add_bias(matmul(a, b.wo), b.bo));
    Tensor<T> g = layernorm(x1, b.ln2_gain, b.ln2_bias, eps);
    g = add_bias(matmul(g, b.w1), b.b1);
    g = gelu(g);
    g = add_bias(matmul(g, b.w2), b.b2);
    return add(x1, g);
}

// ---------------------------------------------------------------------------
// encoder / compression
// ---------------------------------------------------------------------------

inline std::vector<TokenSeq> segment_sequence(const TokenSeq& tokens, int window) {
    if (window <= 0) throw ParamError("segment_sequence: window must be positive");
    std::vector<TokenSeq> out;
    for (std::size_t i = 0; i < tokens.size(); i += static_cast<std::size_t>(window)) {
        const std::size_t end = std::min(tokens.size(), i + static_cast<std::size_t>(window));
        out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                         tokens.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

// 0-based row indices of the compressed positions for a segment of the given
// length: the last token of every full block of r, plus the final row of a
// trailing partial block.
inline std::vector<int> compressed_row_indices(int length, int rate) {
    if (rate < 1) throw ParamError("compressed_row_indices: rate must be >= 1");
    std::vector<int> idx;
    for (int p = rate - 1; p < length; p += rate) idx.push_back(p);
    if (length % rate != 0) idx.push_back(length - 1);
    return idx;
}

// All hidden-state levels of one encoder segment: the embedding output plus
// every block output, each [len, d_model]. Attention is causal within the
// segment; nothing crosses segments.
template <class T>
std::vector<Tensor<T>> encode_segment(const RccModel<T>& m, const TokenSeq& segment) {
    if (static_cast<int>(segment.size()) > m.cfg.encoder_window)
        throw CapacityError("encode_segment: segment of " +
                            std::to_string(segment.size()) +
                            " tokens exceeds encoder window of " +
                            std::to_string(m.cfg.encoder_window));
    const int len = static_cast<int>(segment.size());
    std::vector<int> positions(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;

    Tensor<T> x = embedding(m.enc_embed, segment);
    if (m.cfg.positional_scheme == PositionalScheme::learned)
        x = add(x, gather_rows(m.enc_pos, positions));

    std::vector<Tensor<T>> levels;
    levels.reserve(static_cast<std::size_t>(m.cfg.n_enc_layers) + 1);
    levels.push_back(x);
    Tensor<T> mask = causal_mask<T>(len);
    for (const auto& b : m.enc_blocks) {
        x = block_forward(b, x, mask, positions, m.cfg.n_heads, m.cfg.positional_scheme);
        levels.push_back(x);
    }
    return levels;
}

template <class T>
std::vector<Tensor<T>> extract_compressed(const std::vector<Tensor<T>>& levels, int rate) {
    std::vector<Tensor<T>> out;
    out.reserve(levels.size());
    for (const auto& lvl : levels)
        out.push_back(gather_rows(lvl, compressed_row_indices(lvl.rows(), rate)));
    return out;
}

// Per-level stride-sampled hidden vectors over all segments of a context.
template <class T>
struct CompressedState {
    std::vector<Tensor<T>> levels;  // n_levels x [n_compressed, d_model]
    int n_compressed = 0;
    int source_length = 0;

    static CompressedState empty(const ModelConfig& cfg) {
        CompressedState s;
        s.levels.assign(static_cast<std::size_t>(cfg.n_levels()),
                        Tensor<T>::zeros({0, cfg.d_model}));
        return s;
    }
};

template <class T>
CompressedState<T> compress_context(const RccModel<T>& m, const TokenSeq& tokens) {
    const ModelConfig& cfg = m.cfg;
    if (static_cast<int>(tokens.size()) > cfg.max_context_tokens())
        throw CapacityError("compress_context: input of " + std::to_string(tokens.size()) +
                            " tokens exceeds the maximum supported context of " +
                            std::to_string(cfg.max_context_tokens()) +
                            " tokens (max_segments * encoder_window)");
    if (tokens.empty()) return CompressedState<T>::empty(cfg);

    const int level_offset = cfg.include_embedding_level ? 0 : 1;
    std::vector<std::vector<Tensor<T>>> per_level(static_cast<std::size_t>(cfg.n_levels()));
    int n_compressed = 0;
    for (const TokenSeq& seg : segment_sequence(tokens, cfg.encoder_window)) {
        std::vector<Tensor<T>> levels = encode_segment(m, seg);
        std::vector<Tensor<T>> comp = extract_compressed(levels, cfg.compression_rate);
        n_compressed += comp.front().rows();
        for (int l = 0; l < cfg.n_levels(); ++l)
            per_level[static_cast<std::size_t>(l)].push_back(
                comp[static_cast<std::size_t>(l + level_offset)]);
    }
    CompressedState<T> state;
    state.n_compressed = n_compressed;
    state.source_length = static_cast<int>(tokens.size());
    state.levels.reserve(per_level.size());
    for (auto& parts : per_level)
        state.levels.push_back(parts.size() == 1 ? parts.front() : concat_rows(parts));
    return state;
}

// ---------------------------------------------------------------------------
// layer mapping
// ---------------------------------------------------------------------------

enum class LayerMapMode { identity, duplicate, average };

// Which encoder levels feed each decoder injection slot. Slot 0 is the
// input concatenation; slots 1..n_dec follow the blocks.
struct LayerMap {
    LayerMapMode mode = LayerMapMode::identity;
    std::vector<std::vector<int>> assignment;  // per slot, source level indices
};

inline LayerMap build_layer_map(int n_sources, int n_slots) {
    if (n_sources < 1 || n_slots < 1)
        throw ParamError("build_layer_map: counts must be >= 1");
    LayerMap map;
    map.assignment.resize(static_cast<std::size_t>(n_slots));
    if (n_sources == n_slots) {
        map.mode = LayerMapMode::identity;
        for (int j = 0; j < n_slots; ++j) map.assignment[static_cast<std::size_t>(j)] = {j};
    } else if (n_sources < n_slots) {
        map.mode = LayerMapMode::duplicate;
        for (int j = 0; j < n_slots; ++j)
            map.assignment[static_cast<std::size_t>(j)] = {
                static_cast<int>((static_cast<std::int64_t>(j) * n_sources) / n_slots)};
    } else {
        map.mode = LayerMapMode::average;
        for (int j = 0; j < n_slots; ++j) {
            const int lo = static_cast<int>((static_cast<std::int64_t>(j) * n_sources) / n_slots);
            const int hi =
                static_cast<int>((static_cast<std::int64_t>(j + 1) * n_sources) / n_slots);
            for (int s = lo; s < hi; ++s)
                map.assignment[static_cast<std::size_t>(j)].push_back(s);
        }
    }
    return map;
}

// ---------------------------------------------------------------------------
// decoder
// ---------------------------------------------------------------------------

namespace detail {

// Mapped level for one slot: a single source, or the mean of a group.
template <class T>
Tensor<T> mapped_level(const CompressedState<T>& state, const std::vector<int>& sources) {
    Tensor<T> acc = state.levels[static_cast<std::size_t>(sources.front())];
    for (std::size_t i = 1; i < sources.size(); ++i)
        acc = add(acc, state.levels[static_cast<std::size_t>(sources[i])]);
    if (sources.size() > 1)
        acc = scale(acc, static_cast<T>(1.0 / static_cast<double>(sources.size())));
    return acc;
}

template <class T>
std::vector<Tensor<T>> slot_projections(const RccModel<T>& m,
                                        const CompressedState<T>& state) {
    const LayerMap map = build_layer_map(m.cfg.n_levels(), m.cfg.n_dec_layers + 1);
    std::vector<Tensor<T>> proj;
    proj.reserve(map.assignment.size());
    for (std::size_t s = 0; s < map.assignment.size(); ++s) {
        Tensor<T> src = mapped_level(state, map.assignment[s]);
        proj.push_back(add_bias(matmul(src, m.inject_w[s]), m.inject_b[s]));
    }
    return proj;
}

}  // namespace detail

// Full forward over [compressed slots | tokens]: slot 0's projection is
// concatenated ahead of the token embeddings, slot i's projection is added to
// block i's output at the compressed rows only, and a single causal mask
// covers the whole concatenated sequence. Logits are returned for the token
// positions only.
template <class T>
Tensor<T> decoder_forward(const RccModel<T>& m, const CompressedState<T>& state,
                          const TokenSeq& tokens) {
    const ModelConfig& cfg = m.cfg;
    const int nc = state.n_compressed;
    const int tl = static_cast<int>(tokens.size());
    if (nc + tl > cfg.decoder_capacity)
        throw CapacityError("decoder_forward: " + std::to_string(nc) + " compressed + " +
                            std::to_string(tl) + " token positions exceed capacity of " +
                            std::to_string(cfg.decoder_capacity));
    if (static_cast<int>(state.levels.size()) != cfg.n_levels())
        throw ShapeError("decoder_forward: state level count mismatch");

    std::vector<Tensor<T>> proj = detail::slot_projections(m, state);

    const int n = nc + tl;
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

    Tensor<T> x = concat_rows<T>({proj[0], embedding(m.dec_embed, tokens)});
    if (cfg.positional_scheme == PositionalScheme::learned)
        x = add(x, gather_rows(m.dec_pos, positions));

    Tensor<T> mask = causal_mask<T>(n);
    for (int i = 0; i < cfg.n_dec_layers; ++i) {
        x = block_forward(m.dec_blocks[static_cast<std::size_t>(i)], x, mask, positions,
                          cfg.n_heads, cfg.positional_scheme);
        x = add_rows_at(x, proj[static_cast<std::size_t>(i) + 1], 0);
    }
    Tensor<T> y = slice_rows(x, nc, n);
    y = layernorm(y, m.lnf_gain, m.lnf_bias, static_cast<T>(kLayerNormEps));
    return add_bias(matmul(y, m.head_w), m.head_b);
}

// ---------------------------------------------------------------------------
// incremental decoding
// ---------------------------------------------------------------------------

// Inference-only decode state: per-layer KV cache over the concatenated
// sequence, processed one row at a time. Follows the same arithmetic as
// decoder_forward but without graph construction.
template <class T>
class DecodeSession {
 public:
    DecodeSession(const RccModel<T>& m, const CompressedState<T>& state)
        : m_(&m), nc_(state.n_compressed), d_(m.cfg.d_model), hd_(m.cfg.d_model / m.cfg.n_heads) {
        const int layers = m.cfg.n_dec_layers;
        const std::size_t cap = static_cast<std::size_t>(m.cfg.decoder_capacity);
        kcache_.assign(static_cast<std::size_t>(layers),
                       std::vector<T>(cap * static_cast<std::size_t>(d_)));
        vcache_.assign(static_cast<std::size_t>(layers),
                       std::vector<T>(cap * static_cast<std::size_t>(d_)));
        inv_freq_.resize(static_cast<std::size_t>(hd_ / 2));
        for (int i = 0; i < hd_ / 2; ++i)
            inv_freq_[static_cast<std::size_t>(i)] =
                std::pow(kRopeBase, -2.0 * i / static_cast<double>(hd_));

        NoGradGuard ng;
        proj_.clear();
        for (const auto& t : detail::slot_projections(*m_, state))
            proj_.push_back(t.value());

        // feed the compressed rows through the stack
        std::vector<T> row(static_cast<std::size_t>(d_));
        for (int r = 0; r < nc_; ++r) {
            std::copy(proj_[0].begin() + static_cast<std::ptrdiff_t>(r) * d_,
                      proj_[0].begin() + static_cast<std::ptrdiff_t>(r + 1) * d_,
                      row.begin());
            process_row(row.data(), /*compressed_row=*/r);
        }
    }

    int length() const { return length_; }
    int n_compressed() const { return nc_; }
    int capacity() const { return m_->cfg.decoder_capacity; }

    // Feed prompt tokens; returns the logits row after the last one.
    std::vector<T> prefill(const TokenSeq& tokens) {
        if (tokens.empty()) throw ParamError("prefill: prompt must be non-empty");
        std::vector<T> logits;
        for (TokenId t : tokens) logits = step(t);
        return logits;
    }

    // Feed one token; returns the logits row for the next prediction.
    std::vector<T> step(TokenId token) {
        if (length_ >= capacity())
            throw CapacityError("decode: positional capacity of " +
                                std::to_string(capacity()) + " exhausted");
        if (token < 0 || token >= m_->cfg.vocab_size)
            throw ParamError("decode: token id out of vocab");
        std::vector<T> row(static_cast<std::size_t>(d_));
        const T* e = m_->dec_embed.data() + static_cast<std::size_t>(token) * d_;
        std::copy(e, e + d_, row.begin());
        process_row(row.data(), /*compressed_row=*/-1);
        // final norm + head
        std::vector<T> normed(static_cast<std::size_t>(d_));
        layernorm_row(row.data(), m_->lnf_gain.data(), m_->lnf_bias.data(), normed.data());
        const int v = m_->cfg.vocab_size;
        std::vector<T> logits(static_cast<std::size_t>(v));
        ECMap<T> w(m_->head_w.data(), d_, v);
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>> lo(logits.data(), v);
        lo.noalias() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>>(
                           normed.data(), d_) * w;
        for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] += m_->head_b.data()[j];
        return logits;
    }

 private:
    void layernorm_row(const T* x, const T* gain, const T* bias, T* out) const {
        double mean = 0.0;
        for (int j = 0; j < d_; ++j) mean += x[j];
        mean /= d_;
        double var = 0.0;
        for (int j = 0; j < d_; ++j) {
            const double dd = x[j] - mean;
            var += dd * dd;
        }
        var /= d_;
        const T s = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
        for (int j = 0; j < d_; ++j)
            out[j] = static_cast<T>((x[j] - mean)) * s * gain[j] + bias[j];
    }

    void rope_row(T* x, int position) const {
        for (int h = 0; h < m_->cfg.n_heads; ++h) {
            T* base = x + static_cast<std::size_t>(h) * hd_;
            for (int i = 0; i < hd_ / 2; ++i) {
                const double th = position * inv_freq_[static_cast<std::size_t>(i)];
                const T c = static_cast<T>(std::cos(th));
                const T s = static_cast<T>(std::sin(th));
                const T x0 = base[2 * i], x1 = base[2 * i + 1];
                base[2 * i] = x0 * c - x1 * s;
                base[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }

    // Runs one row (at position length_) through every block, updating the
    // caches; x is modified in place to the final block output.
    void process_row(T* x, int compressed_row) {
        const int pos = length_;
        const int n_heads = m_->cfg.n_heads;
        const bool rotary = m_->cfg.positional_scheme == PositionalScheme::rotary;
        if (!rotary) {
            const T* pe = m_->dec_pos.data() + static_cast<std::size_t>(pos) * d_;
            for (int j = 0; j < d_; ++j) x[j] += pe[j];
        }
        std::vector<T> h(static_cast<std::size_t>(d_)), q(static_cast<std::size_t>(d_));
        std::vector<T> attn_out(static_cast<std::size_t>(d_));
        std::vector<T> mlp_h(static_cast<std::size_t>(m_->cfg.mlp_ratio) * d_);
        std::vector<T> scores(static_cast<std::size_t>(pos) + 1);
        const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd_)));

        using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;
        using CRowMap = Eigen::Map<const RowVec>;
        using RowMap = Eigen::Map<RowVec>;

        for (int li = 0; li < m_->cfg.n_dec_layers; ++li) {
            const BlockParams<T>& b = m_->dec_blocks[static_cast<std::size_t>(li)];
            layernorm_row(x, b.ln1_gain.data(), b.ln1_bias.data(), h.data());
            T* krow = kcache_[static_cast<std::size_t>(li)].data() +
                      static_cast<std::size_t>(pos) * d_;
            T* vrow = vcache_[static_cast<std::size_t>(li)].data() +
                      static_cast<std::size_t>(pos) * d_;
            CRowMap hm(h.data(), d_);
            RowMap(q.data(), d_).noalias() = hm * ECMap<T>(b.wq.data(), d_, d_);
            RowMap(krow, d_).noalias() = hm * ECMap<T>(b.wk.data(), d_, d_);
            RowMap(vrow, d_).noalias() = hm * ECMap<T>(b.wv.data(), d_, d_);
            for (int j = 0; j < d_; ++j) {
                q[static_cast<std::size_t>(j)] += b.bq.data()[j];
                krow[j] += b.bk.data()[j];
                vrow[j] += b.bv.data()[j];
            }
            if (rotary) {
                rope_row(q.data(), pos);
                rope_row(krow, pos);
            }
            // attention over rows 0..pos
            const std::vector<T>& kc = kcache_[static_cast<std::size_t>(li)];
            const std::vector<T>& vc = vcache_[static_cast<std::size_t>(li)];
            for (int hh = 0; hh < n_heads; ++hh) {
                const T* qh = q.data() + static_cast<std::size_t>(hh) * hd_;
                for (int j = 0; j <= pos; ++j) {
                    const T* kh = kc.data() + static_cast<std::size_t>(j) * d_ +
                                  static_cast<std::size_t>(hh) * hd_;
                    double dot = 0.0;
                    for (int e = 0; e < hd_; ++e) dot += static_cast<double>(qh[e]) * kh[e];
                    scores[static_cast<std::size_t>(j)] = static_cast<T>(dot) * sc;
                }
                T mx = scores[0];
                for (int j = 1; j <= pos; ++j) mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
                double z = 0.0;
                for (int j = 0; j <= pos; ++j) {
                    const T e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                    scores[static_cast<std::size_t>(j)] = e;
                    z += static_cast<double>(e);
                }
                const T inv = static_cast<T>(1.0 / z);
                T* oh = attn_out.data() + static_cast<std::size_t>(hh) * hd_;
                std::fill(oh, oh + hd_, T(0));
                for (int j = 0; j <= pos; ++j) {
                    const T w = scores[static_cast<std::size_t>(j)] * inv;
                    const T* vh = vc.data() + static_cast<std::size_t>(j) * d_ +
                                  static_cast<std::size_t>(hh) * hd_;
                    for (int e = 0; e < hd_; ++e) oh[e] += w * vh[e];
                }
            }
            // output projection + residual
            RowMap(h.data(), d_).noalias() =
                CRowMap(attn_out.data(), d_) * ECMap<T>(b.wo.data(), d_, d_);
            for (int j = 0; j < d_; ++j) x[j] += h[static_cast<std::size_t>(j)] + b.bo.data()[j];
            // mlp
            layernorm_row(x, b.ln2_gain.data(), b.ln2_bias.data(), h.data());
            const int md = m_->cfg.mlp_ratio * d_;
            RowMap(mlp_h.data(), md).noalias() =
                CRowMap(h.data(), d_) * ECMap<T>(b.w1.data(), d_, md);
            for (int j = 0; j < md; ++j) {
                const double vv = static_cast<double>(mlp_h[static_cast<std::size_t>(j)]) +
                                  b.b1.data()[j];
                mlp_h[static_cast<std::size_t>(j)] = static_cast<T>(
                    0.5 * vv * (1.0 + std::erf(vv * 0.70710678118654752440)));
            }
            RowMap(h.data(), d_).noalias() =
                CRowMap(mlp_h.data(), md) * ECMap<T>(b.w2.data(), md, d_);
            for (int j = 0; j < d_; ++j) x[j] += h[static_cast<std::size_t>(j)] + b.b2.data()[j];
            // residual injection at compressed rows only
            if (compressed_row >= 0) {
                const std::vector<T>& p = proj_[static_cast<std::size_t>(li) + 1];
                const T* pr = p.data() + static_cast<std::size_t>(compressed_row) * d_;
                for (int j = 0; j < d_; ++j) x[j] += pr[j];
            }
        }
        ++length_;
    }

    const RccModel<T>* m_;
    int nc_;
    int d_;
    int hd_;
    int length_ = 0;
    std::vector<std::vector<T>> kcache_, vcache_;  // per layer [capacity, d]
    std::vector<std::vector<T>> proj_;             // per slot [nc, d]
    std::vector<double> inv_freq_;
};

struct GenerateResult {
    TokenSeq tokens;   // prompt followed by generated continuation
    bool truncated = false;  // positional capacity hit before max_new
};

template <class T>
int argmax_lowest_id(const std::vector<T>& logits) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(logits.size()); ++j)
        if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(best)])
            best = j;
    return best;
}

// Greedy autoregressive extension via the incremental path. Stops at eot_id
// (pass a negative id to disable) or when the positional capacity is reached,
// in which case the result is flagged truncated.
template <class T>
GenerateResult generate(const RccModel<T>& m, const CompressedState<T>& state,
                        const TokenSeq& prompt, int max_new, TokenId eot_id) {
    if (prompt.empty()) throw ParamError("generate: prompt must be non-empty");
    if (state.n_compressed + static_cast<int>(prompt.size()) > m.cfg.decoder_capacity)
        throw CapacityError("generate: prompt does not fit decoder capacity");
    GenerateResult res;
    res.tokens = prompt;
    if (max_new == 0) return res;
    DecodeSession<T> session(m, state);
    std::vector<T> logits = session.prefill(prompt);
    for (int i = 0; i < max_new; ++i) {
        const TokenId next = argmax_lowest_id(logits);
        if (next == eot_id) break;
        res.tokens.push_back(next);
        if (i + 1 == max_new) break;
        if (session.length() >= session.capacity()) {
            res.truncated = true;
            break;
        }
        logits = session.step(next);
    }
    return res;
}

// Reference path: recomputes the whole forward for every generated token.
// Must agree with generate() on the produced sequence.
template <class T>
GenerateResult generate_reference(const RccModel<T>& m, const CompressedState<T>& state,
                                  const TokenSeq& prompt, int max_new, TokenId eot_id) {
    if (prompt.empty()) throw ParamError("generate: prompt must be non-empty");
    NoGradGuard ng;
    GenerateResult res;
    res.tokens = prompt;
    for (int i = 0; i < max_new; ++i) {
        if (state.n_compressed + static_cast<int>(res.tokens.size()) >
            m.cfg.decoder_capacity) {
            res.truncated = true;
            break;
        }
        Tensor<T> logits = decoder_forward(m, state, res.tokens);
        const int v = logits.cols();
        const T* last = logits.data() + static_cast<std::size_t>(logits.rows() - 1) * v;
        int best = 0;
        for (int j = 1; j < v; ++j)
            if (last[j] > last[best]) best = j;
        if (best == eot_id) break;
        res.tokens.push_back(best);
    }
    return res;
}

}  // namespace rcc

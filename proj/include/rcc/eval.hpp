#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rcc/bleu.hpp"
#include "rcc/data.hpp"
#include "rcc/model.hpp"
#include "rcc/tokenizer.hpp"
#include "rcc/training.hpp"

namespace rcc {

// Completion callable: compress enc, seed the decoder with prompt, extend
// greedily by up to max_new tokens; returns prompt + continuation. Evaluation
// harnesses accept any callable with this signature so they can be exercised
// with stubs.
using CompleteFn =
    std::function<TokenSeq(const TokenSeq& enc, const TokenSeq& prompt, int max_new)>;

template <class T>
CompleteFn make_completer(const RccModel<T>& m, TokenId eot_id) {
    return [&m, eot_id](const TokenSeq& enc, const TokenSeq& prompt, int max_new) {
        NoGradGuard ng;
        CompressedState<T> state = compress_context(m, enc);
        return generate(m, state, prompt, max_new, eot_id).tokens;
    };
}

// Index-ordered parallel map; results merge by index, so the output does not
// depend on the thread count as long as fn itself is deterministic.
template <class Fn>
void parallel_for_index(int n, int n_threads, const Fn& fn) {
    n_threads = std::max(1, std::min(n_threads, n));
    if (n_threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(n_threads));
    for (int w = 0; w < n_threads; ++w)
        threads.emplace_back([&, w]() {
            try {
                for (int i = w; i < n; i += n_threads) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// reconstruction
// ---------------------------------------------------------------------------

struct ReconProtocol {
    int window_len = 2048;    // required sample length
    int n_positions = 5;      // prompts per sample
    int position_step = 300;  // token interval between prompt starts
    int prompt_len = 10;
    int target_len = 500;

    void validate() const {
        if (window_len <= 0 || n_positions <= 0 || position_step <= 0 || prompt_len <= 0 ||
            target_len <= 0)
            throw ParamError("recon protocol: all fields must be positive");
        if ((n_positions - 1) * position_step + prompt_len >= window_len)
            throw ParamError("recon protocol: last prompt does not fit the window");
    }
};

struct BleuReport {
    std::vector<double> per_prompt_scores;  // sample-major, position-minor
    double mean = 0.0;
    int n_samples = 0;
    int n_positions = 0;
    int n_skipped = 0;
};

inline nlohmann::json to_json(const BleuReport& r) {
    return nlohmann::json{{"mean", r.mean},
                          {"n_samples", r.n_samples},
                          {"n_positions", r.n_positions},
                          {"n_skipped", r.n_skipped},
                          {"per_prompt_scores", r.per_prompt_scores}};
}

// For every sample, prompts of prompt_len tokens are taken at positions
// 0, step, 2*step, ...; the model reconstructs up to target_len tokens which
// are scored with BLEU-4 against the ground truth continuation.
inline BleuReport reconstruction_eval(const CompleteFn& complete,
                                      const std::vector<TokenSeq>& samples,
                                      const ReconProtocol& protocol, int n_threads = 1) {
    protocol.validate();
    std::vector<const TokenSeq*> usable;
    int skipped = 0;
    for (const auto& s : samples) {
        if (static_cast<int>(s.size()) < protocol.window_len) {
            ++skipped;
            continue;
        }
        usable.push_back(&s);
    }
    BleuReport report;
    report.n_skipped = skipped;
    report.n_samples = static_cast<int>(usable.size());
    report.n_positions = protocol.n_positions;
    report.per_prompt_scores.assign(
        static_cast<std::size_t>(report.n_samples) * protocol.n_positions, 0.0);

    parallel_for_index(report.n_samples, n_threads, [&](int si) {
        const TokenSeq& sample = *usable[static_cast<std::size_t>(si)];
        for (int pi = 0; pi < protocol.n_positions; ++pi) {
            const int start = pi * protocol.position_step;
            const TokenSeq prompt(sample.begin() + start,
                                  sample.begin() + start + protocol.prompt_len);
            const int ref_len = std::min(protocol.target_len,
                                         static_cast<int>(sample.size()) - start -
                                             protocol.prompt_len);
            const TokenSeq reference(
                sample.begin() + start + protocol.prompt_len,
                sample.begin() + start + protocol.prompt_len + ref_len);
            TokenSeq out = complete(sample, prompt, ref_len);
            const TokenSeq candidate(out.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                     out.end());
            report.per_prompt_scores[static_cast<std::size_t>(si) * protocol.n_positions +
                                     pi] = bleu4(candidate, reference);
        }
    });
    double total = 0.0;
    for (double s : report.per_prompt_scores) total += s;
    report.mean = report.per_prompt_scores.empty()
                      ? 0.0
                      : total / static_cast<double>(report.per_prompt_scores.size());
    return report;
}

// ---------------------------------------------------------------------------
// passkey retrieval
// ---------------------------------------------------------------------------

struct PasskeyRow {
    int key = 0;
    std::optional<int> predicted;
    bool correct = false;
};

struct PasskeyReport {
    double accuracy = 0.0;
    int n = 0;
    std::vector<PasskeyRow> rows;
};

inline nlohmann::json to_json(const PasskeyReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back(nlohmann::json{
            {"key", row.key},
            {"predicted", row.predicted ? nlohmann::json(*row.predicted) : nlohmann::json()},
            {"correct", row.correct}});
    return nlohmann::json{{"accuracy", r.accuracy}, {"n", r.n}, {"rows", rows}};
}

// Greedy completion (at most 8 tokens) from the trailing query of each
// sample; the first run of five digits is the model's answer.
inline PasskeyReport passkey_eval(const CompleteFn& complete, const Tokenizer& tok,
                                  const std::vector<PasskeySample>& dataset,
                                  int n_threads = 1) {
    PasskeyReport report;
    report.n = static_cast<int>(dataset.size());
    report.rows.resize(dataset.size());
    parallel_for_index(report.n, n_threads, [&](int i) {
        const PasskeySample& s = dataset[static_cast<std::size_t>(i)];
        const TokenSeq enc = tok.encode(s.text);
        const TokenSeq prompt = tok.encode(passkey_query());
        TokenSeq out = complete(enc, prompt, 8);
        const TokenSeq gen(out.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                           out.end());
        PasskeyRow row;
        row.key = s.key;
        row.predicted = extract_first_5digit(tok.decode(gen));
        row.correct = row.predicted && *row.predicted == s.key;
        report.rows[static_cast<std::size_t>(i)] = row;
    });
    int correct = 0;
    for (const auto& row : report.rows) correct += row.correct;
    report.accuracy = report.n ? static_cast<double>(correct) / report.n : 0.0;
    return report;
}

// ---------------------------------------------------------------------------
// instruction modes
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<std::string> normalized_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) words.push_back(cur), cur.clear();
        } else if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}
}  // namespace detail

// Word-level F1 with multiset clipping.
inline double token_f1(const std::string& prediction, const std::string& gold) {
    const auto p = detail::normalized_words(prediction);
    const auto g = detail::normalized_words(gold);
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> gc;
    for (const auto& w : g) ++gc[w];
    int overlap = 0;
    for (const auto& w : p) {
        auto it = gc.find(w);
        if (it != gc.end() && it->second > 0) {
            ++overlap;
            --it->second;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

struct QaItemResult {
    std::string answer;
    std::string pred_human, pred_recon, pred_compress;
    double f1_human = 0.0, f1_recon = 0.0, f1_compress = 0.0;
    bool recon_structural = false;  // instruction reproduced before the answer marker
};

struct QaModesReport {
    double f1_human = 0.0, f1_recon = 0.0, f1_compress = 0.0;
    double recon_structural_rate = 0.0;
    int n = 0;
    std::vector<QaItemResult> rows;
};

inline nlohmann::json to_json(const QaModesReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back(nlohmann::json{{"answer", row.answer},
                                      {"pred_human", row.pred_human},
                                      {"pred_recon", row.pred_recon},
                                      {"pred_compress", row.pred_compress},
                                      {"f1_human", row.f1_human},
                                      {"f1_recon", row.f1_recon},
                                      {"f1_compress", row.f1_compress},
                                      {"recon_structural", row.recon_structural}});
    return nlohmann::json{{"f1_human", r.f1_human},
                          {"f1_recon", r.f1_recon},
                          {"f1_compress", r.f1_compress},
                          {"recon_structural_rate", r.recon_structural_rate},
                          {"n", r.n},
                          {"rows", rows}};
}

// Three decoding modes over the same compressed context+instruction input:
//  - human:   the real instruction is written into the decoder prompt;
//  - recon:   the decoder sees only the fixed prefix and must first restate
//             the instruction, then answer;
//  - compress: the decoder is seeded with a brief prompt only.
inline QaModesReport instruction_modes_eval(const CompleteFn& complete,
                                            const Tokenizer& tok,
                                            const std::vector<QaItem>& items,
                                            int encoder_limit, std::uint64_t seed,
                                            int n_threads = 1) {
    QaModesReport report;
    report.n = static_cast<int>(items.size());
    report.rows.resize(items.size());
    const TokenSeq prefix = tok.encode(instruction_prefix());
    const TokenSeq marker = tok.encode(assistant_marker());

    parallel_for_index(report.n, n_threads, [&](int i) {
        const QaItem& item = items[static_cast<std::size_t>(i)];
        Rng rng(derive_seed(seed, "qa-eval", static_cast<std::uint64_t>(i)));
        const TokenSeq ctx = tok.encode(item.context);
        const TokenSeq instr = tok.encode(item.instruction);
        const TokenSeq ans = tok.encode(item.answer);
        TrainingExample ex = make_instruction_example(ctx, instr, ans, tok, encoder_limit,
                                                      encoder_limit, rng);
        const TokenSeq& enc = ex.encoder_tokens;
        QaItemResult row;
        row.answer = item.answer;

        // human: answer directly after the real instruction
        {
            TokenSeq prompt = prefix;
            prompt.insert(prompt.end(), instr.begin(), instr.end());
            prompt.insert(prompt.end(), marker.begin(), marker.end());
            TokenSeq out = complete(enc, prompt, static_cast<int>(ans.size()) + 16);
            row.pred_human = tok.decode(
                TokenSeq(out.begin() + static_cast<std::ptrdiff_t>(prompt.size()), out.end()));
        }
        // reconstruction: restate the instruction, then answer
        {
            const int budget =
                static_cast<int>(instr.size() + marker.size() + ans.size()) + 24;
            TokenSeq out = complete(enc, prefix, budget);
            const std::string text = tok.decode(
                TokenSeq(out.begin() + static_cast<std::ptrdiff_t>(prefix.size()), out.end()));
            const std::size_t mpos = text.find(assistant_marker());
            const std::size_t ipos = text.find(item.instruction);
            row.recon_structural =
                mpos != std::string::npos && ipos != std::string::npos && ipos < mpos;
            row.pred_recon = mpos == std::string::npos
                                 ? text
                                 : text.substr(mpos + assistant_marker().size());
        }
        // compress: brief prompt only
        {
            const TokenSeq prompt = tok.encode(compress_mode_prompt());
            TokenSeq out = complete(enc, prompt, static_cast<int>(ans.size()) + 16);
            row.pred_compress = tok.decode(
                TokenSeq(out.begin() + static_cast<std::ptrdiff_t>(prompt.size()), out.end()));
        }
        row.f1_human = token_f1(row.pred_human, row.answer);
        row.f1_recon = token_f1(row.pred_recon, row.answer);
        row.f1_compress = token_f1(row.pred_compress, row.answer);
        report.rows[static_cast<std::size_t>(i)] = std::move(row);
    });

    double h = 0, r = 0, c = 0, s = 0;
    for (const auto& row : report.rows) {
        h += row.f1_human;
        r += row.f1_recon;
        c += row.f1_compress;
        s += row.recon_structural;
    }
    if (report.n) {
        report.f1_human = h / report.n;
        report.f1_recon = r / report.n;
        report.f1_compress = c / report.n;
        report.recon_structural_rate = s / report.n;
    }
    return report;
}

}  // namespace rcc

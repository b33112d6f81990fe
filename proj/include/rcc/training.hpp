#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rcc/data.hpp"
#include "rcc/model.hpp"
#include "rcc/tokenizer.hpp"

namespace rcc {

enum class TaskKind { reconstruction, continuation, instruction };

inline std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::reconstruction: return "reconstruction";
        case TaskKind::continuation: return "continuation";
        default: return "instruction";
    }
}

// Paired encoder input, decoder input and loss mask. Mask 0 marks prompt
// positions excluded from the loss.
struct TrainingExample {
    TokenSeq encoder_tokens;
    TokenSeq decoder_tokens;
    std::vector<int> loss_mask;
    TaskKind task = TaskKind::reconstruction;

    void validate() const {
        if (loss_mask.size() != decoder_tokens.size())
            throw ParamError("training example: mask length must match decoder tokens");
        int total = 0;
        for (int m : loss_mask) total += (m != 0);
        if (total < 1) throw ParamError("training example: mask selects no target");
        if (task == TaskKind::reconstruction &&
            (loss_mask.empty() || loss_mask.front() != 0))
            throw ParamError("reconstruction example: prompt must lead the decoder input");
    }
};

// ---------------------------------------------------------------------------
// example builders
// ---------------------------------------------------------------------------

// Deterministic core of the random-prompt reconstruction task: prompt
// window[i, i+prompt_len) followed by the continuation, truncated to the
// decoder budget. Returns nothing when no continuation exists.
inline std::optional<TrainingExample> make_reconstruction_example_at(
    const TokenSeq& window, int i, int prompt_len, int decoder_budget) {
    if (i < 0 || prompt_len < 1 || decoder_budget <= prompt_len) return std::nullopt;
    const int len = static_cast<int>(window.size());
    if (i + prompt_len >= len) return std::nullopt;  // empty continuation
    const int target_len =
        std::min(len - (i + prompt_len), decoder_budget - prompt_len);
    TrainingExample ex;
    ex.task = TaskKind::reconstruction;
    ex.encoder_tokens = window;
    ex.decoder_tokens.assign(window.begin() + i,
                             window.begin() + i + prompt_len + target_len);
    ex.loss_mask.assign(static_cast<std::size_t>(prompt_len), 0);
    ex.loss_mask.insert(ex.loss_mask.end(), static_cast<std::size_t>(target_len), 1);
    return ex;
}

inline constexpr int kPromptLenMin = 5;
inline constexpr int kPromptLenMax = 20;

inline std::optional<TrainingExample> make_reconstruction_example(
    const TokenSeq& window, int decoder_budget, Rng& rng, int prompt_min = kPromptLenMin,
    int prompt_max = kPromptLenMax) {
    if (prompt_min < 1 || prompt_max < prompt_min)
        throw ParamError("reconstruction: bad prompt length range");
    if (static_cast<int>(window.size()) < prompt_max + 2) return std::nullopt;
    if (decoder_budget <= prompt_max)
        throw ParamError("reconstruction: decoder budget must exceed max prompt length");
    const int prompt_len = rng.uniform_int(prompt_min, prompt_max);
    const int i = rng.uniform_int(0, static_cast<int>(window.size()) - prompt_len - 1);
    return make_reconstruction_example_at(window, i, prompt_len, decoder_budget);
}

inline constexpr int kContinuationLeadIn = 8;

// Continuation task over a token stream; the cursor advances past the
// consumed tokens, no overlap between successive examples.
inline std::optional<TrainingExample> make_continuation_example(const TokenSeq& stream,
                                                                std::size_t& cursor,
                                                                int encoder_length,
                                                                int decoder_budget) {
    if (encoder_length <= 0 || decoder_budget <= 1)
        throw ParamError("continuation: lengths must be positive");
    if (cursor + static_cast<std::size_t>(encoder_length) + 2 > stream.size())
        return std::nullopt;  // end of data
    TrainingExample ex;
    ex.task = TaskKind::continuation;
    ex.encoder_tokens.assign(stream.begin() + static_cast<std::ptrdiff_t>(cursor),
                             stream.begin() + static_cast<std::ptrdiff_t>(cursor) +
                                 encoder_length);
    const std::size_t dec_start = cursor + static_cast<std::size_t>(encoder_length);
    const int dec_len = static_cast<int>(std::min<std::size_t>(
        static_cast<std::size_t>(decoder_budget), stream.size() - dec_start));
    ex.decoder_tokens.assign(stream.begin() + static_cast<std::ptrdiff_t>(dec_start),
                             stream.begin() + static_cast<std::ptrdiff_t>(dec_start) +
                                 dec_len);
    const int lead = std::min(kContinuationLeadIn, dec_len - 1);
    ex.loss_mask.assign(static_cast<std::size_t>(lead), 0);
    ex.loss_mask.insert(ex.loss_mask.end(), static_cast<std::size_t>(dec_len - lead), 1);
    cursor = dec_start + static_cast<std::size_t>(dec_len);
    return ex;
}

inline const std::string& instruction_prefix() {
    static const std::string s = "system: You are a helpful assistant. user: ";
    return s;
}

inline const std::string& assistant_marker() {
    static const std::string s = " assistant: ";
    return s;
}

inline const std::string& compress_mode_prompt() {
    static const std::string s = "Response of system:";
    return s;
}

// Instruction-reconstruction example: the instruction rides inside the
// encoder context (twice, back to back, at a random end); the decoder learns
// to regenerate the instruction after a fixed prefix and then answer.
inline TrainingExample make_instruction_example(const TokenSeq& context,
                                                const TokenSeq& instruction,
                                                const TokenSeq& answer,
                                                const Tokenizer& tok, int encoder_limit,
                                                int decoder_budget, Rng& rng) {
    if (instruction.empty() || answer.empty())
        throw ParamError("instruction example: instruction and answer required");
    const TokenSeq prefix = tok.encode(instruction_prefix());
    const TokenSeq marker = tok.encode(assistant_marker());
    const TokenSeq sep = tok.encode(" ");

    const std::size_t dec_len =
        prefix.size() + instruction.size() + marker.size() + answer.size() + 1;
    if (static_cast<int>(dec_len) > decoder_budget)
        throw ParamError("instruction example: prefix + instruction + answer exceed "
                         "decoder budget");

    TrainingExample ex;
    ex.task = TaskKind::instruction;
    ex.decoder_tokens = prefix;
    ex.decoder_tokens.insert(ex.decoder_tokens.end(), instruction.begin(),
                             instruction.end());
    ex.decoder_tokens.insert(ex.decoder_tokens.end(), marker.begin(), marker.end());
    ex.decoder_tokens.insert(ex.decoder_tokens.end(), answer.begin(), answer.end());
    ex.decoder_tokens.push_back(tok.eot_id());
    ex.loss_mask.assign(prefix.size(), 0);
    ex.loss_mask.insert(ex.loss_mask.end(), ex.decoder_tokens.size() - prefix.size(), 1);

    // instruction twice, back to back
    TokenSeq twice = instruction;
    twice.insert(twice.end(), sep.begin(), sep.end());
    twice.insert(twice.end(), instruction.begin(), instruction.end());

    const int needed = static_cast<int>(twice.size());
    if (needed > encoder_limit)
        throw ParamError("instruction example: instruction does not fit encoder input");
    // over-budget contexts lose their tail, never the instruction
    int ctx_keep = static_cast<int>(context.size());
    if (!context.empty())
        ctx_keep = std::min(ctx_keep, encoder_limit - needed - static_cast<int>(sep.size()));
    if (ctx_keep < 0) ctx_keep = 0;

    const bool at_begin = rng.coin();
    TokenSeq enc;
    if (ctx_keep == 0) {
        enc = twice;
    } else if (at_begin) {
        enc = twice;
        enc.insert(enc.end(), sep.begin(), sep.end());
        enc.insert(enc.end(), context.begin(), context.begin() + ctx_keep);
    } else {
        enc.assign(context.begin(), context.begin() + ctx_keep);
        enc.insert(enc.end(), sep.begin(), sep.end());
        enc.insert(enc.end(), twice.begin(), twice.end());
    }
    ex.encoder_tokens = std::move(enc);
    return ex;
}

// Passkey retrieval fine-tuning example: the decoder is prompted with the
// trailing query and must emit the key.
inline TrainingExample make_passkey_example(const PasskeySample& sample,
                                            const Tokenizer& tok) {
    TrainingExample ex;
    ex.task = TaskKind::reconstruction;
    ex.encoder_tokens = tok.encode(sample.text);
    const TokenSeq query = tok.encode(passkey_query());
    const TokenSeq ans = tok.encode(" " + std::to_string(sample.key) + ".");
    ex.decoder_tokens = query;
    ex.decoder_tokens.insert(ex.decoder_tokens.end(), ans.begin(), ans.end());
    ex.decoder_tokens.push_back(tok.eot_id());
    ex.loss_mask.assign(query.size(), 0);
    ex.loss_mask.insert(ex.loss_mask.end(), ans.size() + 1, 1);
    return ex;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

// Compress the encoder input, run the decoder over the example's tokens and
// score next-token prediction on the masked-in positions.
template <class T>
Tensor<T> masked_lm_loss(const RccModel<T>& m, const TrainingExample& ex) {
    ex.validate();
    if (ex.decoder_tokens.size() < 2)
        throw ParamError("masked_lm_loss: need at least two decoder tokens");
    CompressedState<T> state = compress_context(m, ex.encoder_tokens);
    Tensor<T> logits = decoder_forward(m, state, ex.decoder_tokens);
    const int t = static_cast<int>(ex.decoder_tokens.size());
    Tensor<T> shifted = slice_rows(logits, 0, t - 1);
    TokenSeq targets(ex.decoder_tokens.begin() + 1, ex.decoder_tokens.end());
    std::vector<int> mask(ex.loss_mask.begin() + 1, ex.loss_mask.end());
    return softmax_cross_entropy(shifted, targets, mask);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <class T>
class AdamOptimizer {
 public:
    explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Parameter<T>>& params, double lr) {
        if (lr <= 0) throw ParamError("adam: learning rate must be positive");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& p : params) {
            if (!p.trainable || !p.tensor.has_grad()) continue;
            auto& mv = state_[p.tensor.node()];
            const std::size_t n = static_cast<std::size_t>(p.tensor.numel());
            if (mv.first.empty()) {
                mv.first.assign(n, T(0));
                mv.second.assign(n, T(0));
            }
            const auto& g = p.tensor.grad();
            T* theta = p.tensor.data();
            for (std::size_t i = 0; i < n; ++i) {
                mv.first[i] = static_cast<T>(beta1_ * mv.first[i] + (1.0 - beta1_) * g[i]);
                mv.second[i] =
                    static_cast<T>(beta2_ * mv.second[i] + (1.0 - beta2_) * g[i] * g[i]);
                const double mhat = mv.first[i] / bc1;
                const double vhat = mv.second[i] / bc2;
                theta[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

 private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::unordered_map<const TensorNode<T>*, std::pair<std::vector<T>, std::vector<T>>>
        state_;
};

// ---------------------------------------------------------------------------
// staged training
// ---------------------------------------------------------------------------

enum class StageKind { stage1_full, stage2_frozen_encoder };

inline std::string to_string(StageKind s) {
    return s == StageKind::stage1_full ? "stage1_full" : "stage2_frozen_encoder";
}

inline StageKind stage_kind_from_string(const std::string& s) {
    if (s == "stage1_full") return StageKind::stage1_full;
    if (s == "stage2_frozen_encoder") return StageKind::stage2_frozen_encoder;
    throw ConfigError("stage must be \"stage1_full\" or \"stage2_frozen_encoder\"");
}

struct StagePlan {
    StageKind stage = StageKind::stage1_full;
    int encoder_length = 256;
    int steps = 100;
    int batch_size = 8;
    double learning_rate = 1e-4;
    std::pair<double, double> task_mix{9.0, 1.0};  // (reconstruction, continuation)
    std::uint64_t seed = 0;
    int n_threads = 1;

    void validate() const {
        if (encoder_length <= 0) throw ConfigError("stage plan: encoder_length must be positive");
        if (steps <= 0) throw ConfigError("stage plan: steps must be positive");
        if (batch_size <= 0) throw ConfigError("stage plan: batch_size must be positive");
        if (learning_rate <= 0) throw ConfigError("stage plan: learning_rate must be positive");
        if (task_mix.first < 0 || task_mix.second < 0 ||
            task_mix.first + task_mix.second <= 0)
            throw ConfigError("stage plan: task_mix weights must be non-negative, sum > 0");
        if (n_threads < 1) throw ConfigError("stage plan: n_threads must be >= 1");
    }
};

struct Batch {
    std::vector<TrainingExample> examples;
    TaskKind task = TaskKind::reconstruction;
};

class ExampleSource {
 public:
    virtual ~ExampleSource() = default;
    virtual Batch next_batch(Rng& rng, int batch_size) = 0;
};

// Reconstruction/continuation mixture over one token stream. The task is
// sampled per batch by the mix weights; the continuation cursor wraps.
class MixSource : public ExampleSource {
 public:
    MixSource(TokenSeq corpus, int encoder_length, int decoder_budget,
              std::pair<double, double> mix, int prompt_min = kPromptLenMin,
              int prompt_max = kPromptLenMax)
        : corpus_(std::move(corpus)),
          encoder_length_(encoder_length),
          decoder_budget_(decoder_budget),
          mix_(mix),
          prompt_min_(prompt_min),
          prompt_max_(prompt_max) {
        if (static_cast<int>(corpus_.size()) < encoder_length_ + 2)
            throw ParamError("mix source: corpus shorter than one encoder window");
        if (mix.first > 0 && encoder_length_ < prompt_max_ + 2)
            throw ParamError(
                "mix source: encoder window too short for the reconstruction prompt "
                "range");
    }

    TaskKind sample_task(Rng& rng) {
        const double u = rng.uniform01() * (mix_.first + mix_.second);
        return u < mix_.first ? TaskKind::reconstruction : TaskKind::continuation;
    }

    Batch next_batch(Rng& rng, int batch_size) override {
        Batch b;
        b.task = sample_task(rng);
        while (static_cast<int>(b.examples.size()) < batch_size) {
            std::optional<TrainingExample> ex;
            if (b.task == TaskKind::reconstruction) {
                const int start = rng.uniform_int(
                    0, static_cast<int>(corpus_.size()) - encoder_length_);
                TokenSeq window(corpus_.begin() + start,
                                corpus_.begin() + start + encoder_length_);
                ex = make_reconstruction_example(window, decoder_budget_, rng, prompt_min_,
                                                 prompt_max_);
            } else {
                ex = make_continuation_example(corpus_, cursor_, encoder_length_,
                                               decoder_budget_);
                if (!ex) {
                    cursor_ = 0;  // wrap
                    continue;
                }
            }
            if (ex) b.examples.push_back(std::move(*ex));
        }
        return b;
    }

 private:
    TokenSeq corpus_;
    int encoder_length_;
    int decoder_budget_;
    std::pair<double, double> mix_;
    int prompt_min_;
    int prompt_max_;
    std::size_t cursor_ = 0;
};

// Fixed example list, reshuffled each epoch.
class DatasetSource : public ExampleSource {
 public:
    explicit DatasetSource(std::vector<TrainingExample> examples)
        : examples_(std::move(examples)) {
        if (examples_.empty()) throw ParamError("dataset source: no examples");
    }

    Batch next_batch(Rng& rng, int batch_size) override {
        Batch b;
        b.task = examples_.front().task;
        for (int i = 0; i < batch_size; ++i) {
            if (pos_ == order_.size()) {
                order_.resize(examples_.size());
                for (std::size_t j = 0; j < order_.size(); ++j) order_[j] = j;
                rng.shuffle(order_.begin(), order_.end());
                pos_ = 0;
            }
            b.examples.push_back(examples_[order_[pos_++]]);
        }
        return b;
    }

 private:
    std::vector<TrainingExample> examples_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

struct StepLog {
    int step = 0;
    TaskKind task = TaskKind::reconstruction;
    double loss = 0.0;
    double lr = 0.0;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const StepLog& r) {
    return nlohmann::json{{"step", r.step},
                          {"task", to_string(r.task)},
                          {"loss", r.loss},
                          {"lr", r.lr},
                          {"seed", r.seed}};
}

// One training stage. Stage 2 freezes the encoder, so compressed vectors are
// produced without any differentiation state and memory scales with the
// decoder length only. Gradients of a batch are computed per example (in
// parallel when n_threads > 1) and merged in a fixed order, so the trajectory
// is a pure function of (plan, source, initial weights).
template <class T>
std::vector<StepLog> run_stage(RccModel<T>& model, const StagePlan& plan,
                               ExampleSource& source, std::ostream* log_stream = nullptr) {
    plan.validate();
    model.set_encoder_trainable(plan.stage != StageKind::stage2_frozen_encoder);

    AdamOptimizer<T> adam;
    Rng rng(derive_seed(plan.seed, "stage"));
    std::vector<StepLog> log;
    log.reserve(static_cast<std::size_t>(plan.steps));

    for (int step = 0; step < plan.steps; ++step) {
        Batch batch = source.next_batch(rng, plan.batch_size);
        const int b = static_cast<int>(batch.examples.size());
        for (auto& p : model.params) p.tensor.zero_grad();

        const int workers = std::min(plan.n_threads, b);
        std::vector<LeafGrads<T>> sinks(static_cast<std::size_t>(workers));
        std::vector<double> losses(static_cast<std::size_t>(b), 0.0);
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));

        auto work = [&](int w) {
            try {
                for (int e = w; e < b; e += workers) {
                    Tensor<T> loss = masked_lm_loss(model, batch.examples[static_cast<std::size_t>(e)]);
                    const double lv = static_cast<double>(loss.item());
                    if (!std::isfinite(lv))
                        throw NumericError(
                            "training aborted: non-finite loss at step " +
                            std::to_string(step) + ", example hash " +
                            std::to_string(hash_tokens(
                                batch.examples[static_cast<std::size_t>(e)].encoder_tokens)));
                    losses[static_cast<std::size_t>(e)] = lv;
                    loss.backward(&sinks[static_cast<std::size_t>(w)]);
                }
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        };
        if (workers == 1) {
            work(0);
        } else {
            std::vector<std::thread> threads;
            threads.reserve(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w) threads.emplace_back(work, w);
            for (auto& th : threads) th.join();
        }
        for (auto& err : errors)
            if (err) std::rethrow_exception(err);

        // deterministic merge: worker slices are fixed by (w, e) assignment
        for (auto& sink : sinks) {
            for (auto& [node, g] : sink.grads) {
                auto* n = const_cast<TensorNode<T>*>(node);
                auto& dst = n->grad_buffer(nullptr);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
        }
        const T inv_b = static_cast<T>(1.0 / b);
        for (auto& p : model.params)
            if (p.tensor.has_grad())
                for (auto& g : p.tensor.grad()) g *= inv_b;

        adam.step(model.params, plan.learning_rate);

        double mean_loss = 0.0;
        for (double lv : losses) mean_loss += lv;
        mean_loss /= b;
        StepLog rec{step, batch.task, mean_loss, plan.learning_rate, plan.seed};
        if (log_stream) (*log_stream) << to_json(rec).dump() << '\n';
        log.push_back(rec);
    }
    return log;
}

}  // namespace rcc

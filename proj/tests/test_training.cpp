#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "rcc/checkpoint.hpp"
#include "rcc/training.hpp"
#include "test_util.hpp"

using namespace rcc;
using testutil::random_tokens;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab_size = 19;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 2;
    cfg.n_dec_layers = 2;
    cfg.encoder_window = 16;
    cfg.compression_rate = 4;
    cfg.decoder_budget = 16;
    cfg.max_segments = 4;
    cfg.decoder_capacity = 64;
    return cfg;
}

template <class T>
std::vector<T> param_snapshot(const RccModel<T>& m, const std::string& prefix) {
    std::vector<T> out;
    for (const auto& p : m.params)
        if (p.name.rfind(prefix, 0) == 0)
            out.insert(out.end(), p.tensor.value().begin(), p.tensor.value().end());
    return out;
}

}  // namespace

TEST(ReconstructionExample, ConstructionRule) {
    // window "abcdefgh" as ids, i=2, |p|=2 -> decoder "cdefgh", mask 0,0,1,1,1,1
    TokenSeq window = {0, 1, 2, 3, 4, 5, 6, 7};
    auto ex = make_reconstruction_example_at(window, 2, 2, 16);
    ASSERT_TRUE(ex.has_value());
    EXPECT_EQ(ex->decoder_tokens, (TokenSeq{2, 3, 4, 5, 6, 7}));
    EXPECT_EQ(ex->loss_mask, (std::vector<int>{0, 0, 1, 1, 1, 1}));
    EXPECT_EQ(ex->encoder_tokens, window);
    EXPECT_EQ(ex->task, TaskKind::reconstruction);
    ex->validate();
}

TEST(ReconstructionExample, BudgetTruncatesTarget) {
    TokenSeq window(40, 7);
    auto ex = make_reconstruction_example_at(window, 0, 4, 10);
    ASSERT_TRUE(ex.has_value());
    EXPECT_EQ(ex->decoder_tokens.size(), 10u);  // 4 prompt + 6 target
}

TEST(ReconstructionExample, PromptAtEndIsSkipped) {
    TokenSeq window = {0, 1, 2, 3, 4, 5, 6, 7};
    EXPECT_FALSE(make_reconstruction_example_at(window, 6, 2, 16).has_value());
}

TEST(ReconstructionExample, ShortWindowIsSkipped) {
    Rng rng(1);
    TokenSeq window(kPromptLenMax + 1, 3);
    EXPECT_FALSE(make_reconstruction_example(window, 64, rng).has_value());
}

TEST(ReconstructionExample, SeededDeterminism) {
    Rng r1(42), r2(42);
    TokenSeq window(64, 0);
    for (std::size_t i = 0; i < window.size(); ++i)
        window[i] = static_cast<TokenId>(i % 19);
    auto a = make_reconstruction_example(window, 32, r1);
    auto b = make_reconstruction_example(window, 32, r2);
    ASSERT_TRUE(a && b);
    EXPECT_EQ(a->decoder_tokens, b->decoder_tokens);
    EXPECT_EQ(a->loss_mask, b->loss_mask);
}

TEST(ContinuationExample, SliceMathAndCursor) {
    // stream indexed by position so slices are directly checkable
    TokenSeq stream(4096, 0);
    for (std::size_t i = 0; i < stream.size(); ++i)
        stream[i] = static_cast<TokenId>(i % 251);
    std::size_t cursor = 0;
    auto ex = make_continuation_example(stream, cursor, 2048, 512);
    ASSERT_TRUE(ex.has_value());
    EXPECT_EQ(ex->encoder_tokens.size(), 2048u);
    EXPECT_EQ(ex->decoder_tokens.size(), 512u);
    // decoder gets stream tokens 2048..2559
    EXPECT_EQ(ex->decoder_tokens.front(), stream[2048]);
    EXPECT_EQ(ex->decoder_tokens.back(), stream[2559]);
    EXPECT_EQ(cursor, 2048u + 512u);  // advances by encoder + decoder length
    // leading 8 tokens masked out
    for (int i = 0; i < 8; ++i) EXPECT_EQ(ex->loss_mask[static_cast<std::size_t>(i)], 0);
    for (std::size_t i = 8; i < ex->loss_mask.size(); ++i) EXPECT_EQ(ex->loss_mask[i], 1);
}

TEST(ContinuationExample, EndOfDataSignal) {
    TokenSeq stream(100, 1);
    std::size_t cursor = 95;
    EXPECT_FALSE(make_continuation_example(stream, cursor, 16, 8).has_value());
}

TEST(InstructionExample, DecoderLayout) {
    Tokenizer tok = Tokenizer::byte_level();
    Rng rng(7);
    const TokenSeq ctx = tok.encode("The color of the kepo is red.");
    const TokenSeq instr = tok.encode("What is the color of the kepo?");
    const TokenSeq ans = tok.encode("red");
    auto ex = make_instruction_example(ctx, instr, ans, tok, 256, 128, rng);
    ex.validate();
    EXPECT_EQ(ex.task, TaskKind::instruction);

    const TokenSeq prefix = tok.encode(instruction_prefix());
    // prefix is masked out, everything after is masked in
    for (std::size_t i = 0; i < prefix.size(); ++i) EXPECT_EQ(ex.loss_mask[i], 0);
    for (std::size_t i = prefix.size(); i < ex.loss_mask.size(); ++i)
        EXPECT_EQ(ex.loss_mask[i], 1);
    // decoder target begins with the instruction right after the prefix and
    // ends with the answer + eot
    const std::string dec = tok.decode(ex.decoder_tokens);
    EXPECT_EQ(dec.find(instruction_prefix()), 0u);
    EXPECT_EQ(dec.find("What is the color of the kepo?"), instruction_prefix().size());
    EXPECT_NE(dec.find(" assistant: red"), std::string::npos);
    EXPECT_EQ(ex.decoder_tokens.back(), tok.eot_id());
    // encoder input contains the instruction twice
    const std::string enc = tok.decode(ex.encoder_tokens);
    const auto first = enc.find("What is the color of the kepo?");
    ASSERT_NE(first, std::string::npos);
    EXPECT_NE(enc.find("What is the color of the kepo?", first + 1), std::string::npos);
}

TEST(InstructionExample, PlacementIsBalanced) {
    Tokenizer tok = Tokenizer::byte_level();
    Rng rng(123);
    const TokenSeq ctx = tok.encode("Some context text that sits around the question.");
    const TokenSeq instr = tok.encode("What is it?");
    const TokenSeq ans = tok.encode("thing");
    int at_begin = 0;
    for (int i = 0; i < 1000; ++i) {
        auto ex = make_instruction_example(ctx, instr, ans, tok, 512, 128, rng);
        const std::string enc = tok.decode(ex.encoder_tokens);
        if (enc.find("What is it?") == 0) ++at_begin;
    }
    // two-sided binomial bound at p=0.01 for n=1000, p=0.5
    EXPECT_GE(at_begin, 459);
    EXPECT_LE(at_begin, 541);
}

TEST(InstructionExample, EmptyContextIsValid) {
    Tokenizer tok = Tokenizer::byte_level();
    Rng rng(5);
    const TokenSeq instr = tok.encode("Say hi.");
    const TokenSeq ans = tok.encode("hi");
    auto ex = make_instruction_example({}, instr, ans, tok, 64, 128, rng);
    EXPECT_EQ(tok.decode(ex.encoder_tokens), "Say hi. Say hi.");
}

TEST(InstructionExample, OverBudgetTruncatesContextNotInstruction) {
    Tokenizer tok = Tokenizer::byte_level();
    Rng rng(9);
    const TokenSeq ctx = tok.encode(std::string(500, 'x'));
    const TokenSeq instr = tok.encode("What is the color of the kepo?");
    const TokenSeq ans = tok.encode("red");
    auto ex = make_instruction_example(ctx, instr, ans, tok, 128, 128, rng);
    EXPECT_LE(ex.encoder_tokens.size(), 128u);
    const std::string enc = tok.decode(ex.encoder_tokens);
    const auto first = enc.find("What is the color of the kepo?");
    ASSERT_NE(first, std::string::npos);
    EXPECT_NE(enc.find("What is the color of the kepo?", first + 1), std::string::npos);
}

TEST(InstructionExample, DecoderOverBudgetThrows) {
    Tokenizer tok = Tokenizer::byte_level();
    Rng rng(11);
    const TokenSeq instr = tok.encode(std::string(100, 'q'));
    const TokenSeq ans = tok.encode("a");
    EXPECT_THROW(make_instruction_example({}, instr, ans, tok, 512, 64, rng), ParamError);
}

TEST(PasskeyExample, QueryPromptAndKeyTarget) {
    Tokenizer tok = Tokenizer::byte_level();
    PasskeySample s;
    s.key = 56994;
    s.m = 1;
    s.n = 1;
    s.text = gen_passkey_text({s.key, s.m, s.n});
    auto ex = make_passkey_example(s, tok);
    ex.validate();
    const std::string dec = tok.decode(ex.decoder_tokens);
    EXPECT_EQ(dec, passkey_query() + " 56994.");
    EXPECT_EQ(ex.decoder_tokens.back(), tok.eot_id());
    // mask covers exactly the answer and eot
    const std::size_t qlen = tok.encode(passkey_query()).size();
    for (std::size_t i = 0; i < qlen; ++i) EXPECT_EQ(ex.loss_mask[i], 0);
    for (std::size_t i = qlen; i < ex.loss_mask.size(); ++i) EXPECT_EQ(ex.loss_mask[i], 1);
}

TEST(MaskedLmLoss, SinglePositionEqualsLogProb) {
    ModelConfig cfg = small_config();
    auto m = build_model<double>(cfg, 3);
    Rng rng(5);
    TrainingExample ex;
    ex.task = TaskKind::reconstruction;
    ex.encoder_tokens = random_tokens(16, cfg.vocab_size, rng);
    ex.decoder_tokens = random_tokens(6, cfg.vocab_size, rng);
    ex.loss_mask = {0, 0, 1, 0, 0, 0};  // only target at position 2
    const double loss = masked_lm_loss(m, ex).item();

    NoGradGuard ng;
    auto state = compress_context(m, ex.encoder_tokens);
    auto logits = decoder_forward(m, state, ex.decoder_tokens);
    const int v = cfg.vocab_size;
    // position 1 predicts decoder token 2
    const double* row = logits.data() + 1 * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double expect = -(row[ex.decoder_tokens[2]] - mx - std::log(z));
    EXPECT_NEAR(loss, expect, 1e-9);
}

TEST(MaskedLmLoss, UntrainedModelNearLogVocab) {
    ModelConfig cfg = small_config();
    auto m = build_model<double>(cfg, 17);
    Rng rng(19);
    TrainingExample ex;
    ex.encoder_tokens = random_tokens(16, cfg.vocab_size, rng);
    ex.decoder_tokens = random_tokens(12, cfg.vocab_size, rng);
    ex.loss_mask.assign(12, 1);
    ex.loss_mask[0] = 0;
    const double loss = masked_lm_loss(m, ex).item();
    EXPECT_NEAR(loss, std::log(static_cast<double>(cfg.vocab_size)),
                0.05 * std::log(static_cast<double>(cfg.vocab_size)));
}

TEST(MaskedLmLoss, EmbeddingRowsFeedingOnlyMaskedPredictionsGetZeroGrad) {
    // 1-layer decoder; only the first target is masked in, so logits row 0 is
    // the only used row and it depends on decoder token 0 alone. Embedding
    // rows of later decoder tokens must receive exactly zero gradient.
    ModelConfig cfg = small_config();
    cfg.n_dec_layers = 1;
    cfg.n_enc_layers = 1;
    auto m = build_model<double>(cfg, 23);
    TrainingExample ex;
    ex.encoder_tokens = {1, 2, 3, 4, 5, 6, 7, 8};
    ex.decoder_tokens = {10, 11, 12, 13};  // distinct ids, none in encoder input
    ex.loss_mask = {0, 1, 0, 0};
    for (auto& p : m.params) p.tensor.zero_grad();
    auto loss = masked_lm_loss(m, ex);
    loss.backward();
    const auto& g = m.dec_embed.grad();
    const int d = cfg.d_model;
    auto row_abs = [&](TokenId id) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += std::abs(g[static_cast<std::size_t>(id) * d + j]);
        return s;
    };
    EXPECT_GT(row_abs(10), 0.0);
    EXPECT_DOUBLE_EQ(row_abs(11), 0.0);
    EXPECT_DOUBLE_EQ(row_abs(12), 0.0);
    EXPECT_DOUBLE_EQ(row_abs(13), 0.0);
}

TEST(MaskedLmLoss, AllMaskedOutAfterShiftThrowsEmptyLoss) {
    ModelConfig cfg = small_config();
    auto m = build_model<double>(cfg, 29);
    TrainingExample ex;
    ex.task = TaskKind::continuation;
    ex.encoder_tokens = {1, 2, 3};
    ex.decoder_tokens = {4, 5, 6};
    ex.loss_mask = {1, 0, 0};  // shifts to {0, 0}
    EXPECT_THROW(masked_lm_loss(m, ex), EmptyLossError);
}

TEST(Adam, ConvergesOnQuadraticAndSkipsFrozen) {
    std::vector<Parameter<double>> params;
    params.push_back({"w", Tensor<double>::from_data({1}, {3.0}, true), true});
    params.push_back({"frozen", Tensor<double>::from_data({1}, {2.0}, true), false});
    AdamOptimizer<double> adam;
    for (int i = 0; i < 400; ++i) {
        for (auto& p : params) p.tensor.zero_grad();
        auto loss = sum(mul(params[0].tensor, params[0].tensor));
        loss.backward();
        // also hand the frozen parameter a gradient; it must stay put
        params[1].tensor.grad()[0] = 1.0;
        adam.step(params, 0.05);
    }
    EXPECT_NEAR(params[0].tensor.value()[0], 0.0, 1e-2);
    EXPECT_DOUBLE_EQ(params[1].tensor.value()[0], 2.0);
}

TEST(MixSource, TaskFrequenciesMatchWeights) {
    TokenSeq corpus(2000, 1);
    {
        MixSource src(corpus, 16, 16, {9.0, 1.0}, 2, 4);
        Rng rng(31);
        int recon = 0;
        for (int i = 0; i < 10000; ++i)
            recon += (src.sample_task(rng) == TaskKind::reconstruction);
        EXPECT_GE(recon, 8800);
        EXPECT_LE(recon, 9200);
    }
    {
        MixSource src(corpus, 16, 16, {1.0, 9.0}, 2, 4);
        Rng rng(37);
        int recon = 0;
        for (int i = 0; i < 10000; ++i)
            recon += (src.sample_task(rng) == TaskKind::reconstruction);
        EXPECT_GE(recon, 800);
        EXPECT_LE(recon, 1200);
    }
}

TEST(RunStage, Stage2FreezesEncoderAndTrainsDecoder) {
    ModelConfig cfg = small_config();
    auto m = build_model<float>(cfg, 41);
    Rng crng(43);
    TokenSeq corpus = random_tokens(4000, cfg.vocab_size, crng);
    MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);

    const std::uint64_t enc_before = m.encoder_hash();
    const auto dec_before = param_snapshot(m, "decoder.");
    StagePlan plan;
    plan.stage = StageKind::stage2_frozen_encoder;
    plan.encoder_length = 16;
    plan.steps = 20;
    plan.batch_size = 2;
    plan.learning_rate = 1e-3;
    plan.seed = 7;
    auto log = run_stage(m, plan, src);
    EXPECT_EQ(log.size(), 20u);
    EXPECT_EQ(m.encoder_hash(), enc_before);
    EXPECT_NE(param_snapshot(m, "decoder."), dec_before);
}

TEST(RunStage, Stage1UpdatesEncoder) {
    ModelConfig cfg = small_config();
    auto m = build_model<float>(cfg, 47);
    Rng crng(53);
    TokenSeq corpus = random_tokens(4000, cfg.vocab_size, crng);
    MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
    const std::uint64_t enc_before = m.encoder_hash();
    StagePlan plan;
    plan.stage = StageKind::stage1_full;
    plan.steps = 5;
    plan.batch_size = 2;
    plan.learning_rate = 1e-3;
    plan.seed = 11;
    run_stage(m, plan, src);
    EXPECT_NE(m.encoder_hash(), enc_before);
}

TEST(RunStage, DeterministicTrajectory) {
    ModelConfig cfg = small_config();
    auto run = [&](int n_threads) {
        auto m = build_model<float>(cfg, 59);
        Rng crng(61);
        TokenSeq corpus = random_tokens(3000, cfg.vocab_size, crng);
        MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
        StagePlan plan;
        plan.steps = 8;
        plan.batch_size = 4;
        plan.learning_rate = 1e-3;
        plan.seed = 13;
        plan.n_threads = n_threads;
        auto log = run_stage(m, plan, src);
        std::vector<double> losses;
        for (const auto& r : log) losses.push_back(r.loss);
        return std::make_pair(losses, param_snapshot(m, "decoder."));
    };
    auto a = run(2), b = run(2);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(0, std::memcmp(a.second.data(), b.second.data(),
                             a.second.size() * sizeof(float)));
}

TEST(RunStage, ResumeFromStageCheckpointReproducesTrace) {
    namespace fs = std::filesystem;
    ModelConfig cfg = small_config();
    Rng crng(67);
    TokenSeq corpus = random_tokens(3000, cfg.vocab_size, crng);

    StagePlan s1;
    s1.steps = 6;
    s1.batch_size = 2;
    s1.learning_rate = 1e-3;
    s1.seed = 17;
    StagePlan s2 = s1;
    s2.stage = StageKind::stage2_frozen_encoder;
    s2.seed = 19;

    // uninterrupted: stage1 then stage2
    auto m1 = build_model<float>(cfg, 71);
    {
        MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
        run_stage(m1, s1, src);
    }
    std::vector<double> trace1;
    {
        MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
        for (const auto& r : run_stage(m1, s2, src)) trace1.push_back(r.loss);
    }

    // interrupted: stage1, checkpoint, reload, stage2
    auto m2 = build_model<float>(cfg, 71);
    {
        MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
        run_stage(m2, s1, src);
    }
    const std::string path = (fs::temp_directory_path() / "rcc_resume.bin").string();
    save_checkpoint(m2, path);
    auto m3 = load_checkpoint<float>(path);
    std::vector<double> trace2;
    {
        MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
        for (const auto& r : run_stage(m3, s2, src)) trace2.push_back(r.loss);
    }
    EXPECT_EQ(trace1, trace2);
    fs::remove(path);
}

TEST(RunStage, NonFiniteLossAbortsWithDiagnostics) {
    ModelConfig cfg = small_config();
    auto m = build_model<float>(cfg, 73);
    m.find("decoder.head.w")->tensor.fill(1e30f);
    Rng crng(79);
    TokenSeq corpus = random_tokens(2000, cfg.vocab_size, crng);
    MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {9.0, 1.0}, 2, 4);
    StagePlan plan;
    plan.steps = 2;
    plan.batch_size = 1;
    plan.seed = 23;
    try {
        run_stage(m, plan, src);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step"), std::string::npos);
        EXPECT_NE(msg.find("hash"), std::string::npos);
    }
}

TEST(RunStage, WritesJsonLinesLog) {
    ModelConfig cfg = small_config();
    auto m = build_model<float>(cfg, 83);
    Rng crng(89);
    TokenSeq corpus = random_tokens(2000, cfg.vocab_size, crng);
    MixSource src(corpus, cfg.encoder_window, cfg.decoder_budget, {1.0, 1.0}, 2, 4);
    StagePlan plan;
    plan.steps = 3;
    plan.batch_size = 1;
    plan.seed = 29;
    plan.learning_rate = 1e-4;
    std::ostringstream out;
    run_stage(m, plan, src, &out);
    std::istringstream in(out.str());
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("step").get<int>(), lines);
        EXPECT_TRUE(j.contains("task"));
        EXPECT_TRUE(j.contains("loss"));
        EXPECT_DOUBLE_EQ(j.at("lr").get<double>(), 1e-4);
        EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 29u);
        ++lines;
    }
    EXPECT_EQ(lines, 3);
}

TEST(TrainingExample, ValidationContracts) {
    TrainingExample ex;
    ex.task = TaskKind::continuation;
    ex.decoder_tokens = {1, 2, 3};
    ex.loss_mask = {0, 1};
    EXPECT_THROW(ex.validate(), ParamError);  // length mismatch
    ex.loss_mask = {0, 0, 0};
    EXPECT_THROW(ex.validate(), ParamError);  // nothing masked in
    ex.task = TaskKind::reconstruction;
    ex.loss_mask = {1, 1, 1};
    EXPECT_THROW(ex.validate(), ParamError);  // no leading prompt token
    ex.loss_mask = {0, 1, 1};
    ex.validate();
}

TEST(DatasetSource, WrapsWithReshuffle) {
    std::vector<TrainingExample> examples;
    for (int i = 0; i < 5; ++i) {
        TrainingExample ex;
        ex.task = TaskKind::instruction;
        ex.encoder_tokens = {static_cast<TokenId>(i)};
        ex.decoder_tokens = {0, 1};
        ex.loss_mask = {0, 1};
        examples.push_back(ex);
    }
    DatasetSource src(examples);
    Rng rng(41);
    std::vector<int> seen(5, 0);
    for (int b = 0; b < 4; ++b) {
        auto batch = src.next_batch(rng, 5);
        EXPECT_EQ(batch.task, TaskKind::instruction);
        for (const auto& ex : batch.examples) ++seen[static_cast<std::size_t>(ex.encoder_tokens[0])];
    }
    for (int c : seen) EXPECT_EQ(c, 4);  // every epoch covers every example once
}

// Command-line front end: data generation, staged training, evaluation and
// report checking. Every command is a pure function of (config, seed, input
// files); re-running a command overwrites its outputs with identical bytes.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "rcc/rcc.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Model = rcc::RccModel<float>;

std::uint64_t env_seed_fallback() {
    if (const char* env = std::getenv("RCC_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw rcc::ConfigError("RCC_SEED is not an integer");
        }
    }
    return 0;
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw rcc::IoError("cannot open " + path);
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw rcc::ConfigError(path + ": " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& content) {
    if (fs::path(path).has_parent_path())
        fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw rcc::IoError("cannot write " + path);
    out << content;
}

void write_json_file(const std::string& path, const json& j) {
    // generated text can contain arbitrary bytes; replace invalid UTF-8
    write_text_file(path,
                    j.dump(2, ' ', false, json::error_handler_t::replace) + "\n");
}

rcc::Tokenizer tokenizer_from_json(const json& j) {
    if (j.is_null()) return rcc::Tokenizer::byte_level();
    rcc::detail::reject_unknown_keys(j, {"mode", "alphabet"}, "tokenizer config");
    const std::string mode = j.value("mode", "byte");
    if (mode == "byte") return rcc::Tokenizer::byte_level();
    if (mode == "char-vocab") {
        if (!j.contains("alphabet"))
            throw rcc::ConfigError("char-vocab tokenizer needs \"alphabet\"");
        return rcc::Tokenizer::char_vocab(j.at("alphabet").get<std::string>());
    }
    throw rcc::ConfigError("tokenizer mode must be \"byte\" or \"char-vocab\"");
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct StageSpec {
    rcc::StagePlan plan;
    std::string source_type;  // corpus-mix | passkey | instruction
    int prompt_min = rcc::kPromptLenMin;
    int prompt_max = rcc::kPromptLenMax;
};

struct RunConfig {
    rcc::ModelConfig model;
    rcc::Tokenizer tokenizer = rcc::Tokenizer::byte_level();
    std::map<std::string, std::string> data;  // name -> path
    std::vector<StageSpec> stages;
    std::string output_dir;
    std::uint64_t seed = 0;
};

RunConfig parse_run_config(const json& j, std::optional<std::uint64_t> seed_override,
                           std::optional<std::string> outdir_override) {
    rcc::detail::reject_unknown_keys(
        j, {"model", "tokenizer", "data", "stages", "output_dir", "seed"}, "run config");
    RunConfig rc;
    if (!j.contains("model")) throw rcc::ConfigError("run config: missing \"model\"");
    rc.model = rcc::model_config_from_json(j.at("model"));
    rc.tokenizer = tokenizer_from_json(j.contains("tokenizer") ? j.at("tokenizer") : json());
    if (rc.tokenizer.vocab_size() != rc.model.vocab_size)
        throw rcc::ConfigError("run config: model vocab_size " +
                               std::to_string(rc.model.vocab_size) +
                               " does not match tokenizer vocab of " +
                               std::to_string(rc.tokenizer.vocab_size()));
    if (j.contains("data")) {
        for (auto it = j.at("data").begin(); it != j.at("data").end(); ++it)
            rc.data[it.key()] = it.value().get<std::string>();
    }
    rc.seed = seed_override ? *seed_override
                            : (j.contains("seed") ? j.at("seed").get<std::uint64_t>()
                                                  : env_seed_fallback());
    rc.output_dir = outdir_override ? *outdir_override
                                    : j.value("output_dir", std::string("rcc-run"));
    if (!j.contains("stages") || !j.at("stages").is_array() || j.at("stages").empty())
        throw rcc::ConfigError("run config: \"stages\" must be a non-empty array");
    std::size_t idx = 0;
    for (const auto& sj : j.at("stages")) {
        rcc::detail::reject_unknown_keys(
            sj,
            {"stage", "encoder_length", "steps", "batch_size", "learning_rate",
             "task_mix", "n_threads", "seed", "source", "prompt_min", "prompt_max"},
            "stage " + std::to_string(idx));
        StageSpec spec;
        spec.plan.stage =
            rcc::stage_kind_from_string(sj.value("stage", std::string("stage1_full")));
        spec.plan.encoder_length =
            rcc::detail::get_or(sj, "encoder_length", rc.model.encoder_window);
        spec.plan.steps = rcc::detail::get_or(sj, "steps", 100);
        spec.plan.batch_size = rcc::detail::get_or(sj, "batch_size", 8);
        spec.plan.learning_rate = rcc::detail::get_or(sj, "learning_rate", 1e-4);
        if (sj.contains("task_mix")) {
            const auto mix = sj.at("task_mix").get<std::vector<double>>();
            if (mix.size() != 2)
                throw rcc::ConfigError("stage task_mix must have two weights");
            spec.plan.task_mix = {mix[0], mix[1]};
        }
        spec.plan.n_threads = rcc::detail::get_or(sj, "n_threads", 1);
        spec.plan.seed = sj.contains("seed") ? sj.at("seed").get<std::uint64_t>()
                                             : rcc::derive_seed(rc.seed, "stage", idx);
        spec.source_type = sj.value("source", std::string("corpus-mix"));
        spec.prompt_min = rcc::detail::get_or(sj, "prompt_min", rcc::kPromptLenMin);
        spec.prompt_max = rcc::detail::get_or(sj, "prompt_max", rcc::kPromptLenMax);
        spec.plan.validate();
        rc.stages.push_back(std::move(spec));
        ++idx;
    }
    return rc;
}

std::unique_ptr<rcc::ExampleSource> make_source(const RunConfig& rc, const StageSpec& spec,
                                                std::uint64_t stage_seed) {
    auto need = [&rc](const std::string& key) -> const std::string& {
        auto it = rc.data.find(key);
        if (it == rc.data.end())
            throw rcc::ConfigError("run config: data." + key + " is required by a stage");
        if (!fs::exists(it->second))
            throw rcc::IoError("data file does not exist: " + it->second);
        return it->second;
    };
    if (spec.source_type == "corpus-mix") {
        rcc::TokenSeq corpus = rcc::load_corpus(need("corpus"));
        return std::make_unique<rcc::MixSource>(
            std::move(corpus), spec.plan.encoder_length, rc.model.decoder_budget,
            spec.plan.task_mix, spec.prompt_min, spec.prompt_max);
    }
    if (spec.source_type == "passkey") {
        auto samples = rcc::load_passkey_jsonl(need("passkey"));
        std::vector<rcc::TrainingExample> examples;
        examples.reserve(samples.size());
        for (const auto& s : samples)
            examples.push_back(rcc::make_passkey_example(s, rc.tokenizer));
        return std::make_unique<rcc::DatasetSource>(std::move(examples));
    }
    if (spec.source_type == "instruction") {
        auto items = rcc::load_qa_jsonl(need("qa"));
        std::vector<rcc::TrainingExample> examples;
        examples.reserve(items.size());
        for (std::size_t i = 0; i < items.size(); ++i) {
            rcc::Rng rng(rcc::derive_seed(stage_seed, "instruction", i));
            examples.push_back(rcc::make_instruction_example(
                rc.tokenizer.encode(items[i].context),
                rc.tokenizer.encode(items[i].instruction),
                rc.tokenizer.encode(items[i].answer), rc.tokenizer,
                spec.plan.encoder_length, rc.model.decoder_budget, rng));
        }
        return std::make_unique<rcc::DatasetSource>(std::move(examples));
    }
    throw rcc::ConfigError("stage source must be corpus-mix, passkey or instruction");
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed_override,
              std::optional<std::string> outdir_override, int from_stage,
              const std::string& init_ckpt) {
    RunConfig rc =
        parse_run_config(load_json_file(config_path), seed_override, outdir_override);
    fs::create_directories(rc.output_dir);

    Model model = init_ckpt.empty()
                      ? rcc::build_model<float>(rc.model, rcc::derive_seed(rc.seed, "model"))
                      : rcc::load_checkpoint<float>(init_ckpt);
    if (from_stage < 1 || from_stage > static_cast<int>(rc.stages.size()))
        throw rcc::ConfigError("--from-stage out of range");
    if (from_stage > 1 && init_ckpt.empty())
        throw rcc::ConfigError("--from-stage needs --init with the previous checkpoint");

    const std::string log_path = rc.output_dir + "/train.log.jsonl";
    std::ofstream log(log_path, from_stage > 1 ? std::ios::app : std::ios::trunc);
    if (!log) throw rcc::IoError("cannot write " + log_path);

    for (std::size_t si = static_cast<std::size_t>(from_stage) - 1; si < rc.stages.size();
         ++si) {
        const StageSpec& spec = rc.stages[si];
        std::cout << "stage " << (si + 1) << "/" << rc.stages.size() << " ("
                  << rcc::to_string(spec.plan.stage) << "): " << spec.plan.steps
                  << " steps, batch " << spec.plan.batch_size << ", lr "
                  << spec.plan.learning_rate << "\n";
        auto source = make_source(rc, spec, spec.plan.seed);
        const std::uint64_t enc_hash_before = model.encoder_hash();
        auto stage_log = rcc::run_stage(model, spec.plan, *source, &log);
        if (spec.plan.stage == rcc::StageKind::stage2_frozen_encoder &&
            model.encoder_hash() != enc_hash_before)
            throw rcc::NumericError("freeze contract violated in stage " +
                                    std::to_string(si + 1));
        if (!stage_log.empty())
            std::cout << "  final loss " << stage_log.back().loss << "\n";
        const std::string ckpt =
            rc.output_dir + "/stage" + std::to_string(si + 1) + ".ckpt";
        rcc::save_checkpoint(model, ckpt);
        std::cout << "  wrote " << ckpt << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval commands
// ---------------------------------------------------------------------------

void write_recon_reports(const std::string& prefix, const rcc::BleuReport& report) {
    write_json_file(prefix + ".json", rcc::to_json(report));
    std::string csv = "sample,position,score\n";
    for (int s = 0; s < report.n_samples; ++s)
        for (int p = 0; p < report.n_positions; ++p)
            csv += std::to_string(s) + "," + std::to_string(p) + "," +
                   std::to_string(report.per_prompt_scores[static_cast<std::size_t>(
                       s * report.n_positions + p)]) +
                   "\n";
    write_text_file(prefix + ".csv", csv);
}

int cmd_eval_recon(const std::string& ckpt, const std::string& corpus_path, int samples,
                   int positions, int step, int prompt_len, int target_len,
                   std::uint64_t seed, int threads, const std::string& out_prefix) {
    Model model = rcc::load_checkpoint<float>(ckpt);
    rcc::Tokenizer tok = rcc::Tokenizer::byte_level();
    rcc::TokenSeq corpus = rcc::load_corpus(corpus_path);
    const int window = model.cfg.encoder_window;
    if (static_cast<int>(corpus.size()) < window)
        throw rcc::ParamError("corpus shorter than one encoder window");
    rcc::Rng rng(rcc::derive_seed(seed, "recon-eval"));
    std::vector<rcc::TokenSeq> windows;
    for (int i = 0; i < samples; ++i) {
        const int start = rng.uniform_int(0, static_cast<int>(corpus.size()) - window);
        windows.emplace_back(corpus.begin() + start, corpus.begin() + start + window);
    }
    rcc::ReconProtocol protocol;
    protocol.window_len = window;
    protocol.n_positions = positions;
    protocol.position_step = step;
    protocol.prompt_len = prompt_len;
    protocol.target_len = target_len;
    auto report = rcc::reconstruction_eval(rcc::make_completer(model, tok.eot_id()),
                                           windows, protocol, threads);
    write_recon_reports(out_prefix, report);
    std::cout << "mean BLEU-4 " << report.mean << " over " << report.n_samples
              << " samples x " << report.n_positions << " positions\n";
    return 0;
}

int cmd_eval_passkey(const std::string& ckpt, const std::string& dataset_path, int limit,
                     int threads, const std::string& out_prefix) {
    Model model = rcc::load_checkpoint<float>(ckpt);
    rcc::Tokenizer tok = rcc::Tokenizer::byte_level();
    auto dataset = rcc::load_passkey_jsonl(dataset_path);
    if (limit > 0 && static_cast<int>(dataset.size()) > limit)
        dataset.resize(static_cast<std::size_t>(limit));
    auto report =
        rcc::passkey_eval(rcc::make_completer(model, tok.eot_id()), tok, dataset, threads);
    write_json_file(out_prefix + ".json", rcc::to_json(report));
    std::string csv = "key,predicted,correct\n";
    for (const auto& row : report.rows)
        csv += std::to_string(row.key) + "," +
               (row.predicted ? std::to_string(*row.predicted) : std::string("none")) +
               "," + (row.correct ? "1" : "0") + "\n";
    write_text_file(out_prefix + ".csv", csv);
    std::cout << "passkey accuracy " << report.accuracy << " on " << report.n
              << " samples\n";
    return 0;
}

int cmd_eval_qa(const std::string& ckpt, const std::string& dataset_path, int limit,
                std::uint64_t seed, int threads, const std::string& out_prefix) {
    Model model = rcc::load_checkpoint<float>(ckpt);
    rcc::Tokenizer tok = rcc::Tokenizer::byte_level();
    auto items = rcc::load_qa_jsonl(dataset_path);
    if (limit > 0 && static_cast<int>(items.size()) > limit)
        items.resize(static_cast<std::size_t>(limit));
    auto report =
        rcc::instruction_modes_eval(rcc::make_completer(model, tok.eot_id()), tok, items,
                                    model.cfg.encoder_window, seed, threads);
    write_json_file(out_prefix + ".json", rcc::to_json(report));
    std::string csv = "answer,f1_human,f1_recon,f1_compress,recon_structural\n";
    for (const auto& row : report.rows)
        csv += row.answer + "," + std::to_string(row.f1_human) + "," +
               std::to_string(row.f1_recon) + "," + std::to_string(row.f1_compress) +
               "," + (row.recon_structural ? "1" : "0") + "\n";
    write_text_file(out_prefix + ".csv", csv);
    std::cout << "token-F1  human " << report.f1_human << "  reconstruction "
              << report.f1_recon << "  compress " << report.f1_compress
              << "  structural " << report.recon_structural_rate << "\n";
    return 0;
}

int cmd_memory_report(const std::string& model_config_path, std::int64_t from,
                      std::int64_t to, std::int64_t step, int bytes, std::int64_t tail,
                      const std::string& out_prefix) {
    const rcc::ModelConfig cfg =
        rcc::model_config_from_json(load_json_file(model_config_path));
    std::string csv =
        "seq_len,baseline_bytes,rcc_bytes,baseline_kv,rcc_compressed_state,"
        "rcc_encoder_transient,rcc_decoder_kv,baseline_params_bytes,rcc_params_bytes,"
        "baseline_total_with_params,rcc_total_with_params\n";
    json rows = json::array();
    for (std::int64_t len = from; len <= to; len += step) {
        const auto r = rcc::memory_report(cfg, len, bytes, tail);
        csv += std::to_string(r.seq_len) + "," + std::to_string(r.baseline_bytes) + "," +
               std::to_string(r.rcc_bytes) + "," + std::to_string(r.baseline_kv) + "," +
               std::to_string(r.rcc_compressed_state) + "," +
               std::to_string(r.rcc_encoder_transient) + "," +
               std::to_string(r.rcc_decoder_kv) + "," +
               std::to_string(r.baseline_params_bytes) + "," +
               std::to_string(r.rcc_params_bytes) + "," +
               std::to_string(r.baseline_total_with_params()) + "," +
               std::to_string(r.rcc_total_with_params()) + "\n";
        rows.push_back(rcc::to_json(r));
    }
    const auto crossover = rcc::memory_crossover(cfg, bytes, tail, to, 1);
    json summary{{"rows", rows},
                 {"bytes_per_elem", bytes},
                 {"decoder_tail", tail},
                 {"slope_ratio",
                  rcc::rcc_slope(cfg, bytes) / rcc::baseline_slope(cfg, bytes)},
                 {"crossover", crossover ? json(*crossover) : json()}};
    write_json_file(out_prefix + ".json", summary);
    write_text_file(out_prefix + ".csv", csv);
    if (crossover)
        std::cout << "crossover at " << *crossover << " tokens\n";
    else
        std::cout << "no crossover up to " << to << " tokens\n";
    return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& context_file,
                 const std::string& prompt, int max_new) {
    Model model = rcc::load_checkpoint<float>(ckpt);
    rcc::Tokenizer tok = rcc::Tokenizer::byte_level();
    rcc::TokenSeq context;
    if (!context_file.empty()) {
        std::ifstream in(context_file, std::ios::binary);
        if (!in) throw rcc::IoError("cannot open " + context_file);
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        context = tok.encode(text);
    }
    rcc::NoGradGuard ng;
    auto state = rcc::compress_context(model, context);
    const rcc::TokenSeq prompt_toks = tok.encode(prompt);
    auto res = rcc::generate(model, state, prompt_toks, max_new, tok.eot_id());
    const rcc::TokenSeq gen(res.tokens.begin() +
                                static_cast<std::ptrdiff_t>(prompt_toks.size()),
                            res.tokens.end());
    std::cout << tok.decode(gen) << "\n";
    if (res.truncated) std::cerr << "(truncated at positional capacity)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

struct CheckState {
    int checked = 0;
    int failed = 0;

    void expect(const std::string& name, bool ok, const std::string& detail) {
        ++checked;
        if (!ok) ++failed;
        std::cout << (ok ? "PASS " : "FAIL ") << name << " (" << detail << ")\n";
    }
};

int cmd_check(const std::string& recon, double recon_min, const std::string& passkey,
              double passkey_min, const std::string& qa, double qa_gap,
              double qa_structural_min, const std::string& memory,
              std::int64_t crossover_max, double ratio_max) {
    CheckState st;
    if (!recon.empty()) {
        const json r = load_json_file(recon);
        const double mean = r.at("mean").get<double>();
        st.expect("reconstruction mean BLEU-4 >= " + std::to_string(recon_min),
                  mean >= recon_min, "mean=" + std::to_string(mean));
    }
    if (!passkey.empty()) {
        const json r = load_json_file(passkey);
        const double acc = r.at("accuracy").get<double>();
        st.expect("passkey accuracy >= " + std::to_string(passkey_min), acc >= passkey_min,
                  "accuracy=" + std::to_string(acc));
    }
    if (!qa.empty()) {
        const json r = load_json_file(qa);
        const double h = r.at("f1_human").get<double>();
        const double rec = r.at("f1_recon").get<double>();
        const double comp = r.at("f1_compress").get<double>();
        const double structural = r.at("recon_structural_rate").get<double>();
        st.expect("qa ordering human >= reconstruction > compress",
                  h >= rec && rec > comp,
                  "human=" + std::to_string(h) + " recon=" + std::to_string(rec) +
                      " compress=" + std::to_string(comp));
        st.expect("qa reconstruction - compress >= " + std::to_string(qa_gap),
                  rec - comp >= qa_gap, "gap=" + std::to_string(rec - comp));
        st.expect("qa structural rate >= " + std::to_string(qa_structural_min),
                  structural >= qa_structural_min,
                  "structural=" + std::to_string(structural));
    }
    if (!memory.empty()) {
        const json r = load_json_file(memory);
        const bool has_crossover = !r.at("crossover").is_null();
        const std::int64_t crossover =
            has_crossover ? r.at("crossover").get<std::int64_t>() : -1;
        st.expect("memory crossover exists", has_crossover,
                  has_crossover ? "at " + std::to_string(crossover) + " tokens" : "none");
        st.expect("memory crossover <= " + std::to_string(crossover_max),
                  has_crossover && crossover <= crossover_max,
                  "crossover=" + std::to_string(crossover));
        const double ratio = r.at("slope_ratio").get<double>();
        st.expect("memory asymptotic ratio <= " + std::to_string(ratio_max),
                  ratio <= ratio_max, "ratio=" + std::to_string(ratio));
    }
    if (st.checked == 0) {
        std::cerr << "check: no report files given\n";
        return 2;
    }
    std::cout << (st.failed ? "FAILED " : "OK ") << (st.checked - st.failed) << "/"
              << st.checked << " checks passed\n";
    return st.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"recurrent context compression: training, evaluation and reports"};
    app.require_subcommand(1);
    int exit_code = 0;

    try {
        // ---- gen-corpus ----
        auto* gen_corpus =
            app.add_subcommand("gen-corpus", "write a synthetic token corpus");
        std::string gc_kind = "markov-chars", gc_out;
        std::int64_t gc_size = 1000000;
        std::uint64_t gc_seed = env_seed_fallback();
        gen_corpus->add_option("--kind", gc_kind,
                               "markov-chars | random-tokens | template-facts");
        gen_corpus->add_option("--size", gc_size, "token count")->required();
        gen_corpus->add_option("--out", gc_out, "output file")->required();
        gen_corpus->add_option("--seed", gc_seed, "rng seed (default 0 / RCC_SEED)");
        gen_corpus->callback([&]() {
            rcc::Tokenizer tok = rcc::Tokenizer::byte_level();
            auto tokens = rcc::build_synthetic_corpus(
                rcc::corpus_kind_from_string(gc_kind), static_cast<std::size_t>(gc_size),
                tok, gc_seed);
            if (fs::path(gc_out).has_parent_path())
                fs::create_directories(fs::path(gc_out).parent_path());
            rcc::save_corpus(gc_out, tokens,
                             json{{"kind", gc_kind},
                                  {"mode", "byte"},
                                  {"vocab", tok.vocab_size()},
                                  {"size", gc_size},
                                  {"seed", gc_seed}});
            std::cout << "wrote " << gc_out << " (" << tokens.size() << " tokens)\n";
        });

        // ---- gen-passkey ----
        auto* gen_passkey = app.add_subcommand("gen-passkey", "write a passkey dataset");
        int gp_count = 100, gp_target = 512;
        std::string gp_out;
        std::uint64_t gp_seed = env_seed_fallback();
        gen_passkey->add_option("--count", gp_count)->required();
        gen_passkey->add_option("--target-len", gp_target, "target token length")
            ->required();
        gen_passkey->add_option("--out", gp_out)->required();
        gen_passkey->add_option("--seed", gp_seed);
        gen_passkey->callback([&]() {
            rcc::Tokenizer tok = rcc::Tokenizer::byte_level();
            rcc::Rng rng(gp_seed);
            auto samples = rcc::gen_passkey_dataset(gp_count, gp_target, tok, rng);
            if (fs::path(gp_out).has_parent_path())
                fs::create_directories(fs::path(gp_out).parent_path());
            rcc::save_passkey_jsonl(gp_out, samples);
            write_json_file(
                gp_out + ".meta.json",
                json{{"count", gp_count}, {"target_len", gp_target}, {"seed", gp_seed}});
            std::cout << "wrote " << gp_out << " (" << samples.size() << " samples)\n";
        });

        // ---- gen-qa ----
        auto* gen_qa = app.add_subcommand("gen-qa", "write a template-facts QA dataset");
        int gq_count = 500, gq_facts = 5;
        std::string gq_out;
        std::uint64_t gq_seed = env_seed_fallback();
        gen_qa->add_option("--count", gq_count)->required();
        gen_qa->add_option("--facts", gq_facts, "facts per context");
        gen_qa->add_option("--out", gq_out)->required();
        gen_qa->add_option("--seed", gq_seed);
        gen_qa->callback([&]() {
            rcc::Rng rng(gq_seed);
            auto items = rcc::gen_qa_dataset(gq_count, gq_facts, rng);
            if (fs::path(gq_out).has_parent_path())
                fs::create_directories(fs::path(gq_out).parent_path());
            rcc::save_qa_jsonl(gq_out, items);
            write_json_file(
                gq_out + ".meta.json",
                json{{"count", gq_count}, {"facts", gq_facts}, {"seed", gq_seed}});
            std::cout << "wrote " << gq_out << " (" << items.size() << " items)\n";
        });

        // ---- train ----
        auto* train = app.add_subcommand("train", "run the staged training schedule");
        std::string tr_config, tr_init, tr_outdir;
        int tr_from_stage = 1;
        std::uint64_t tr_seed = 0;
        auto* tr_seed_opt = train->add_option("--seed", tr_seed);
        train->add_option("--config", tr_config, "run config JSON")->required();
        train->add_option("--output-dir", tr_outdir);
        train->add_option("--from-stage", tr_from_stage, "1-based stage to start from");
        train->add_option("--init", tr_init, "checkpoint to start from");
        train->callback([&]() {
            exit_code = cmd_train(
                tr_config,
                tr_seed_opt->count() ? std::optional<std::uint64_t>(tr_seed) : std::nullopt,
                tr_outdir.empty() ? std::nullopt : std::optional<std::string>(tr_outdir),
                tr_from_stage, tr_init);
        });

        // ---- eval-recon ----
        auto* er = app.add_subcommand("eval-recon", "reconstruction BLEU-4 evaluation");
        std::string er_ckpt, er_corpus, er_out = "recon-report";
        int er_samples = 100, er_positions = 5, er_step = 300, er_prompt = 10,
            er_target = 500, er_threads = 2;
        std::uint64_t er_seed = env_seed_fallback();
        er->add_option("--ckpt", er_ckpt)->required();
        er->add_option("--corpus", er_corpus)->required();
        er->add_option("--samples", er_samples);
        er->add_option("--positions", er_positions);
        er->add_option("--step", er_step);
        er->add_option("--prompt-len", er_prompt);
        er->add_option("--target-len", er_target);
        er->add_option("--seed", er_seed);
        er->add_option("--threads", er_threads);
        er->add_option("--out", er_out, "report path prefix");
        er->callback([&]() {
            exit_code = cmd_eval_recon(er_ckpt, er_corpus, er_samples, er_positions,
                                       er_step, er_prompt, er_target, er_seed, er_threads,
                                       er_out);
        });

        // ---- eval-passkey ----
        auto* ep = app.add_subcommand("eval-passkey", "passkey retrieval accuracy");
        std::string ep_ckpt, ep_dataset, ep_out = "passkey-report";
        int ep_limit = 0, ep_threads = 2;
        ep->add_option("--ckpt", ep_ckpt)->required();
        ep->add_option("--dataset", ep_dataset)->required();
        ep->add_option("--limit", ep_limit, "evaluate only the first N samples");
        ep->add_option("--threads", ep_threads);
        ep->add_option("--out", ep_out);
        ep->callback([&]() {
            exit_code = cmd_eval_passkey(ep_ckpt, ep_dataset, ep_limit, ep_threads, ep_out);
        });

        // ---- eval-qa ----
        auto* eq = app.add_subcommand("eval-qa", "instruction-mode QA evaluation");
        std::string eq_ckpt, eq_dataset, eq_out = "qa-report";
        int eq_limit = 0, eq_threads = 2;
        std::uint64_t eq_seed = env_seed_fallback();
        eq->add_option("--ckpt", eq_ckpt)->required();
        eq->add_option("--dataset", eq_dataset)->required();
        eq->add_option("--limit", eq_limit);
        eq->add_option("--seed", eq_seed);
        eq->add_option("--threads", eq_threads);
        eq->add_option("--out", eq_out);
        eq->callback([&]() {
            exit_code =
                cmd_eval_qa(eq_ckpt, eq_dataset, eq_limit, eq_seed, eq_threads, eq_out);
        });

        // ---- memory-report ----
        auto* mr = app.add_subcommand("memory-report", "analytic memory curves");
        std::string mr_config, mr_out = "memory-report";
        std::int64_t mr_from = 1024, mr_to = 65536, mr_step = 1024, mr_tail = 512;
        int mr_bytes = 2;
        mr->add_option("--model-config", mr_config, "ModelConfig JSON file")->required();
        mr->add_option("--from", mr_from);
        mr->add_option("--to", mr_to);
        mr->add_option("--step", mr_step);
        mr->add_option("--bytes", mr_bytes, "bytes per element");
        mr->add_option("--tail", mr_tail, "decoder tail tokens");
        mr->add_option("--out", mr_out);
        mr->callback([&]() {
            exit_code = cmd_memory_report(mr_config, mr_from, mr_to, mr_step, mr_bytes,
                                          mr_tail, mr_out);
        });

        // ---- generate ----
        auto* gen =
            app.add_subcommand("generate", "single-shot completion from a checkpoint");
        std::string g_ckpt, g_context, g_prompt;
        int g_max_new = 64;
        gen->add_option("--ckpt", g_ckpt)->required();
        gen->add_option("--context-file", g_context,
                        "text file compressed by the encoder");
        gen->add_option("--prompt", g_prompt)->required();
        gen->add_option("--max-new", g_max_new);
        gen->callback(
            [&]() { exit_code = cmd_generate(g_ckpt, g_context, g_prompt, g_max_new); });

        // ---- check ----
        auto* check =
            app.add_subcommand("check", "compare report files against thresholds");
        std::string c_recon, c_passkey, c_qa, c_memory;
        double c_recon_min = 0.70, c_passkey_min = 0.95, c_qa_gap = 0.05,
               c_qa_structural = 0.90, c_ratio_max = 0.1;
        std::int64_t c_crossover_max = 16384;
        check->add_option("--recon", c_recon, "reconstruction report JSON");
        check->add_option("--recon-min", c_recon_min);
        check->add_option("--passkey", c_passkey, "passkey report JSON");
        check->add_option("--passkey-min", c_passkey_min);
        check->add_option("--qa", c_qa, "QA modes report JSON");
        check->add_option("--qa-gap", c_qa_gap);
        check->add_option("--qa-structural-min", c_qa_structural);
        check->add_option("--memory", c_memory, "memory report JSON");
        check->add_option("--crossover-max", c_crossover_max);
        check->add_option("--ratio-max", c_ratio_max);
        check->callback([&]() {
            exit_code = cmd_check(c_recon, c_recon_min, c_passkey, c_passkey_min, c_qa,
                                  c_qa_gap, c_qa_structural, c_memory, c_crossover_max,
                                  c_ratio_max);
        });

        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const rcc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}

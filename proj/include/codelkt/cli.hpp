#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "codelkt/adaptation.hpp"
#include "codelkt/baseline_dkt.hpp"
#include "codelkt/evaluation.hpp"
#include "codelkt/feedback.hpp"
#include "codelkt/kt_model.hpp"
#include "codelkt/llm_http.hpp"
#include "codelkt/service_http.hpp"
#include "codelkt/textualization.hpp"

namespace codelkt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

struct GlobalOptions {
    std::uint64_t seed = 0;
    std::string log_level = "info";
    std::string config;
};

/// Per-subcommand overrides read from the --config JSON, e.g. {"train": {...}, "dkt": {...}, "llm_client": {...}}.
inline nlohmann::json config_section(const GlobalOptions& g, const std::string& key) {
    if (g.config.empty()) return nlohmann::json::object();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(g.config));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::parse, g.config + ": " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::validation, g.config + ": config must be a JSON object");
    return j.contains(key) ? j[key] : nlohmann::json::object();
}

inline std::shared_ptr<spdlog::logger> make_logger(std::ostream& err, const std::string& level) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto log = std::make_shared<spdlog::logger>("codelkt", sink);
    log->set_pattern("[%l] %v");
    const auto lvl = spdlog::level::from_str(level);
    if (lvl == spdlog::level::off && level != "off") throw Error(ErrorKind::usage, "unknown --log-level '" + level + "'");
    log->set_level(lvl);
    return log;
}

inline LlmClient make_llm(const GlobalOptions& g, const std::string& spec, double temperature) {
    auto cfg = LlmClientConfig::from_json(config_section(g, "llm_client"), {});
    cfg.temperature = temperature;
    return LlmClient(cfg, make_backend(spec, cfg));
}

inline std::string dataset_tag_of(const std::string& tag, const std::filesystem::path& data) {
    return tag.empty() ? data.stem().string() : tag;
}

/// The default template root sits next to the sources; --templates overrides it.
inline std::filesystem::path default_template_root() {
#ifdef CODELKT_TEMPLATE_DIR
    return CODELKT_TEMPLATE_DIR;
#else
    return "templates";
#endif
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Language-model knowledge tracing and tutoring feedback toolkit", "codelkt"};
    app.fallthrough();
    app.require_subcommand(1);

    GlobalOptions g;
    app.add_option("--seed", g.seed, "Seed for every randomized component");
    app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off");
    app.add_option("--config", g.config, "JSON config file (for serve: the service config)");

    // ingest
    struct {
        std::string in, format = "canonical_jsonl", out, mapping;
    } ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Parse a raw log into canonical JSONL");
    c_ingest->add_option("--in", ingest.in)->required();
    c_ingest->add_option("--format", ingest.format, "canonical_jsonl|csedm_csv")->required();
    c_ingest->add_option("--out", ingest.out)->required();
    c_ingest->add_option("--mapping", ingest.mapping, "JSON column mapping for CSV input");

    // enrich
    struct {
        std::string in, out, templates, llm = "http", cache, checkpoint;
        std::size_t max_in_flight = 4;
    } enrich;
    auto* c_enrich = app.add_subcommand("enrich", "Generate question and KC texts with an LLM");
    c_enrich->add_option("--in", enrich.in)->required();
    c_enrich->add_option("--out", enrich.out)->required();
    c_enrich->add_option("--templates", enrich.templates, "Directory with question_v1.txt and kc_v1.txt");
    c_enrich->add_option("--llm", enrich.llm, "http or stub:<fixture-dir>");
    c_enrich->add_option("--cache", enrich.cache, "Content-addressed cache directory");
    c_enrich->add_option("--checkpoint", enrich.checkpoint, "Resume file for partial runs");
    c_enrich->add_option("--max-in-flight", enrich.max_in_flight);

    // train
    struct {
        std::string data, encoder = "toy", out, dataset_tag, model_tag;
        std::size_t folds = 5;
        std::optional<int> max_epochs;
    } tr;
    auto* c_train = app.add_subcommand("train", "k-fold fine-tuning of the text-encoder KT model");
    c_train->add_option("--data", tr.data)->required();
    c_train->add_option("--encoder", tr.encoder, "Registered encoder name or saved encoder directory");
    c_train->add_option("--folds", tr.folds);
    c_train->add_option("--out", tr.out)->required();
    c_train->add_option("--dataset-tag", tr.dataset_tag);
    c_train->add_option("--model-tag", tr.model_tag);
    c_train->add_option("--max-epochs", tr.max_epochs);

    // adapt
    struct {
        std::string mode, base = "toy", corpus, source_data, out;
    } adapt;
    auto* c_adapt = app.add_subcommand("adapt", "Domain- or task-adaptive pretraining of an encoder");
    c_adapt->add_option("--mode", adapt.mode, "dapt|tapt")->required()->check(CLI::IsMember({"dapt", "tapt"}));
    c_adapt->add_option("--base", adapt.base);
    auto* o_corpus = c_adapt->add_option("--corpus", adapt.corpus);
    auto* o_source = c_adapt->add_option("--source-data", adapt.source_data);
    o_corpus->excludes(o_source);
    c_adapt->add_option("--out", adapt.out)->required();

    // baseline-dkt
    struct {
        std::string data, out, dataset_tag;
        std::size_t folds = 5;
        std::optional<int> max_epochs;
    } dkt;
    auto* c_dkt = app.add_subcommand("baseline-dkt", "k-fold DKT baseline on the same splits");
    c_dkt->add_option("--data", dkt.data)->required();
    c_dkt->add_option("--folds", dkt.folds);
    c_dkt->add_option("--out", dkt.out)->required();
    c_dkt->add_option("--dataset-tag", dkt.dataset_tag);
    c_dkt->add_option("--max-epochs", dkt.max_epochs);

    // evaluate
    struct {
        std::vector<std::string> runs;
        std::string out, csv;
        bool json = false;
    } eval;
    auto* c_eval = app.add_subcommand("evaluate", "Aggregate run directories into a report table");
    c_eval->add_option("--runs", eval.runs)->required()->expected(1, -1);
    c_eval->add_option("--out", eval.out)->required();
    c_eval->add_option("--csv", eval.csv);
    c_eval->add_flag("--json", eval.json, "Print the table as JSON on stdout");

    // feedback
    struct {
        std::string mode, comparison, context, templates, llm = "http";
        bool dry_run = false, json = false;
    } fb;
    auto* c_fb = app.add_subcommand("feedback", "Render a feedback prompt and query the LLM");
    c_fb->add_option("--mode", fb.mode)->required()->check(CLI::IsMember({"correctness", "hint"}));
    c_fb->add_option("--comparison", fb.comparison)->required()->check(CLI::IsMember({"c1", "c2", "c3"}));
    c_fb->add_option("--context", fb.context)->required();
    c_fb->add_option("--templates", fb.templates);
    c_fb->add_option("--llm", fb.llm, "http or stub:<fixture-dir>");
    c_fb->add_flag("--dry-run", fb.dry_run, "Print the prompt without calling the LLM");
    c_fb->add_flag("--json", fb.json, "Print the parsed bundle as JSON");

    // serve
    struct {
        int port = 8080;
        std::string llm;
    } serve;
    auto* c_serve = app.add_subcommand("serve", "Run the tutoring HTTP service");
    c_serve->add_option("--port", serve.port);
    c_serve->add_option("--llm", serve.llm, "http or stub:<fixture-dir>; overrides the config");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        const auto subs = app.get_subcommands();
        out << (subs.empty() ? app.help() : subs.front()->help());
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        const auto subs = app.get_subcommands();
        err << "error: " << e.what() << "\n" << (subs.empty() ? app.help() : subs.front()->help());
        return kExitUsage;
    }

    try {
        auto log = make_logger(err, g.log_level);

        if (c_ingest->parsed()) {
            CsvMapping mapping = CsvMapping::csedm_default();
            if (!ingest.mapping.empty()) mapping = CsvMapping::from_json(nlohmann::json::parse(io::read_file(ingest.mapping)));
            const auto data = load_dataset(ingest.in, parse_dataset_format(ingest.format), mapping);
            save_dataset(data, ingest.out);
            log->info("ingested {} interactions from {} students", data.interaction_count(), data.students().size());
        } else if (c_enrich->parsed()) {
            std::ifstream in(enrich.in);
            if (!in) throw Error(ErrorKind::io, "cannot open " + enrich.in);
            const auto data = parse_canonical_jsonl(in);
            std::filesystem::path tdir = enrich.templates.empty() ? default_template_root() / "enrichment" : std::filesystem::path(enrich.templates);
            if (!std::filesystem::exists(tdir / "question_v1.txt") && std::filesystem::exists(tdir / "enrichment")) {
                tdir /= "enrichment";
            }
            auto llm = make_llm(g, enrich.llm, 0.0);
            EnrichmentCache cache = enrich.cache.empty() ? EnrichmentCache() : EnrichmentCache(enrich.cache);
            EnrichOptions opts;
            opts.max_in_flight = enrich.max_in_flight;
            if (!enrich.checkpoint.empty()) opts.checkpoint_path = enrich.checkpoint;
            const auto enriched = enrich_log(data, EnrichmentTemplates::load(tdir), llm, cache, opts);
            save_dataset(enriched, enrich.out);
            log->info("enriched {} interactions", enriched.interaction_count());
        } else if (c_train->parsed()) {
            std::ifstream in(tr.data);
            if (!in) throw Error(ErrorKind::io, "cannot open " + tr.data);
            const auto data = parse_canonical_jsonl(in);
            auto cfg = train_config_from_json(config_section(g, "train"));
            cfg.seed = g.seed;
            if (tr.max_epochs) cfg.max_epochs = *tr.max_epochs;
            cfg.validate();
            const auto folds = split_kfold(data, tr.folds, g.seed);
            std::size_t fold_no = 0;
            const EncoderFactory factory = [&]() { return resolve_encoder(tr.encoder, derive_seed(g.seed, 0x656e63ULL + fold_no++)); };
            const auto runs = train(data, folds, factory, cfg, [&](std::size_t f, const EpochRecord& r) {
                log->debug("fold {} epoch {} train_loss {:.6f} selection {:.6f}", f, r.epoch, r.train_loss, r.selection_score);
            });
            const std::string model_tag = tr.model_tag.empty() ? "LKT(" + tr.encoder + ")" : tr.model_tag;
            save_run(tr.out, runs, cfg, model_tag, dataset_tag_of(tr.dataset_tag, tr.data),
                     {{"encoder", tr.encoder}, {"folds", tr.folds}, {"seed", g.seed}});
            for (const auto& r : runs) log->info("fold {}: AUC {:.4f} ACC {:.4f}", r.fold_index, r.metrics.auc, r.metrics.acc);
        } else if (c_adapt->parsed()) {
            auto base = resolve_encoder(adapt.base, g.seed);
            std::filesystem::create_directories(adapt.out);
            if (adapt.mode == "dapt") {
                if (adapt.corpus.empty()) throw Error(ErrorKind::usage, "--mode dapt needs --corpus");
                DaptConfig dc;
                const auto j = config_section(g, "dapt");
                dc.epochs = j.value("epochs", dc.epochs);
                dc.learning_rate = j.value("learning_rate", dc.learning_rate);
                dc.weight_decay = j.value("weight_decay", dc.weight_decay);
                dc.window = j.value("window", dc.window);
                dc.batch_windows = j.value("batch_windows", dc.batch_windows);
                dc.mask_probability = j.value("mask_probability", dc.mask_probability);
                dc.seed = g.seed;
                auto result = dapt(*base, load_corpus(adapt.corpus), dc);
                result.encoder->save(adapt.out);
                io::write_file_atomic(std::filesystem::path(adapt.out) / "adapt.json",
                                      nlohmann::ordered_json{{"mode", "dapt"}, {"epoch_losses", result.epoch_losses}}.dump(2) + "\n");
            } else {
                if (adapt.source_data.empty()) throw Error(ErrorKind::usage, "--mode tapt needs --source-data");
                std::ifstream in(adapt.source_data);
                if (!in) throw Error(ErrorKind::io, "cannot open " + adapt.source_data);
                auto cfg = train_config_from_json(config_section(g, "train"));
                cfg.seed = g.seed;
                auto result = tapt(*base, parse_canonical_jsonl(in), cfg, std::filesystem::path(adapt.source_data).stem().string());
                result.encoder->save(adapt.out);
                io::write_file_atomic(std::filesystem::path(adapt.out) / "adapt.json",
                                      nlohmann::ordered_json{{"mode", "tapt"}, {"history", to_json(result.history)}}.dump(2) + "\n");
            }
            log->info("adapted encoder written to {}", adapt.out);
        } else if (c_dkt->parsed()) {
            std::ifstream in(dkt.data);
            if (!in) throw Error(ErrorKind::io, "cannot open " + dkt.data);
            const auto data = parse_canonical_jsonl(in);
            auto cfg = dkt_config_from_json(config_section(g, "dkt"));
            cfg.seed = g.seed;
            if (dkt.max_epochs) cfg.max_epochs = *dkt.max_epochs;
            cfg.validate();
            const auto runs = dkt_train_eval(data, split_kfold(data, dkt.folds, g.seed), cfg);
            save_dkt_run(dkt.out, runs, cfg, dataset_tag_of(dkt.dataset_tag, dkt.data));
            for (const auto& r : runs) log->info("fold {}: AUC {:.4f} ACC {:.4f}", r.fold_index, r.metrics.auc, r.metrics.acc);
        } else if (c_eval->parsed()) {
            std::vector<std::filesystem::path> dirs(eval.runs.begin(), eval.runs.end());
            const auto table = load_runs(dirs);
            io::write_file_atomic(eval.out, table.markdown());
            if (!eval.csv.empty()) io::write_file_atomic(eval.csv, table.csv());
            if (eval.json) out << table.json().dump(2) << "\n";
            log->info("report written to {}", eval.out);
        } else if (c_fb->parsed()) {
            const auto mode = parse_feedback_mode(fb.mode);
            const auto cmp = parse_comparison(fb.comparison);
            nlohmann::json cj;
            try {
                cj = nlohmann::json::parse(io::read_file(fb.context));
            } catch (const nlohmann::json::parse_error& e) {
                throw Error(ErrorKind::parse, fb.context + ": " + e.what());
            }
            const auto ctx = learner_context_from_json(cj);
            const auto templates = FeedbackTemplates::load(fb.templates.empty() ? default_template_root() : std::filesystem::path(fb.templates));
            const auto prompt = build_feedback_prompt(ctx, mode, cmp, templates);
            if (fb.dry_run) {
                out << prompt;
                return kExitOk;
            }
            auto llm = make_llm(g, fb.llm, kFeedbackTemperature);
            const auto raw = generate_feedback(prompt, llm);
            const auto bundle = parse_feedback(raw, mode, ctx.correctness, cmp);
            if (fb.json) {
                out << to_json(bundle).dump(2) << "\n";
            } else {
                out << format_components(bundle) << "\n";
            }
            if (bundle.protocol_violation) log->warn("response contains a section not allowed for this context");
        } else if (c_serve->parsed()) {
            if (g.config.empty()) throw Error(ErrorKind::usage, "serve needs --config <file>");
            auto sc = ServeConfig::load(g.config);
            if (!serve.llm.empty()) sc.llm_spec = serve.llm;
            sc.service.seed = g.seed;
            auto service = make_service(sc, default_template_root());
            TutorHttpServer http(service, sc.static_dir);
            if (!http.bind(sc.host, serve.port)) throw Error(ErrorKind::io, "cannot bind " + sc.host + ":" + std::to_string(serve.port));
            log->info("listening on http://{}:{}", sc.host, serve.port);
            http.listen_after_bind();
        }
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what();
        if (!e.detail().empty()) err << " (" << e.detail() << ")";
        err << "\n";
        if (e.kind() == ErrorKind::usage) {
            for (auto* sub : app.get_subcommands()) err << sub->help();
            return kExitUsage;
        }
        return kExitDomain;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitDomain;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitDomain;
    }
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args, out, err);
}

}  // namespace codelkt::cli

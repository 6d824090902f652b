// evdrank command-line driver. Subcommands mirror the pipeline stages:
//   build-kb | build-dqr | train-rewriter | finetune-retriever | evaluate |
//   kb-edit | gen-corpus

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "evdrank/pipeline.hpp"
#include "evdrank/synth.hpp"

using namespace evdrank;

int main(int argc, char** argv) {
    CLI::App app{"entity-visual-description enhanced retrieval pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> backend_override;
    app.add_option("--config", config_path, "path to key=value config file");
    app.add_option("--seed", seed_override, "override config seed");
    app.add_option("--backend", backend_override, "override backend: mock|remote")
        ->check(CLI::IsMember({"mock", "remote"}));

    auto* build_kb = app.add_subcommand("build-kb", "construct the description knowledge base");
    auto* build_dqr = app.add_subcommand("build-dqr", "distill the rewrite training dataset");

    auto* train_rw = app.add_subcommand("train-rewriter", "train the query rewriter");
    std::string phase = "warmup";
    train_rw->add_option("--phase", phase, "warmup|align")
        ->check(CLI::IsMember({"warmup", "align"}));

    auto* finetune = app.add_subcommand("finetune-retriever", "fine-tune the dual encoder");

    auto* evaluate = app.add_subcommand("evaluate", "score the test corpus");
    std::string strategy_flag;
    evaluate->add_option("--strategy", strategy_flag,
                         "none|det_style|des_style|evd_rewriter (default from config)");

    auto* kb_edit = app.add_subcommand("kb-edit", "inject or correct entity knowledge");
    KbEditRequest edit;
    std::string edit_tag;
    kb_edit->add_option("--op", edit.op, "inject|add-sense")
        ->required()
        ->check(CLI::IsMember({"inject", "add-sense"}));
    kb_edit->add_option("--entity", edit.entity, "entity surface form")->required();
    kb_edit->add_option("--sense-tag", edit_tag, "sense tag (required for add-sense)");
    kb_edit->add_option("--desc", edit.descriptions, "description (repeatable)")->required();
    kb_edit->add_option("--retag-default", edit.retag_existing_as,
                        "tag given to a previously untagged entry when adding its first sense");

    auto* gen = app.add_subcommand("gen-corpus", "write the bundled synthetic corpus");
    std::string out_dir = "data";
    std::uint64_t desc_seed = 1337;
    std::size_t gen_h = 5;
    gen->add_option("--out-dir", out_dir, "output directory");
    gen->add_option("--desc-seed", desc_seed, "description seed (must match kb_seed)");
    gen->add_option("--descs-per-entity", gen_h, "descriptions per entity");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            SynthSpec spec;
            spec.desc_seed = desc_seed;
            spec.h = gen_h;
            const auto corpus = make_synth_corpus(spec);
            std::filesystem::create_directories(out_dir);
            save_corpus(corpus.train, out_dir + "/corpus_train.jsonl");
            save_corpus(corpus.test, out_dir + "/corpus_test.jsonl");
            std::vector<CorpusItem> all = corpus.train;
            all.insert(all.end(), corpus.test.begin(), corpus.test.end());
            save_corpus(all, out_dir + "/corpus_all.jsonl");
            std::cout << "wrote " << corpus.train.size() << " train / " << corpus.test.size()
                      << " test items under " << out_dir << "\n";
            return 0;
        }

        PipelineConfig config =
            config_path.empty() ? PipelineConfig{} : load_config(config_path);
        if (seed_override) config.seed = *seed_override;
        if (backend_override)
            config.backend =
                (*backend_override == "remote") ? BackendKind::remote : BackendKind::mock;

        if (build_kb->parsed()) {
            const auto stats = cmd_build_kb(config);
            std::cout << "captions=" << stats.captions
                      << " entities_extracted=" << stats.entities_extracted
                      << " entities_kept=" << stats.entities_kept << " senses=" << stats.senses
                      << " kb=" << config.kb_path << "\n";
        } else if (build_dqr->parsed()) {
            const auto report = cmd_build_dqr(config);
            std::cout << "attempted=" << report.attempted << " kept=" << report.kept
                      << " skipped_no_entity=" << report.skipped_no_entity
                      << " skipped_no_improver=" << report.skipped_no_improver
                      << " dqr=" << config.dqr_path << "\n";
        } else if (train_rw->parsed()) {
            cmd_train_rewriter(config,
                               phase == "warmup" ? TrainPhase::warmup : TrainPhase::align);
            std::cout << "phase=" << phase << " policy=" << config.policy_checkpoint << "\n";
        } else if (finetune->parsed()) {
            cmd_finetune_retriever(config);
            std::cout << "encoder=" << config.encoder_checkpoint << "\n";
        } else if (evaluate->parsed()) {
            const Strategy strategy =
                strategy_from_string(strategy_flag.empty() ? config.strategy : strategy_flag);
            const auto report = cmd_evaluate(config, strategy);
            std::cout << report.to_text();
        } else if (kb_edit->parsed()) {
            if (!edit_tag.empty()) edit.sense_tag = edit_tag;
            cmd_kb_edit(config, edit);
            std::cout << "op=" << edit.op << " entity=" << edit.entity
                      << " kb=" << config.kb_path << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aimv2/config.hpp"
#include "aimv2/data.hpp"
#include "aimv2/objective.hpp"
#include "aimv2/probe.hpp"
#include "aimv2/trainer.hpp"

namespace aimv2 {

// Exit codes are part of the interface: 0 success, 1 validation failure,
// 2 runtime failure.
constexpr int exit_ok = 0;
constexpr int exit_validation = 1;
constexpr int exit_runtime = 2;

namespace cli_detail {

inline int cmd_train(const std::string& config_path, const std::string& resume,
                     bool high_res_adapt, const std::string& dump_dir, std::ostream& out) {
    const RunConfig cfg = load_config(config_path);
    out << "seed=" << cfg.seed << " config_hash=" << config_hash(cfg) << "\n";
    TrainOptions opts;
    opts.resume_path = resume;
    opts.high_res_adapt = high_res_adapt;
    opts.dump_dir = dump_dir;
    const TrainResult result = train(cfg, opts);
    if (!result.warning.empty()) {
        out << "warning: " << result.warning << "\n";
    }
    out << "trained " << result.steps_run << " steps"
        << "  pixel_loss=" << result.final_report.pixel_loss
        << "  text_loss=" << result.final_report.text_loss
        << "  total=" << result.final_report.total << "\n";
    out << "checkpoint: " << result.checkpoint_path << "\n";
    out << "metrics: " << result.metrics_path << "\n";
    return exit_ok;
}

inline int cmd_probe(const std::string& config_path, const std::string& ckpt_path,
                     const std::string& report_path, std::ostream& out) {
    const RunConfig cfg = load_config(config_path);
    out << "seed=" << cfg.seed << " config_hash=" << config_hash(cfg) << "\n";

    TrainState state;
    state.init(cfg, detail::max_decoder_positions(cfg));
    state.restore(load_checkpoint(ckpt_path));

    ProbeTaskSpec task;
    task.canvas = cfg.data.image_size >= 16 ? cfg.data.image_size : 16;
    task.data_seed = static_cast<uint64_t>(cfg.seed);
    const uint32_t before = encoder_checksum(state.encoder);
    const ProbeDataset data = build_probe_dataset(state.encoder, cfg.model, task);

    ProbeHparams hp;
    hp.seed = static_cast<uint64_t>(cfg.seed);
    const ProbeResult result = train_probe(data, cfg.model.d_enc, cfg.model.heads_enc, hp);
    const uint32_t after = encoder_checksum(state.encoder);
    if (before != after) {
        throw std::runtime_error("probe training modified the frozen encoder");
    }

    out << "frozen encoder checksum: " << before << " (unchanged)\n";
    out << std::setw(10) << "lr" << std::setw(14) << "weight_decay" << std::setw(10) << "train"
        << std::setw(10) << "eval" << "\n";
    for (const auto& e : result.sweep) {
        out << std::setw(10) << e.lr << std::setw(14) << e.weight_decay << std::setw(10)
            << e.train_accuracy << std::setw(10) << e.eval_accuracy << "\n";
    }
    out << "best: lr=" << result.best.lr << " wd=" << result.best.weight_decay
        << " eval_accuracy=" << result.best.eval_accuracy << "\n";

    const std::string report_file =
        report_path.empty()
            ? (std::filesystem::path(cfg.checkpoint_dir) / "probe_report.json").string()
            : report_path;
    nlohmann::json j;
    j["schema_version"] = 1;
    j["sweep"] = nlohmann::json::array();
    for (const auto& e : result.sweep) {
        j["sweep"].push_back({{"lr", e.lr},
                              {"weight_decay", e.weight_decay},
                              {"train_accuracy", e.train_accuracy},
                              {"eval_accuracy", e.eval_accuracy}});
    }
    j["best"] = {{"lr", result.best.lr},
                 {"weight_decay", result.best.weight_decay},
                 {"eval_accuracy", result.best.eval_accuracy}};
    std::filesystem::create_directories(
        std::filesystem::path(report_file).parent_path().empty()
            ? "."
            : std::filesystem::path(report_file).parent_path().string());
    std::ofstream rf(report_file);
    rf << j.dump(2) << "\n";
    out << "report: " << report_file << "\n";
    return exit_ok;
}

inline int cmd_grad_check(const std::string& preset, double tol, uint64_t seed,
                          std::ostream& out) {
    const ModelConfig model = preset_model(preset);
    const int64_t image_size = 2 * model.patch_size; // 2x2 grid: I = 4
    const GradCheckReport report = model_grad_check(model, image_size, 3, seed, 1e-5, tol);
    out << "seed=" << seed << " preset=" << preset << " elements=" << report.elements_checked
        << "\n";
    out << "max relative error: " << report.max_rel_err << " (worst: " << report.worst_param
        << ")\n";
    out << (report.pass() ? "PASS" : "FAIL") << " (tol " << tol << ")\n";
    return report.pass() ? exit_ok : exit_runtime;
}

inline int cmd_plan_batches(int64_t budget, int64_t draws, uint64_t seed, int64_t n_lo,
                            int64_t n_hi, std::ostream& out) {
    out << "seed=" << seed << " budget=" << budget << "\n";
    Rng rng(seed);
    for (int64_t i = 0; i < draws; ++i) {
        const BatchPlan plan = plan_native_batch(budget, rng, n_lo, n_hi);
        out << "n=" << plan.n << " A=" << plan.area << " B=" << plan.batch_size
            << " A*B=" << plan.area * plan.batch_size << "\n";
    }
    return exit_ok;
}

inline int cmd_sample_mixture(const std::string& manifest_path, int64_t draws, uint64_t seed,
                              std::ostream& out) {
    const std::vector<MixtureSource> sources = load_manifest(manifest_path);
    out << "seed=" << seed << " sources=" << sources.size() << "\n";
    Rng rng(seed);
    std::vector<int64_t> counts(sources.size(), 0);
    for (int64_t i = 0; i < draws; ++i) {
        counts[static_cast<size_t>(sample_source(sources, rng))] += 1;
    }
    for (size_t i = 0; i < sources.size(); ++i) {
        out << sources[i].name << " prob=" << sources[i].prob << " draws=" << counts[i]
            << " freq=" << static_cast<double>(counts[i]) / static_cast<double>(draws) << "\n";
    }
    return exit_ok;
}

} // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"AIMv2-style multimodal autoregressive pre-training kit"};
    app.require_subcommand(1);

    std::string config_path, resume_path, dump_dir;
    bool high_res_adapt = false;
    auto* train_cmd = app.add_subcommand("train", "Pre-train on synthetic captioned scenes");
    train_cmd->add_option("--config", config_path, "Run configuration file")->required();
    train_cmd->add_option("--resume", resume_path, "Checkpoint to resume from");
    train_cmd->add_flag("--high-res-adapt", high_res_adapt,
                        "High-resolution adaptation: forces weight decay 0 and a larger canvas");
    train_cmd->add_option("--dump-data", dump_dir,
                          "Dump the first batch as .ppm/.pgm files with caption sidecars");

    std::string probe_config, probe_ckpt, probe_report;
    auto* probe_cmd = app.add_subcommand("probe", "Attentive probe on a frozen encoder");
    probe_cmd->add_option("--config", probe_config, "Run configuration file")->required();
    probe_cmd->add_option("--checkpoint", probe_ckpt, "Checkpoint with encoder weights")
        ->required();
    probe_cmd->add_option("--report", probe_report, "Where to write the sweep report JSON");

    std::string gc_preset = "desk_tiny";
    double gc_tol = 1e-5;
    uint64_t gc_seed = 0;
    auto* gc_cmd = app.add_subcommand("grad-check",
                                      "Finite-difference check of the full forward pass");
    gc_cmd->add_option("--preset", gc_preset, "Model preset (default desk_tiny)");
    gc_cmd->add_option("--tol", gc_tol, "Max relative error tolerance (default 1e-5)");
    gc_cmd->add_option("--seed", gc_seed, "Seed for parameters and the synthetic batch");

    int64_t pb_budget = 0, pb_draws = 0, pb_n_lo = 7, pb_n_hi = 12;
    uint64_t pb_seed = 0;
    auto* pb_cmd = app.add_subcommand("plan-batches", "Sample native-resolution batch plans");
    pb_cmd->add_option("--budget", pb_budget, "Patch budget C (power of two)")->required();
    pb_cmd->add_option("--draws", pb_draws, "Number of plans to sample")->required();
    pb_cmd->add_option("--seed", pb_seed, "Sampler seed");
    pb_cmd->add_option("--n-lo", pb_n_lo, "Lower exponent of the area range (default 7)");
    pb_cmd->add_option("--n-hi", pb_n_hi, "Upper exponent of the area range (default 12)");

    std::string mix_manifest;
    int64_t mix_draws = 0;
    uint64_t mix_seed = 0;
    auto* mix_cmd = app.add_subcommand("sample-mixture", "Draw from a dataset mixture manifest");
    mix_cmd->add_option("--manifest", mix_manifest, "Mixture manifest file")->required();
    mix_cmd->add_option("--draws", mix_draws, "Number of draws")->required();
    mix_cmd->add_option("--seed", mix_seed, "Sampler seed");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        const auto parsed = app.get_subcommands();
        out << (parsed.empty() ? app.help() : parsed.front()->help());
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        err << app.help();
        return exit_validation;
    }

    try {
        if (train_cmd->parsed()) {
            return cli_detail::cmd_train(config_path, resume_path, high_res_adapt, dump_dir, out);
        }
        if (probe_cmd->parsed()) {
            return cli_detail::cmd_probe(probe_config, probe_ckpt, probe_report, out);
        }
        if (gc_cmd->parsed()) {
            return cli_detail::cmd_grad_check(gc_preset, gc_tol, gc_seed, out);
        }
        if (pb_cmd->parsed()) {
            return cli_detail::cmd_plan_batches(pb_budget, pb_draws, pb_seed, pb_n_lo, pb_n_hi,
                                                out);
        }
        if (mix_cmd->parsed()) {
            return cli_detail::cmd_sample_mixture(mix_manifest, mix_draws, mix_seed, out);
        }
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return exit_validation;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::invalid_argument& e) {
        // bad user-supplied values (budgets, ranges, ids)
        err << "error: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    err << "no command\n";
    return exit_validation;
}

} // namespace aimv2

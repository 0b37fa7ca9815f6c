#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lodet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lodet;

namespace {

pipe::ExperimentPlan plan_from(const std::string& config_path) {
    return config_path.empty() ? pipe::default_plan() : pipe::load_plan(config_path);
}

int cmd_pretrain(const std::string& config_path, int epochs_override) {
    auto plan = plan_from(config_path);
    if (epochs_override > 0) plan.pretrain_epochs = epochs_override;
    std::printf("pretraining on the synthetic source domain (%d epochs, %zu train images)\n",
                plan.pretrain_epochs, static_cast<size_t>(plan.source.n_images));
    pipe::RunResult r = pipe::pretrain(plan);
    std::printf("pretrain done: best val mAP %.4f at epoch %d, final train loss %.4f\n",
                r.best_val_map, r.best_epoch, r.final_train_loss);
    std::printf("checkpoint: %s\n",
                (fs::path(pipe::results_dir()) / "pretrain" / "model.ckpt").c_str());
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& strategy, int shots, int rank,
            int64_t seed, int epochs_override) {
    auto plan = plan_from(config_path);
    if (epochs_override > 0) {
        plan.epochs = epochs_override;
        plan.stage2_epochs = epochs_override;
    }

    std::vector<pipe::Strategy> strategies =
        strategy.empty() ? plan.strategies
                         : std::vector<pipe::Strategy>{pipe::strategy_from(strategy)};
    std::vector<int> shot_list = shots > 0 ? std::vector<int>{shots} : plan.shots;
    std::vector<int> rank_list = rank > 0 ? std::vector<int>{rank} : plan.ranks;
    std::vector<uint64_t> seed_list =
        seed >= 0 ? std::vector<uint64_t>{static_cast<uint64_t>(seed)} : plan.seeds;

    int n_run = 0;
    for (auto st : strategies) {
        for (int k : shot_list) {
            const std::vector<int> ranks_here =
                st == pipe::Strategy::kBaselineFt ? std::vector<int>{0} : rank_list;
            for (int r : ranks_here) {
                for (uint64_t sd : seed_list) {
                    pipe::Cell cell{st, k, r, sd};
                    std::printf("[%s] training...\n", pipe::cell_name(cell).c_str());
                    std::fflush(stdout);
                    pipe::RunResult res = pipe::run_cell(plan, cell);
                    std::printf("[%s] best val mAP %.4f (epoch %d), test mAP %.4f, "
                                "loss %.4f -> %.4f, trainable %lld/%lld\n",
                                pipe::cell_name(cell).c_str(), res.best_val_map, res.best_epoch,
                                res.final_test_map, res.initial_train_loss, res.final_train_loss,
                                static_cast<long long>(res.trainable_params),
                                static_cast<long long>(res.total_params));
                    n_run += 1;
                }
            }
        }
    }
    std::printf("%d cell(s) complete; results under %s/cells\n", n_run,
                pipe::results_dir().c_str());
    return 0;
}

int cmd_aggregate(const std::string& config_path, bool allow_partial) {
    auto plan = plan_from(config_path);
    pipe::ResultTable t = pipe::aggregate(plan, allow_partial);
    pipe::write_tables(t);
    std::cout << pipe::table_to_markdown(t);
    std::printf("wrote %s/table.csv, table.md, runs.csv\n", pipe::results_dir().c_str());
    return 0;
}

int cmd_report(const std::string& config_path) {
    auto plan = plan_from(config_path);
    std::string text = pipe::report(plan, /*allow_partial=*/true);
    fs::path out = fs::path(pipe::results_dir()) / "report.md";
    std::ofstream(out) << text;
    std::cout << text;
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lodet: low-rank adapters for a diffusion-style detector, desk scale"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON experiment config (defaults when omitted)")
        ->check(CLI::ExistingFile);

    auto* sc_pre = app.add_subcommand("pretrain", "train the source-domain base model");
    int pre_epochs = 0;
    sc_pre->add_option("--epochs", pre_epochs, "override pretrain epoch count");

    auto* sc_run = app.add_subcommand("run", "run grid cells (all unset dimensions loop)");
    std::string strategy;
    int shots = 0, rank = 0, epochs = 0;
    int64_t seed = -1;
    sc_run->add_option("--strategy", strategy, "baseline_ft|lora_direct|lora_after_ft");
    sc_run->add_option("--shots", shots, "shots per class (k)");
    sc_run->add_option("--rank", rank, "adapter rank");
    sc_run->add_option("--seed", seed, "episode seed");
    sc_run->add_option("--epochs", epochs, "override epoch budget");

    auto* sc_agg = app.add_subcommand("aggregate", "aggregate cell results into tables");
    bool allow_partial = false;
    sc_agg->add_flag("--allow-partial", allow_partial, "tolerate missing cells");

    auto* sc_rep = app.add_subcommand("report", "render report.md with the ordering check");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sc_pre->parsed()) return cmd_pretrain(config_path, pre_epochs);
        if (sc_run->parsed()) return cmd_run(config_path, strategy, shots, rank, seed, epochs);
        if (sc_agg->parsed()) return cmd_aggregate(config_path, allow_partial);
        if (sc_rep->parsed()) return cmd_report(config_path);
    } catch (const lodet::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lodet/data.hpp"
#include "lodet/detector.hpp"
#include "lodet/eval.hpp"
#include "lodet/lora.hpp"

namespace lodet::pipe {

enum class Strategy { kBaselineFt, kLoraDirect, kLoraAfterFt };

std::string strategy_name(Strategy s);
Strategy strategy_from(const std::string& name);

struct ExperimentPlan {
    std::vector<Strategy> strategies = {Strategy::kBaselineFt, Strategy::kLoraDirect,
                                        Strategy::kLoraAfterFt};
    std::vector<int> shots = {1, 5, 10, 50};
    std::vector<int> ranks = {4, 8, 32, 128};
    std::vector<uint64_t> seeds = {101, 102, 103, 104, 105};
    int epochs = 300;
    int stage2_epochs = 300;  // adapter phase after intermediate fine-tuning
    int eval_interval = 10;
    float lr = 1e-4f;
    float weight_decay = 1e-4f;

    int pretrain_epochs = 150;
    float pretrain_lr = 3e-4f;
    uint64_t pretrain_seed = 7;

    data::SynthConfig source;
    data::SynthConfig target;
    det::DetectorConfig detector;
    std::string adapter_selector = "head.*";
    float adapter_init_scale = 0.02f;
    std::optional<float> adapter_alpha;  // unset: alpha = rank

    float test_fraction = 0.2f;
    float val_fraction = 0.2f;
    uint64_t split_seed = 77;
    std::string dataset_name = "synthetic-target";
};

ExperimentPlan default_plan();
// Overlay a JSON config file onto the defaults; unknown keys are rejected.
ExperimentPlan load_plan(const std::string& path);
ExperimentPlan plan_from_json(const std::string& text);

// Output root: $LODET_RESULTS_DIR when set, otherwise ./results.
std::string results_dir();

// Deterministic dataset bundle derived from the plan.
struct DatasetBundle {
    data::DatasetIndex source_train;
    data::DatasetIndex source_val;
    data::DatasetIndex episode_pool;  // target domain, disjoint from val/test
    data::DatasetIndex target_val;
    data::DatasetIndex target_test;
};
DatasetBundle build_datasets(const ExperimentPlan& plan);

struct Cell {
    Strategy strategy = Strategy::kBaselineFt;
    int shots = 1;
    int rank = 0;  // ignored for the baseline
    uint64_t seed = 0;
};
std::string cell_name(const Cell& cell);

struct RunResult {
    std::vector<double> val_trace;        // one entry per eval interval
    std::vector<float> epoch_loss;        // mean train loss per epoch
    double initial_val_map = 0.0;         // before the first update
    double initial_test_map = 0.0;
    int best_index = 0;                   // index into val_trace
    int best_epoch = 0;
    double best_val_map = 0.0;
    double final_test_map = 0.0;
    float initial_train_loss = 0.0f;
    float final_train_loss = 0.0f;
    int64_t trainable_params = 0;
    int64_t total_params = 0;
};

// Argmax of the validation trace, ties resolved toward the earliest epoch.
int select_checkpoint(const std::vector<double>& val_trace);

// Source-domain pretraining; writes results/pretrain/{model.ckpt,trace.csv,result.json}.
RunResult pretrain(const ExperimentPlan& plan);

// One grid cell; writes results/cells/<name>/{trace.csv,result.json,best.ckpt,last.ckpt}.
// LoRA strategies additionally write adapter.ckpt and require the pretrain
// checkpoint; lora_after_ft requires the matching baseline cell.
RunResult run_cell(const ExperimentPlan& plan, const Cell& cell);

struct CellStats {
    bool present = false;
    std::vector<double> per_seed;
    double mean = 0.0;
    double stddev = 0.0;  // population over seeds
};

struct ResultTable {
    std::string dataset;
    std::vector<int> shots;
    std::vector<std::string> columns;  // baseline, lora_r<r>..., lora_after_ft_r<r>...
    std::map<std::pair<int, std::string>, CellStats> cells;
};

// Collect per-cell results into the table. Without allow_partial a missing
// cell raises ConfigError listing every absent cell.
ResultTable aggregate(const ExperimentPlan& plan, bool allow_partial = false);

std::string table_to_csv(const ResultTable& t);
ResultTable table_from_csv(const std::string& csv);
std::string table_to_markdown(const ResultTable& t);
std::string runs_to_csv(const ResultTable& t);

// Writes table.csv, runs.csv and table.md under the results root.
void write_tables(const ResultTable& t);

// Renders report.md: the aggregated table plus the low-shot ordering check
// (adapters after intermediate fine-tuning vs. direct adapters at the
// smallest shot count).
std::string report(const ExperimentPlan& plan, bool allow_partial = true);

}  // namespace lodet::pipe

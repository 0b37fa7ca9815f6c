#include "lodet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lodet/checkpoint.hpp"
#include "lodet/optim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lodet::pipe {

namespace {

constexpr uint64_t kValEvalSalt = 0x5eed0eb1ull;
constexpr uint64_t kTestEvalSalt = 0x7e57e5a1ull;

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::kBaselineFt: return "baseline_ft";
        case Strategy::kLoraDirect: return "lora_direct";
        case Strategy::kLoraAfterFt: return "lora_after_ft";
    }
    throw ContractError("unknown strategy");
}

Strategy strategy_from(const std::string& name) {
    if (name == "baseline_ft") return Strategy::kBaselineFt;
    if (name == "lora_direct") return Strategy::kLoraDirect;
    if (name == "lora_after_ft") return Strategy::kLoraAfterFt;
    throw ConfigError("unknown strategy '" + name +
                      "' (expected baseline_ft|lora_direct|lora_after_ft)");
}

ExperimentPlan default_plan() {
    ExperimentPlan plan;
    plan.source.n_images = 64;
    plan.source.image_size = plan.detector.image_size;
    plan.source.objects_min = 2;
    plan.source.objects_max = 4;
    plan.source.scale_min = 0.18f;
    plan.source.scale_max = 0.35f;
    plan.source.n_classes = 3;
    plan.source.brightness_shift = 0.0f;
    plan.source.density = data::DensityProfile::kSparse;
    plan.source.seed = 4242;

    plan.target.n_images = 96;
    plan.target.image_size = plan.detector.image_size;
    plan.target.objects_min = 6;
    plan.target.objects_max = 12;
    plan.target.scale_min = 0.08f;
    plan.target.scale_max = 0.18f;
    plan.target.n_classes = 3;
    plan.target.brightness_shift = 0.25f;
    plan.target.density = data::DensityProfile::kDense;
    plan.target.seed = 9191;

    plan.detector.n_classes = 3;
    return plan;
}

namespace {

void apply_synth(const json& j, data::SynthConfig& cfg, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "n_images") cfg.n_images = it->get<int>();
        else if (k == "image_size") cfg.image_size = it->get<int>();
        else if (k == "objects") {
            cfg.objects_min = it->at(0).get<int>();
            cfg.objects_max = it->at(1).get<int>();
        } else if (k == "scale") {
            cfg.scale_min = it->at(0).get<float>();
            cfg.scale_max = it->at(1).get<float>();
        } else if (k == "n_classes") cfg.n_classes = it->get<int>();
        else if (k == "brightness_shift") cfg.brightness_shift = it->get<float>();
        else if (k == "density") {
            std::string d = it->get<std::string>();
            if (d == "sparse") cfg.density = data::DensityProfile::kSparse;
            else if (d == "dense") cfg.density = data::DensityProfile::kDense;
            else throw ConfigError(where + ".density must be sparse|dense");
        } else if (k == "seed") cfg.seed = it->get<uint64_t>();
        else throw ConfigError("unknown key '" + where + "." + k + "'");
    }
}

void apply_detector(const json& j, det::DetectorConfig& cfg) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "image_size") cfg.image_size = it->get<int>();
        else if (k == "patch_size") cfg.patch_size = it->get<int>();
        else if (k == "embed_dim") cfg.embed_dim = it->get<int>();
        else if (k == "n_proposals") cfg.n_proposals = it->get<int>();
        else if (k == "diffusion_steps") cfg.diffusion_steps = it->get<int>();
        else if (k == "sampling_steps") cfg.sampling_steps = it->get<int>();
        else if (k == "signal_scale") cfg.signal_scale = it->get<float>();
        else if (k == "n_classes") cfg.n_classes = it->get<int>();
        else if (k == "score_threshold") cfg.score_threshold = it->get<float>();
        else if (k == "max_detections") cfg.max_detections = it->get<int>();
        else if (k == "head_hidden") cfg.head_hidden = it->get<int>();
        else if (k == "lambda_cls") cfg.lambda_cls = it->get<float>();
        else if (k == "lambda_l1") cfg.lambda_l1 = it->get<float>();
        else if (k == "lambda_giou") cfg.lambda_giou = it->get<float>();
        else throw ConfigError("unknown key 'detector." + k + "'");
    }
}

}  // namespace

ExperimentPlan plan_from_json(const std::string& text) {
    ExperimentPlan plan = default_plan();
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError("plan config parse error at byte " + std::to_string(e.byte) + ": " +
                         e.what());
    }
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string& k = it.key();
        if (k == "strategies") {
            plan.strategies.clear();
            for (const auto& s : *it) plan.strategies.push_back(strategy_from(s.get<std::string>()));
        } else if (k == "shots") plan.shots = it->get<std::vector<int>>();
        else if (k == "ranks") plan.ranks = it->get<std::vector<int>>();
        else if (k == "seeds") plan.seeds = it->get<std::vector<uint64_t>>();
        else if (k == "epochs") plan.epochs = it->get<int>();
        else if (k == "stage2_epochs") plan.stage2_epochs = it->get<int>();
        else if (k == "eval_interval") plan.eval_interval = it->get<int>();
        else if (k == "lr") plan.lr = it->get<float>();
        else if (k == "weight_decay") plan.weight_decay = it->get<float>();
        else if (k == "pretrain") {
            for (auto p = it->begin(); p != it->end(); ++p) {
                if (p.key() == "epochs") plan.pretrain_epochs = p->get<int>();
                else if (p.key() == "lr") plan.pretrain_lr = p->get<float>();
                else if (p.key() == "seed") plan.pretrain_seed = p->get<uint64_t>();
                else throw ConfigError("unknown key 'pretrain." + p.key() + "'");
            }
        } else if (k == "source") apply_synth(*it, plan.source, "source");
        else if (k == "target") apply_synth(*it, plan.target, "target");
        else if (k == "detector") apply_detector(*it, plan.detector);
        else if (k == "adapter") {
            for (auto p = it->begin(); p != it->end(); ++p) {
                if (p.key() == "selector") plan.adapter_selector = p->get<std::string>();
                else if (p.key() == "init_scale") plan.adapter_init_scale = p->get<float>();
                else if (p.key() == "alpha") {
                    if (!p->is_null()) plan.adapter_alpha = p->get<float>();
                } else throw ConfigError("unknown key 'adapter." + p.key() + "'");
            }
        } else if (k == "splits") {
            for (auto p = it->begin(); p != it->end(); ++p) {
                if (p.key() == "test_fraction") plan.test_fraction = p->get<float>();
                else if (p.key() == "val_fraction") plan.val_fraction = p->get<float>();
                else if (p.key() == "seed") plan.split_seed = p->get<uint64_t>();
                else throw ConfigError("unknown key 'splits." + p.key() + "'");
            }
        } else if (k == "dataset_name") plan.dataset_name = it->get<std::string>();
        else throw ConfigError("unknown config key '" + k + "'");
    }
    if (plan.seeds.empty()) throw ConfigError("plan requires at least one seed");
    for (int s : plan.shots)
        if (s < 1) throw ConfigError("shots must be positive");
    return plan;
}

ExperimentPlan load_plan(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return plan_from_json(ss.str());
}

std::string results_dir() {
    const char* env = std::getenv("LODET_RESULTS_DIR");
    return env && *env ? env : "results";
}

DatasetBundle build_datasets(const ExperimentPlan& plan) {
    DatasetBundle b;
    data::DatasetIndex source = data::synth_generate(plan.source);
    auto src_split = data::split(source, plan.val_fraction, plan.split_seed);
    b.source_train = std::move(src_split.train);
    b.source_val = std::move(src_split.val);

    data::DatasetIndex target = data::synth_generate(plan.target);
    auto test_split = data::split(target, plan.test_fraction, hash_combine(plan.split_seed, 1));
    b.target_test = std::move(test_split.val);
    auto val_split = data::split(test_split.train, plan.val_fraction,
                                 hash_combine(plan.split_seed, 2));
    b.target_val = std::move(val_split.val);
    b.episode_pool = std::move(val_split.train);
    return b;
}

std::string cell_name(const Cell& cell) {
    std::string name = strategy_name(cell.strategy) + "_k" + std::to_string(cell.shots);
    if (cell.strategy != Strategy::kBaselineFt) name += "_r" + std::to_string(cell.rank);
    name += "_s" + std::to_string(cell.seed);
    return name;
}

int select_checkpoint(const std::vector<double>& val_trace) {
    if (val_trace.empty()) throw ContractError("select_checkpoint: empty validation trace");
    int best = 0;
    for (int i = 1; i < static_cast<int>(val_trace.size()); ++i) {
        if (val_trace[static_cast<size_t>(i)] > val_trace[static_cast<size_t>(best)]) best = i;
    }
    return best;
}

namespace {

struct EvalSet {
    std::vector<const data::ImageInfo*> images;
    std::map<int, det::BoxSet> gts;
    std::map<int, data::ImageBuffer> pixels;
};

EvalSet prepare_eval(const data::DatasetIndex& ds) {
    EvalSet s;
    for (const auto& im : ds.images) {
        s.images.push_back(&im);
        s.gts[im.id] = det::gt_boxes(ds, im);
        s.pixels[im.id] = data::image_pixels(ds, im);
    }
    return s;
}

double eval_map(det::Detector& model, const EvalSet& s, uint64_t salt,
                const std::vector<int>& classes) {
    std::map<int, det::DetectionSet> dets;
    for (const auto* im : s.images) {
        dets[im->id] = model.infer(s.pixels.at(im->id), hash_combine(salt, static_cast<uint64_t>(im->id)));
    }
    return eval::evaluate(dets, s.gts, classes, 0.5, model.config().max_detections).map50;
}

struct Snapshot {
    std::vector<std::pair<std::string, std::vector<float>>> values;
};

Snapshot take_snapshot(const nn::Model& model) {
    Snapshot s;
    for (const auto* p : model.parameters()) {
        auto v = p->tensor().value();
        s.values.emplace_back(p->name(), std::vector<float>(v.begin(), v.end()));
    }
    return s;
}

void restore_snapshot(nn::Model& model, const Snapshot& s) {
    for (const auto& [name, data] : s.values) {
        nn::Parameter* p = model.find(name);
        if (!p) throw IntegrityError("snapshot parameter '" + name + "' missing from model");
        auto w = p->tensor().value_mut();
        std::copy(data.begin(), data.end(), w.begin());
    }
}

void save_snapshot(const std::string& path, const nn::Model& model, const Snapshot& s) {
    nn::Checkpoint ckpt;
    for (const auto& [name, data] : s.values) {
        const nn::Parameter* p = model.find(name);
        nn::CheckpointRecord rec;
        rec.name = name;
        rec.shape = p->tensor().shape();
        rec.data = data;
        ckpt.records.push_back(std::move(rec));
    }
    nn::write_checkpoint(path, ckpt);
}

void write_trace_csv(const std::string& path, const std::vector<float>& epoch_loss,
                     const std::vector<std::pair<int, double>>& val_points) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "epoch,train_loss,val_map\n";
    std::map<int, double> vals(val_points.begin(), val_points.end());
    for (size_t e = 0; e < epoch_loss.size(); ++e) {
        int epoch = static_cast<int>(e) + 1;
        os << epoch << "," << fmt6(epoch_loss[e]) << ",";
        auto it = vals.find(epoch);
        if (it != vals.end()) os << fmt6(it->second);
        os << "\n";
    }
}

void write_result_json(const std::string& path, const Cell* cell, const RunResult& r,
                       int eval_interval) {
    json j;
    if (cell) {
        j["cell"] = cell_name(*cell);
        j["strategy"] = strategy_name(cell->strategy);
        j["shots"] = cell->shots;
        if (cell->strategy != Strategy::kBaselineFt) j["rank"] = cell->rank;
        j["seed"] = cell->seed;
    }
    j["eval_interval"] = eval_interval;
    j["val_trace"] = r.val_trace;
    j["initial_val_map"] = r.initial_val_map;
    j["initial_test_map"] = r.initial_test_map;
    j["best_index"] = r.best_index;
    j["best_epoch"] = r.best_epoch;
    j["best_val_map"] = r.best_val_map;
    j["final_test_map"] = r.final_test_map;
    j["initial_train_loss"] = r.initial_train_loss;
    j["final_train_loss"] = r.final_train_loss;
    j["trainable_params"] = r.trainable_params;
    j["total_params"] = r.total_params;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << j.dump(2) << "\n";
}

struct TrainOutcome {
    RunResult result;
    Snapshot best;
    Snapshot last;
};

// Shared epoch loop: one optimizer step per training image, validation mAP
// every eval_interval epochs, best checkpoint by validation score.
TrainOutcome train_loop(det::Detector& model, const data::DatasetIndex& train_set,
                        const EvalSet& val_set, const EvalSet* test_set, int epochs,
                        int eval_interval, float lr, float weight_decay, uint64_t run_seed) {
    const std::vector<int> classes =
        [&] {
            std::vector<int> c;
            for (int i = 1; i <= model.config().n_classes; ++i) c.push_back(i);
            return c;
        }();

    std::vector<std::pair<int, det::BoxSet>> train_gts;
    std::map<int, data::ImageBuffer> train_pixels;
    for (const auto& im : train_set.images) {
        train_gts.emplace_back(im.id, det::gt_boxes(train_set, im));
        train_pixels[im.id] = data::image_pixels(train_set, im);
    }
    if (train_gts.empty()) throw ContractError("training set has no images");

    nn::AdamW optimizer({lr, 0.9f, 0.999f, weight_decay, 1e-8f});
    auto params = model.model().parameters();

    TrainOutcome out;
    RunResult& r = out.result;
    auto counts = model.model().count();
    r.trainable_params = counts.trainable;
    r.total_params = counts.total;

    r.initial_val_map = eval_map(model, val_set, kValEvalSalt, classes);
    if (test_set) r.initial_test_map = eval_map(model, *test_set, kTestEvalSalt, classes);

    Rng rng(run_seed);
    std::vector<std::pair<int, double>> val_points;
    bool have_best = false;
    double best_val = -1.0;

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<size_t> order(train_gts.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);

        double loss_acc = 0.0;
        for (size_t idx : order) {
            const auto& [image_id, gt] = train_gts[idx];
            model.model().zero_grad();
            nn::Tensor loss = model.training_loss(train_pixels.at(image_id), gt, rng);
            nn::backward(loss);
            optimizer.step(params);
            loss_acc += loss.item();
        }
        float mean_loss = static_cast<float>(loss_acc / static_cast<double>(order.size()));
        r.epoch_loss.push_back(mean_loss);
        if (epoch == 1) r.initial_train_loss = mean_loss;
        r.final_train_loss = mean_loss;

        if (epoch % eval_interval == 0) {
            double v = eval_map(model, val_set, kValEvalSalt, classes);
            r.val_trace.push_back(v);
            val_points.emplace_back(epoch, v);
            if (!have_best || v > best_val) {
                have_best = true;
                best_val = v;
                out.best = take_snapshot(model.model());
                r.best_epoch = epoch;
            }
        }
    }

    if (!have_best) {
        // Shorter run than one eval interval: the last state is the best.
        out.best = take_snapshot(model.model());
        r.best_epoch = epochs;
        r.val_trace.push_back(eval_map(model, val_set, kValEvalSalt, classes));
        val_points.emplace_back(epochs, r.val_trace.back());
    }
    out.last = take_snapshot(model.model());
    r.best_index = select_checkpoint(r.val_trace);
    r.best_val_map = r.val_trace[static_cast<size_t>(r.best_index)];

    if (test_set) {
        restore_snapshot(model.model(), out.best);
        r.final_test_map = eval_map(model, *test_set, kTestEvalSalt, classes);
        restore_snapshot(model.model(), out.last);
    }
    return out;
}

std::string pretrain_ckpt_path() {
    return (fs::path(results_dir()) / "pretrain" / "model.ckpt").string();
}

float adapter_alpha_for(const ExperimentPlan& plan, int rank) {
    return plan.adapter_alpha ? *plan.adapter_alpha : static_cast<float>(rank);
}

lora::AdapterConfig adapter_config_for(const ExperimentPlan& plan, int rank) {
    lora::AdapterConfig cfg;
    cfg.rank = rank;
    cfg.alpha = adapter_alpha_for(plan, rank);
    cfg.target_selector = plan.adapter_selector;
    cfg.init_scale = plan.adapter_init_scale;
    return cfg;
}

}  // namespace

RunResult pretrain(const ExperimentPlan& plan) {
    DatasetBundle data = build_datasets(plan);
    det::Detector model(plan.detector, hash_combine(plan.pretrain_seed, 0xdef1));
    EvalSet val = prepare_eval(data.source_val);

    TrainOutcome out = train_loop(model, data.source_train, val, nullptr, plan.pretrain_epochs,
                                  plan.eval_interval, plan.pretrain_lr, plan.weight_decay,
                                  hash_combine(plan.pretrain_seed, 0x7a41));

    fs::path dir = fs::path(results_dir()) / "pretrain";
    fs::create_directories(dir);
    save_snapshot((dir / "model.ckpt").string(), model.model(), out.best);
    std::vector<std::pair<int, double>> val_points;
    for (size_t i = 0; i < out.result.val_trace.size(); ++i) {
        val_points.emplace_back(static_cast<int>(i + 1) * plan.eval_interval,
                                out.result.val_trace[i]);
    }
    write_trace_csv((dir / "trace.csv").string(), out.result.epoch_loss, val_points);
    write_result_json((dir / "result.json").string(), nullptr, out.result, plan.eval_interval);
    return out.result;
}

RunResult run_cell(const ExperimentPlan& plan, const Cell& cell) {
    if (!fs::exists(pretrain_ckpt_path())) {
        throw DependencyError("pretrain checkpoint not found at " + pretrain_ckpt_path() +
                              "; run the pretrain command first");
    }
    DatasetBundle data = build_datasets(plan);

    data::EpisodeSpec spec;
    spec.k = cell.shots;
    spec.seed = cell.seed;
    spec.class_ids = data.episode_pool.category_ids();
    data::DatasetIndex episode = data::sample_k_shot(data.episode_pool, spec);

    EvalSet val = prepare_eval(data.target_val);
    EvalSet test = prepare_eval(data.target_test);

    det::Detector model(plan.detector, /*init_seed=*/1);
    nn::load_model(pretrain_ckpt_path(), model.model());

    uint64_t run_seed = hash_combine(hash_combine(cell.seed, static_cast<uint64_t>(cell.shots)),
                                     hash_combine(static_cast<uint64_t>(cell.rank) + 1,
                                                  static_cast<uint64_t>(cell.strategy)));

    lora::Injection injection;
    int epochs = plan.epochs;
    switch (cell.strategy) {
        case Strategy::kBaselineFt:
            model.model().set_all_trainable(true);
            break;
        case Strategy::kLoraDirect: {
            Rng rng(hash_combine(run_seed, 0x10a1));
            injection = lora::inject(model.model(), adapter_config_for(plan, cell.rank), rng);
            break;
        }
        case Strategy::kLoraAfterFt: {
            Cell base_cell{Strategy::kBaselineFt, cell.shots, 0, cell.seed};
            fs::path base_ckpt =
                fs::path(results_dir()) / "cells" / cell_name(base_cell) / "best.ckpt";
            if (!fs::exists(base_ckpt)) {
                throw DependencyError("lora_after_ft requires the baseline cell '" +
                                      cell_name(base_cell) + "'; run it first");
            }
            nn::load_model(base_ckpt.string(), model.model());
            Rng rng(hash_combine(run_seed, 0x10a1));
            injection = lora::inject(model.model(), adapter_config_for(plan, cell.rank), rng);
            epochs = plan.stage2_epochs;
            break;
        }
    }

    TrainOutcome out =
        train_loop(model, episode, val, &test, epochs, plan.eval_interval,
                   plan.lr, plan.weight_decay, run_seed);

    fs::path dir = fs::path(results_dir()) / "cells" / cell_name(cell);
    fs::create_directories(dir);
    save_snapshot((dir / "best.ckpt").string(), model.model(), out.best);
    save_snapshot((dir / "last.ckpt").string(), model.model(), out.last);
    if (cell.strategy != Strategy::kBaselineFt) {
        lora::save_adapter((dir / "adapter.ckpt").string(), injection);
    }
    std::vector<std::pair<int, double>> val_points;
    for (size_t i = 0; i < out.result.val_trace.size(); ++i) {
        val_points.emplace_back(static_cast<int>(i + 1) * plan.eval_interval,
                                out.result.val_trace[i]);
    }
    write_trace_csv((dir / "trace.csv").string(), out.result.epoch_loss, val_points);
    write_result_json((dir / "result.json").string(), &cell, out.result, plan.eval_interval);
    return out.result;
}

namespace {

std::vector<std::string> table_columns(const ExperimentPlan& plan) {
    std::vector<std::string> cols = {"baseline"};
    for (int r : plan.ranks) cols.push_back("lora_r" + std::to_string(r));
    for (int r : plan.ranks) cols.push_back("lora_after_ft_r" + std::to_string(r));
    return cols;
}

std::optional<Cell> cell_for_column(const ExperimentPlan& plan, const std::string& col, int shots,
                                    uint64_t seed) {
    Cell c;
    c.shots = shots;
    c.seed = seed;
    if (col == "baseline") {
        c.strategy = Strategy::kBaselineFt;
        c.rank = 0;
        if (std::find(plan.strategies.begin(), plan.strategies.end(), c.strategy) ==
            plan.strategies.end())
            return std::nullopt;
        return c;
    }
    auto parse = [&](const std::string& prefix, Strategy s) -> std::optional<Cell> {
        if (col.rfind(prefix, 0) != 0) return std::nullopt;
        c.strategy = s;
        c.rank = std::stoi(col.substr(prefix.size()));
        if (std::find(plan.strategies.begin(), plan.strategies.end(), s) == plan.strategies.end())
            return std::nullopt;
        return c;
    };
    if (auto r = parse("lora_after_ft_r", Strategy::kLoraAfterFt)) return r;
    if (auto r = parse("lora_r", Strategy::kLoraDirect)) return r;
    return std::nullopt;
}

}  // namespace

ResultTable aggregate(const ExperimentPlan& plan, bool allow_partial) {
    ResultTable t;
    t.dataset = plan.dataset_name;
    t.shots = plan.shots;
    t.columns = table_columns(plan);

    std::vector<std::string> missing;
    for (int shots : plan.shots) {
        for (const auto& col : t.columns) {
            CellStats stats;
            bool applicable = false;
            for (uint64_t seed : plan.seeds) {
                auto cell = cell_for_column(plan, col, shots, seed);
                if (!cell) continue;
                applicable = true;
                fs::path p = fs::path(results_dir()) / "cells" / cell_name(*cell) / "result.json";
                if (!fs::exists(p)) {
                    missing.push_back(cell_name(*cell));
                    continue;
                }
                std::ifstream is(p);
                json j = json::parse(is);
                stats.per_seed.push_back(j.at("final_test_map").get<double>());
            }
            if (!applicable) continue;
            stats.present = stats.per_seed.size() == plan.seeds.size();
            if (!stats.per_seed.empty()) {
                double m = 0.0;
                for (double v : stats.per_seed) m += v;
                m /= static_cast<double>(stats.per_seed.size());
                double var = 0.0;
                for (double v : stats.per_seed) var += (v - m) * (v - m);
                var /= static_cast<double>(stats.per_seed.size());
                stats.mean = m;
                stats.stddev = std::sqrt(var);
            }
            t.cells[{shots, col}] = stats;
        }
    }
    if (!missing.empty() && !allow_partial) {
        std::string msg = "aggregate: missing cells:";
        for (const auto& m : missing) msg += " " + m;
        throw ConfigError(msg + " (use --allow-partial to aggregate anyway)");
    }
    return t;
}

std::string table_to_csv(const ResultTable& t) {
    std::ostringstream os;
    os << "dataset,shots";
    for (const auto& col : t.columns) os << "," << col << "_mean," << col << "_std";
    os << "\n";
    for (int shots : t.shots) {
        os << t.dataset << "," << shots;
        for (const auto& col : t.columns) {
            auto it = t.cells.find({shots, col});
            if (it == t.cells.end() || !it->second.present) {
                os << ",,";
            } else {
                os << "," << fmt6(it->second.mean) << "," << fmt6(it->second.stddev);
            }
        }
        os << "\n";
    }
    return os.str();
}

ResultTable table_from_csv(const std::string& csv) {
    std::istringstream is(csv);
    std::string line;
    if (!std::getline(is, line)) throw ParseError("table CSV: empty input");
    std::vector<std::string> header;
    {
        std::istringstream hs(line);
        std::string tok;
        while (std::getline(hs, tok, ',')) header.push_back(tok);
    }
    if (header.size() < 2 || header[0] != "dataset" || header[1] != "shots") {
        throw ParseError("table CSV: unexpected header");
    }
    ResultTable t;
    for (size_t i = 2; i < header.size(); i += 2) {
        const std::string& h = header[i];
        if (h.size() < 5 || h.substr(h.size() - 5) != "_mean") {
            throw ParseError("table CSV: unexpected column '" + h + "'");
        }
        t.columns.push_back(h.substr(0, h.size() - 5));
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> tok;
        std::istringstream ls(line);
        std::string v;
        while (std::getline(ls, v, ',')) tok.push_back(v);
        tok.resize(header.size());
        t.dataset = tok[0];
        int shots = std::stoi(tok[1]);
        t.shots.push_back(shots);
        for (size_t c = 0; c < t.columns.size(); ++c) {
            const std::string& m = tok[2 + 2 * c];
            const std::string& s = tok[3 + 2 * c];
            CellStats stats;
            if (!m.empty()) {
                stats.present = true;
                stats.mean = std::stod(m);
                stats.stddev = s.empty() ? 0.0 : std::stod(s);
            }
            t.cells[{shots, t.columns[c]}] = stats;
        }
    }
    return t;
}

std::string table_to_markdown(const ResultTable& t) {
    std::ostringstream os;
    os << "| dataset | shots |";
    for (const auto& col : t.columns) os << " " << col << " |";
    os << "\n|---|---|";
    for (size_t i = 0; i < t.columns.size(); ++i) os << "---|";
    os << "\n";
    for (int shots : t.shots) {
        // best mean in the row gets bold
        double best = -1.0;
        for (const auto& col : t.columns) {
            auto it = t.cells.find({shots, col});
            if (it != t.cells.end() && it->second.present) best = std::max(best, it->second.mean);
        }
        os << "| " << t.dataset << " | " << shots << " |";
        for (const auto& col : t.columns) {
            auto it = t.cells.find({shots, col});
            if (it == t.cells.end() || !it->second.present) {
                os << " - |";
            } else {
                bool is_best = it->second.mean == best;
                os << " " << (is_best ? "**" : "") << fmt6(it->second.mean)
                   << (is_best ? "**" : "") << " ± " << fmt6(it->second.stddev) << " |";
            }
        }
        os << "\n";
    }
    return os.str();
}

std::string runs_to_csv(const ResultTable& t) {
    std::ostringstream os;
    os << "dataset,shots,column,seed_index,map\n";
    for (int shots : t.shots) {
        for (const auto& col : t.columns) {
            auto it = t.cells.find({shots, col});
            if (it == t.cells.end()) continue;
            for (size_t s = 0; s < it->second.per_seed.size(); ++s) {
                os << t.dataset << "," << shots << "," << col << "," << s << ","
                   << fmt6(it->second.per_seed[s]) << "\n";
            }
        }
    }
    return os.str();
}

void write_tables(const ResultTable& t) {
    fs::path dir = results_dir();
    fs::create_directories(dir);
    std::ofstream(dir / "table.csv") << table_to_csv(t);
    std::ofstream(dir / "table.md") << table_to_markdown(t);
    std::ofstream(dir / "runs.csv") << runs_to_csv(t);
}

std::string report(const ExperimentPlan& plan, bool allow_partial) {
    ResultTable t = aggregate(plan, allow_partial);
    std::ostringstream os;
    os << "# Experiment report: " << t.dataset << "\n\n";
    os << "Mean mAP@0.5 over " << plan.seeds.size() << " seeds, " << plan.epochs
       << " epochs per run.\n\n";
    os << table_to_markdown(t) << "\n";

    int low_shot = *std::min_element(plan.shots.begin(), plan.shots.end());
    os << "## Low-shot ordering check (k=" << low_shot << ")\n\n";
    os << "Expected: adapters after intermediate fine-tuning >= direct adapters.\n\n";
    bool any = false;
    bool all_hold = true;
    double sum_after = 0.0, sum_direct = 0.0;
    int n_ranks = 0;
    for (int r : plan.ranks) {
        auto direct = t.cells.find({low_shot, "lora_r" + std::to_string(r)});
        auto after = t.cells.find({low_shot, "lora_after_ft_r" + std::to_string(r)});
        if (direct == t.cells.end() || after == t.cells.end() || !direct->second.present ||
            !after->second.present) {
            os << "- rank " << r << ": incomplete cells, skipped\n";
            continue;
        }
        any = true;
        double d = after->second.mean - direct->second.mean;
        bool holds = d >= 0.0;
        all_hold = all_hold && holds;
        sum_after += after->second.mean;
        sum_direct += direct->second.mean;
        n_ranks += 1;
        os << "- rank " << r << ": " << (holds ? "holds" : "violated") << " (after "
           << fmt6(after->second.mean) << " vs direct " << fmt6(direct->second.mean)
           << ", delta " << fmt6(d) << ")\n";
    }
    if (any) {
        os << "\nOverall (mean over ranks): after " << fmt6(sum_after / n_ranks) << " vs direct "
           << fmt6(sum_direct / n_ranks) << " -> ordering "
           << (sum_after >= sum_direct ? "HOLDS" : "VIOLATED") << " by "
           << fmt6((sum_after - sum_direct) / n_ranks) << "\n";
        os << "\nOrdering across all ranks: " << (all_hold ? "holds" : "violated") << "\n";
    } else {
        os << "\nNo complete adapter cells at k=" << low_shot << "; run the grid first.\n";
    }
    return os.str();
}

}  // namespace lodet::pipe

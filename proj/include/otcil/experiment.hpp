#pragma once

// End-to-end experiment driver: dataset -> stream -> per-task training ->
// per-stage evaluation -> report. One master seed drives data generation,
// class shuffling, model init and batch order, so a config fully determines
// the report.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <string>
#include <vector>

#include <json.hpp>

#include "otcil/datasets.hpp"
#include "otcil/evaluation.hpp"
#include "otcil/exemplars.hpp"
#include "otcil/losses.hpp"
#include "otcil/network.hpp"
#include "otcil/ot.hpp"
#include "otcil/trainer.hpp"

namespace otcil {

struct ExperimentConfig {
    std::string dataset = "synthetic";  // "synthetic" or "csv:<path>"
    SyntheticSpec synthetic;
    bool csv_standardize = true;
    std::size_t tasks = 4;
    std::size_t base_classes = 0;  // 0 = even split
    double test_fraction = 0.2;

    BudgetPolicy memory{BudgetKind::fixed_per_class, 20};

    std::vector<std::size_t> hidden_dims = {32};
    std::size_t embed_dim = 8;
    double logit_scale = 4.0;

    Method method = Method::coil;
    TrainConfig train;
    LossConfig loss;
    OtConfig ot;
    std::uint64_t seed = 1993;
};

inline std::vector<std::size_t> default_decay_epochs(std::size_t epochs) {
    std::vector<std::size_t> decay;
    if (epochs >= 4) {
        decay.push_back(epochs / 2);
        const std::size_t second = (3 * epochs) / 4;
        if (second > decay.back()) decay.push_back(second);
    }
    return decay;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["dataset"] = cfg.dataset;
    j["synthetic"] = {{"num_classes", cfg.synthetic.num_classes}, {"dims", cfg.synthetic.dims},
                      {"per_class", cfg.synthetic.per_class},     {"center_spread", cfg.synthetic.center_spread},
                      {"relatedness", cfg.synthetic.relatedness}, {"noise_sigma", cfg.synthetic.noise_sigma}};
    j["csv_standardize"] = cfg.csv_standardize;
    j["tasks"] = cfg.tasks;
    j["base_classes"] = cfg.base_classes;
    j["test_fraction"] = cfg.test_fraction;
    j["memory"] = {{"kind", cfg.memory.kind == BudgetKind::fixed_total ? "total" : "per_class"},
                   {"amount", cfg.memory.amount}};
    j["hidden_dims"] = cfg.hidden_dims;
    j["embed_dim"] = cfg.embed_dim;
    j["logit_scale"] = cfg.logit_scale;
    j["method"] = to_string(cfg.method);
    j["epochs"] = cfg.train.epochs;
    j["batch_size"] = cfg.train.batch_size;
    j["lr"] = cfg.train.lr.initial;
    j["lr_decay_factor"] = cfg.train.lr.decay_factor;
    j["lr_decay_epochs"] = cfg.train.lr.decay_epochs;
    j["momentum"] = cfg.train.momentum;
    j["weight_decay"] = cfg.train.weight_decay;
    j["rt_refresh"] = cfg.train.rt_refresh == RtRefresh::per_batch ? "per_batch" : "per_epoch";
    j["tau"] = cfg.loss.tau;
    j["gamma_exponent"] = cfg.loss.gamma_exponent;
    j["pt_epochs"] = cfg.loss.pt_epochs;
    j["ot_epsilon"] = cfg.ot.epsilon;
    j["ot_max_iterations"] = cfg.ot.max_iterations;
    j["ot_tolerance"] = cfg.ot.tolerance;
    j["ot_cost_normalization"] = cfg.ot.cost_normalization == CostNormalization::divide_by_mean
                                     ? "divide_by_mean"
                                     : "none";
    j["seed"] = cfg.seed;
    return j;
}

inline TaskStream build_configured_stream(const ExperimentConfig& cfg) {
    std::vector<Instance> data;
    bool standardize = false;
    if (cfg.dataset == "synthetic") {
        SyntheticSpec spec = cfg.synthetic;
        spec.seed = cfg.seed;
        data = generate_synthetic(spec);
    } else if (cfg.dataset.rfind("csv:", 0) == 0) {
        data = load_csv(cfg.dataset.substr(4));
        standardize = cfg.csv_standardize;
    } else {
        throw std::invalid_argument("unknown dataset '" + cfg.dataset + "' (expected synthetic or csv:<path>)");
    }
    TaskStream stream = build_stream(data, cfg.tasks, cfg.base_classes, cfg.seed, cfg.test_fraction);
    if (standardize) standardize_features(stream);
    return stream;
}

inline Model make_configured_model(const ExperimentConfig& cfg, std::size_t input_dim) {
    EmbeddingConfig embedding;
    embedding.input_dim = input_dim;
    embedding.hidden_dims = cfg.hidden_dims;
    embedding.embed_dim = cfg.embed_dim;
    Rng rng(mix_seed(cfg.seed, 0x30DE1ull));
    Model model = make_model(embedding, 0, rng);
    model.logit_scale = cfg.logit_scale;
    return model;
}

inline std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buffer[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buffer;
}

inline RunReport run_experiment(const ExperimentConfig& cfg, const TaskStream* prebuilt_stream = nullptr,
                                StageState* final_state = nullptr) {
    const TaskStream stream = prebuilt_stream != nullptr ? *prebuilt_stream : build_configured_stream(cfg);
    if (stream.tasks.empty()) throw std::invalid_argument("run_experiment: stream has no tasks");
    const std::size_t input_dim = stream.tasks[0].train.at(0).features.size();

    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;

    StageState state;
    state.model = make_configured_model(cfg, input_dim);
    state.store = ExemplarStore(cfg.memory);

    RunReport report;
    report.method = to_string(cfg.method);
    report.class_order = stream.class_order;
    report.config = config_to_json(cfg);

    for (std::size_t b = 0; b < stream.tasks.size(); ++b) {
        TaskRunResult task_result = run_task(state, stream.tasks[b], cfg.method, train_cfg, cfg.loss, cfg.ot);
        report.epoch_traces.push_back(std::move(task_result.epochs));
        const StageEvaluation eval = evaluate_stage(state.model, stream, b + 1);
        report.accuracy_matrix.push_back(eval.task_accuracy);
        report.seen_accuracy.push_back(eval.seen_accuracy);
    }

    double sum = 0.0;
    for (double acc : report.seen_accuracy) sum += acc;
    report.average_incremental_accuracy =
        report.seen_accuracy.empty() ? 0.0 : sum / static_cast<double>(report.seen_accuracy.size());
    report.meta = {{"generator", "otcil"}, {"timestamp", timestamp_utc()}};
    if (final_state != nullptr) *final_state = std::move(state);
    return report;
}

}  // namespace otcil

#pragma once

// Stage evaluation, run reports and the decision-boundary grid export.
// Reports serialise to JSON with sorted keys, so serialise -> parse ->
// serialise is byte-identical; volatile data (timestamps) lives in a
// separate meta block that determinism checks strip.

#include <cstddef>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "otcil/datasets.hpp"
#include "otcil/network.hpp"
#include "otcil/trainer.hpp"

namespace otcil {

// Cosine-head argmax over classifier columns [first_class, first_class +
// class_count); ties go to the lowest column index. Returns global labels.
inline std::vector<int> predict(const Model& model, const Matrix& inputs, std::size_t first_class = 0,
                                std::size_t class_count = 0) {
    if (class_count == 0) class_count = model.num_classes() - first_class;
    if (first_class + class_count > model.num_classes())
        throw std::invalid_argument("predict: class window exceeds the classifier");
    const Matrix logits = cosine_logits(model, embed(model, inputs));
    std::vector<int> labels(inputs.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = first_class;
        for (std::size_t k = first_class + 1; k < first_class + class_count; ++k)
            if (logits(i, k) > logits(i, best)) best = k;
        labels[i] = static_cast<int>(best);
    }
    return labels;
}

inline double accuracy(const Model& model, const std::vector<Instance>& instances, std::size_t first_class = 0,
                       std::size_t class_count = 0) {
    if (instances.empty()) return 0.0;
    const std::vector<int> predicted = predict(model, features_matrix(instances), first_class, class_count);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < instances.size(); ++i)
        if (predicted[i] == instances[i].label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

struct StageEvaluation {
    std::vector<double> task_accuracy;      // accuracy on test set of task t (t <= stage)
    std::vector<std::size_t> task_counts;   // test-set sizes, for pooled recomputation
    double seen_accuracy = 0.0;             // pooled over all seen test sets
};

// stage is 1-based: the number of tasks the model has been trained through.
inline StageEvaluation evaluate_stage(const Model& model, const TaskStream& stream, std::size_t stage) {
    if (stage < 1 || stage > stream.tasks.size())
        throw std::invalid_argument("evaluate_stage: stage " + std::to_string(stage) + " out of range");
    StageEvaluation eval;
    std::size_t correct = 0;
    std::size_t total = 0;
    for (std::size_t t = 0; t < stage; ++t) {
        const std::vector<Instance>& test = stream.tasks[t].test;
        const std::vector<int> predicted = predict(model, features_matrix(test));
        std::size_t task_correct = 0;
        for (std::size_t i = 0; i < test.size(); ++i)
            if (predicted[i] == test[i].label) ++task_correct;
        eval.task_accuracy.push_back(test.empty() ? 0.0
                                                  : static_cast<double>(task_correct) /
                                                        static_cast<double>(test.size()));
        eval.task_counts.push_back(test.size());
        correct += task_correct;
        total += test.size();
    }
    eval.seen_accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
    return eval;
}

// ---------------------------------------------------------------------------
// Run report

struct RunReport {
    std::string method;
    std::vector<int> class_order;
    std::vector<std::vector<double>> accuracy_matrix;  // row s: accuracies on tasks 1..s+1
    std::vector<double> seen_accuracy;
    double average_incremental_accuracy = 0.0;
    std::vector<std::vector<EpochRecord>> epoch_traces;  // one list per task
    nlohmann::json config;
    nlohmann::json meta;  // timestamps etc.; excluded from determinism comparisons
};

inline nlohmann::json to_json(const EpochRecord& record) {
    return nlohmann::json{{"epoch", record.epoch},
                          {"lr", record.lr},
                          {"ce", record.loss.ce},
                          {"kd", record.loss.kd},
                          {"pt", record.loss.pt},
                          {"rt", record.loss.rt},
                          {"total", record.loss.total},
                          {"lambda", record.loss.lambda_value},
                          {"gamma", record.loss.gamma_value}};
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    EpochRecord record;
    record.epoch = j.at("epoch").get<std::size_t>();
    record.lr = j.at("lr").get<double>();
    record.loss.ce = j.at("ce").get<double>();
    record.loss.kd = j.at("kd").get<double>();
    record.loss.pt = j.at("pt").get<double>();
    record.loss.rt = j.at("rt").get<double>();
    record.loss.total = j.at("total").get<double>();
    record.loss.lambda_value = j.at("lambda").get<double>();
    record.loss.gamma_value = j.at("gamma").get<double>();
    return record;
}

inline nlohmann::json to_json(const RunReport& report, bool include_meta = true) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["method"] = report.method;
    j["class_order"] = report.class_order;
    j["accuracy_matrix"] = report.accuracy_matrix;
    j["seen_accuracy"] = report.seen_accuracy;
    j["average_incremental_accuracy"] = report.average_incremental_accuracy;
    j["config"] = report.config;
    nlohmann::json traces = nlohmann::json::array();
    for (const auto& task_trace : report.epoch_traces) {
        nlohmann::json task_json = nlohmann::json::array();
        for (const EpochRecord& record : task_trace) task_json.push_back(to_json(record));
        traces.push_back(std::move(task_json));
    }
    j["epoch_traces"] = std::move(traces);
    if (include_meta) j["meta"] = report.meta;
    return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
    RunReport report;
    report.method = j.at("method").get<std::string>();
    report.class_order = j.at("class_order").get<std::vector<int>>();
    report.accuracy_matrix = j.at("accuracy_matrix").get<std::vector<std::vector<double>>>();
    report.seen_accuracy = j.at("seen_accuracy").get<std::vector<double>>();
    report.average_incremental_accuracy = j.at("average_incremental_accuracy").get<double>();
    report.config = j.at("config");
    if (j.contains("meta")) report.meta = j.at("meta");
    for (const auto& task_json : j.at("epoch_traces")) {
        std::vector<EpochRecord> trace;
        for (const auto& record_json : task_json) trace.push_back(epoch_record_from_json(record_json));
        report.epoch_traces.push_back(std::move(trace));
    }
    return report;
}

inline std::string report_to_string(const RunReport& report, bool include_meta = true) {
    return to_json(report, include_meta).dump(2) + "\n";
}

inline void write_report(const RunReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_report: cannot open " + path);
    out << report_to_string(report);
}

inline void write_accuracy_curves(const RunReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_accuracy_curves: cannot open " + path);
    std::size_t max_tasks = report.accuracy_matrix.size();
    out << "stage,seen_accuracy";
    for (std::size_t t = 0; t < max_tasks; ++t) out << ",task_" << (t + 1);
    out << "\n";
    for (std::size_t s = 0; s < report.accuracy_matrix.size(); ++s) {
        out << (s + 1) << "," << report.seen_accuracy[s];
        for (std::size_t t = 0; t < max_tasks; ++t) {
            out << ",";
            if (t < report.accuracy_matrix[s].size()) out << report.accuracy_matrix[s][t];
        }
        out << "\n";
    }
}

// ---------------------------------------------------------------------------
// Decision-boundary grid (2-D embeddings only)

inline void export_boundary_grid(const Model& model, double min_x, double max_x, double min_y, double max_y,
                                 std::size_t resolution, std::ostream& out) {
    if (model.embedding.embed_dim != 2)
        throw std::invalid_argument("export_boundary_grid: requires embed_dim == 2, model has " +
                                    std::to_string(model.embedding.embed_dim));
    if (resolution < 1) throw std::invalid_argument("export_boundary_grid: resolution must be >= 1");
    if (model.num_classes() == 0) throw std::invalid_argument("export_boundary_grid: classifier is empty");

    const Matrix unit_weights = normalize_columns(model.classifier);
    out << "x1,x2,predicted_class\n";
    for (std::size_t iy = 0; iy < resolution; ++iy) {
        for (std::size_t ix = 0; ix < resolution; ++ix) {
            const double fx = resolution == 1 ? 0.5 : static_cast<double>(ix) / static_cast<double>(resolution - 1);
            const double fy = resolution == 1 ? 0.5 : static_cast<double>(iy) / static_cast<double>(resolution - 1);
            const double x = min_x + (max_x - min_x) * fx;
            const double y = min_y + (max_y - min_y) * fy;
            const double norm = std::max(std::sqrt(x * x + y * y), kNormFloor);
            const double ux = x / norm;
            const double uy = y / norm;
            std::size_t best = 0;
            double best_score = ux * unit_weights(0, 0) + uy * unit_weights(1, 0);
            for (std::size_t k = 1; k < unit_weights.cols(); ++k) {
                const double score = ux * unit_weights(0, k) + uy * unit_weights(1, k);
                if (score > best_score) {
                    best = k;
                    best_score = score;
                }
            }
            out << x << "," << y << "," << best << "\n";
        }
    }
}

inline void export_boundary_grid(const Model& model, double min_x, double max_x, double min_y, double max_y,
                                 std::size_t resolution, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_boundary_grid: cannot open " + path);
    export_boundary_grid(model, min_x, max_x, min_y, max_y, resolution, out);
}

}  // namespace otcil

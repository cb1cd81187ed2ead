#pragma once

// Task stream construction: synthetic Gaussian clusters with controllable
// cross-task class relatedness, CSV ingestion, seeded class shuffling and
// train/test splitting. Classes are renumbered by arrival order when the
// stream is built, so label k always maps to classifier column k;
// class_order records the original ids.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/matrix.hpp"
#include "otcil/ot.hpp"
#include "otcil/rng.hpp"

namespace otcil {

struct Instance {
    std::vector<double> features;
    int label = 0;
};

struct Task {
    std::size_t index = 0;  // 1-based stage number
    std::vector<Instance> train;
    std::vector<Instance> test;
    std::vector<int> label_set;  // contiguous, ascending
};

struct TaskStream {
    std::vector<Task> tasks;
    std::vector<int> class_order;  // original class id occupying each column
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t total_classes() const noexcept { return class_order.size(); }

    // |Y_1 u ... u Y_stage| for a 1-based stage index
    [[nodiscard]] std::size_t classes_through(std::size_t stage) const {
        std::size_t count = 0;
        for (std::size_t b = 0; b < stage && b < tasks.size(); ++b) count += tasks[b].label_set.size();
        return count;
    }
};

struct SyntheticSpec {
    std::size_t num_classes = 8;
    std::size_t dims = 16;
    std::size_t per_class = 250;
    double center_spread = 3.0;
    double relatedness = 0.0;  // in [0,1]: chance a class center is an offset copy of an earlier one
    double noise_sigma = 0.35;
    std::uint64_t seed = 1993;

    void validate() const {
        if (num_classes < 1 || dims < 1 || per_class < 1)
            throw std::invalid_argument("SyntheticSpec: counts must be >= 1");
        if (relatedness < 0.0 || relatedness > 1.0)
            throw std::invalid_argument("SyntheticSpec: relatedness must lie in [0,1]");
        if (center_spread <= 0.0 || noise_sigma < 0.0)
            throw std::invalid_argument("SyntheticSpec: invalid spread or noise");
    }
};

inline std::vector<Instance> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(mix_seed(spec.seed, 0xB012ull));
    // Related classes sit at a controlled offset from an earlier center:
    // close enough that transport finds them, far enough (relative to the
    // noise radius) that every class stays separable.
    const double noise_radius = spec.noise_sigma * std::sqrt(static_cast<double>(spec.dims));
    const double min_separation = 4.0 * noise_radius;

    std::vector<std::vector<double>> centers(spec.num_classes, std::vector<double>(spec.dims));
    auto distance_to = [&](const std::vector<double>& point, std::size_t existing) {
        double nearest = std::numeric_limits<double>::infinity();
        for (std::size_t other = 0; other < existing; ++other) {
            double sq = 0.0;
            for (std::size_t j = 0; j < spec.dims; ++j) {
                const double diff = point[j] - centers[other][j];
                sq += diff * diff;
            }
            nearest = std::min(nearest, std::sqrt(sq));
        }
        return nearest;
    };

    std::vector<std::size_t> base_uses(spec.num_classes, 0);
    auto pick_base = [&](std::size_t upto) {
        // uniform over earlier centers with at most one offset child already,
        // so no single class accumulates a crowd of near neighbours
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < upto; ++i)
            if (base_uses[i] < 2) pool.push_back(i);
        if (pool.empty())
            for (std::size_t i = 0; i < upto; ++i) pool.push_back(i);
        return pool[static_cast<std::size_t>(rng.below(pool.size()))];
    };

    // relatedness sets how close a class sits to its parent: at 1 the offset
    // hugs the separation floor, at 0 centers are drawn independently
    const double offset_scale =
        std::max(min_separation, 0.3 * spec.center_spread) * (1.2 + (1.0 - spec.relatedness));

    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        const bool related = c > 0 && spec.relatedness > 0.0;
        std::size_t base = 0;
        if (related) {
            base = pick_base(c);
            ++base_uses[base];
        }
        std::vector<double> candidate(spec.dims);
        for (int attempt = 0; attempt < 64; ++attempt) {
            if (related) {
                std::vector<double> direction(spec.dims);
                double norm = 0.0;
                for (double& v : direction) {
                    v = rng.normal();
                    norm += v * v;
                }
                norm = std::max(std::sqrt(norm), 1e-12);
                const double offset = offset_scale * (1.0 + 0.5 * rng.uniform());
                for (std::size_t j = 0; j < spec.dims; ++j)
                    candidate[j] = centers[base][j] + direction[j] / norm * offset;
            } else {
                for (std::size_t j = 0; j < spec.dims; ++j) candidate[j] = rng.normal(0.0, spec.center_spread);
            }
            if (c == 0 || distance_to(candidate, c) >= min_separation) break;
        }
        centers[c] = candidate;
    }

    std::vector<Instance> data;
    data.reserve(spec.num_classes * spec.per_class);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            Instance inst;
            inst.label = static_cast<int>(c);
            inst.features.resize(spec.dims);
            for (std::size_t j = 0; j < spec.dims; ++j)
                inst.features[j] = centers[c][j] + rng.normal(0.0, spec.noise_sigma);
            data.push_back(std::move(inst));
        }
    }
    return data;
}

// CSV: header row, feature columns, final column named "label" holding
// nonnegative integers.
inline std::vector<Instance> load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open " + path);

    auto split = [](const std::string& line) {
        std::vector<std::string> fields;
        std::string field;
        std::stringstream ss(line);
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (!line.empty() && line.back() == ',') fields.emplace_back();
        return fields;
    };

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_csv: empty file " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = split(line);
    if (header.size() < 2 || header.back() != "label")
        throw std::runtime_error("load_csv: header must end with a 'label' column (" + path + ")");
    const std::size_t dims = header.size() - 1;

    std::vector<Instance> data;
    std::size_t line_number = 1;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> fields = split(line);
        if (fields.size() != header.size())
            throw std::runtime_error("load_csv: line " + std::to_string(line_number) + " has " +
                                     std::to_string(fields.size()) + " fields, expected " +
                                     std::to_string(header.size()));
        Instance inst;
        inst.features.resize(dims);
        for (std::size_t j = 0; j < dims; ++j) {
            try {
                std::size_t used = 0;
                inst.features[j] = std::stod(fields[j], &used);
                if (used != fields[j].size()) throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw std::runtime_error("load_csv: non-numeric feature '" + fields[j] + "' at line " +
                                         std::to_string(line_number));
            }
        }
        try {
            std::size_t used = 0;
            const long label = std::stol(fields[dims], &used, 10);
            if (used != fields[dims].size() || label < 0) throw std::invalid_argument("bad label");
            inst.label = static_cast<int>(label);
        } catch (const std::exception&) {
            throw std::runtime_error("load_csv: invalid label '" + fields[dims] + "' at line " +
                                     std::to_string(line_number));
        }
        data.push_back(std::move(inst));
    }
    return data;
}

// base_classes = 0 splits all classes evenly over num_tasks; otherwise task 1
// holds base_classes and the remainder splits evenly over the rest.
inline TaskStream build_stream(const std::vector<Instance>& dataset, std::size_t num_tasks,
                               std::size_t base_classes, std::uint64_t seed, double test_fraction = 0.2) {
    if (num_tasks < 1) throw std::invalid_argument("build_stream: need at least one task");
    if (test_fraction < 0.0 || test_fraction >= 1.0)
        throw std::invalid_argument("build_stream: test_fraction must lie in [0,1)");

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset[i].label].push_back(i);
    if (by_class.empty()) throw std::invalid_argument("build_stream: dataset is empty");

    std::vector<int> class_ids;
    for (const auto& [label, rows] : by_class) class_ids.push_back(label);
    const std::size_t total = class_ids.size();

    std::vector<std::size_t> task_sizes;
    if (base_classes > 0) {
        if (base_classes >= total)
            throw std::invalid_argument("build_stream: base_classes must be smaller than the class count");
        if (num_tasks < 2) throw std::invalid_argument("build_stream: base setting needs at least two tasks");
        const std::size_t rest = total - base_classes;
        if (rest % (num_tasks - 1) != 0)
            throw std::invalid_argument("build_stream: " + std::to_string(rest) + " classes do not split evenly over " +
                                        std::to_string(num_tasks - 1) + " incremental tasks");
        task_sizes.push_back(base_classes);
        task_sizes.insert(task_sizes.end(), num_tasks - 1, rest / (num_tasks - 1));
    } else {
        if (total % num_tasks != 0)
            throw std::invalid_argument("build_stream: " + std::to_string(total) + " classes do not split evenly over " +
                                        std::to_string(num_tasks) + " tasks");
        task_sizes.assign(num_tasks, total / num_tasks);
    }

    TaskStream stream;
    stream.seed = seed;
    stream.class_order = class_ids;
    Rng shuffle_rng(mix_seed(seed, 0x0C1A55ull));
    shuffle_rng.shuffle(stream.class_order);

    std::map<int, int> column_of;
    for (std::size_t i = 0; i < stream.class_order.size(); ++i)
        column_of[stream.class_order[i]] = static_cast<int>(i);

    // per-class deterministic train/test split over the shuffled row order
    std::map<int, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> split_rows;
    for (const auto& [label, rows] : by_class) {
        std::vector<std::size_t> order = rows;
        Rng split_rng(mix_seed(seed, 0x5917ull + static_cast<std::uint64_t>(column_of[label])));
        split_rng.shuffle(order);
        std::size_t n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(order.size()) + 0.5);
        if (n_test >= order.size()) n_test = order.size() - 1;  // keep at least one training row
        auto& [train_rows, test_rows] = split_rows[label];
        test_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
        train_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    }

    std::size_t column = 0;
    for (std::size_t b = 0; b < task_sizes.size(); ++b) {
        Task task;
        task.index = b + 1;
        for (std::size_t k = 0; k < task_sizes[b]; ++k, ++column) {
            const int original = stream.class_order[column];
            task.label_set.push_back(static_cast<int>(column));
            const auto& [train_rows, test_rows] = split_rows[original];
            for (std::size_t row : train_rows) {
                Instance inst = dataset[row];
                inst.label = static_cast<int>(column);
                task.train.push_back(std::move(inst));
            }
            for (std::size_t row : test_rows) {
                Instance inst = dataset[row];
                inst.label = static_cast<int>(column);
                task.test.push_back(std::move(inst));
            }
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// Column-wise standardisation with moments taken from task-1 training data
// only, then applied to the whole stream; later tasks never leak into the
// statistics.
inline void standardize_features(TaskStream& stream) {
    if (stream.tasks.empty() || stream.tasks[0].train.empty())
        throw std::invalid_argument("standardize_features: no task-1 training data");
    const std::size_t dims = stream.tasks[0].train[0].features.size();
    std::vector<double> mean(dims, 0.0), var(dims, 0.0);
    const auto& reference = stream.tasks[0].train;
    for (const Instance& inst : reference)
        for (std::size_t j = 0; j < dims; ++j) mean[j] += inst.features[j];
    for (std::size_t j = 0; j < dims; ++j) mean[j] /= static_cast<double>(reference.size());
    for (const Instance& inst : reference)
        for (std::size_t j = 0; j < dims; ++j) {
            const double d = inst.features[j] - mean[j];
            var[j] += d * d;
        }
    std::vector<double> stddev(dims);
    for (std::size_t j = 0; j < dims; ++j)
        stddev[j] = std::max(std::sqrt(var[j] / static_cast<double>(reference.size())), 1e-12);

    for (Task& task : stream.tasks) {
        for (auto* side : {&task.train, &task.test})
            for (Instance& inst : *side)
                for (std::size_t j = 0; j < dims; ++j)
                    inst.features[j] = (inst.features[j] - mean[j]) / stddev[j];
    }
}

// ---------------------------------------------------------------------------
// Conversions between instance lists and matrix batches

inline Matrix features_matrix(const std::vector<Instance>& instances) {
    if (instances.empty()) return Matrix();
    Matrix out(instances.size(), instances[0].features.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (instances[i].features.size() != out.cols())
            throw std::invalid_argument("features_matrix: inconsistent feature dimensions");
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = instances[i].features[j];
    }
    return out;
}

inline std::vector<int> labels_vector(const std::vector<Instance>& instances) {
    std::vector<int> labels;
    labels.reserve(instances.size());
    for (const Instance& inst : instances) labels.push_back(inst.label);
    return labels;
}

inline LabeledExamples as_examples(const std::vector<Instance>& instances) {
    return LabeledExamples{features_matrix(instances), labels_vector(instances)};
}

}  // namespace otcil

#pragma once

// Per-task training: snapshot capture, classifier augmentation (transported
// or random), rehearsal union, the per-batch composite loss, SGD, and
// exemplar maintenance afterwards. All methods share one code path; they
// differ only in which loss terms are switched on and how new columns are
// initialised, so the first task is bit-identical across methods.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/datasets.hpp"
#include "otcil/exemplars.hpp"
#include "otcil/losses.hpp"
#include "otcil/network.hpp"
#include "otcil/ot.hpp"
#include "otcil/rng.hpp"

namespace otcil {

enum class Method { finetune, replay_kd, coil, pt_only, rt_only };

inline const char* to_string(Method method) {
    switch (method) {
        case Method::finetune: return "finetune";
        case Method::replay_kd: return "replay_kd";
        case Method::coil: return "coil";
        case Method::pt_only: return "pt_only";
        case Method::rt_only: return "rt_only";
    }
    return "unknown";
}

inline Method method_from_string(const std::string& name) {
    if (name == "finetune") return Method::finetune;
    if (name == "replay_kd") return Method::replay_kd;
    if (name == "coil") return Method::coil;
    if (name == "pt_only") return Method::pt_only;
    if (name == "rt_only") return Method::rt_only;
    throw std::invalid_argument("unknown method '" + name +
                                "' (expected finetune|replay_kd|coil|pt_only|rt_only)");
}

struct LrSchedule {
    double initial = 0.03;
    double decay_factor = 0.1;
    std::vector<std::size_t> decay_epochs;

    [[nodiscard]] double at(std::size_t epoch) const {
        double lr = initial;
        for (std::size_t boundary : decay_epochs)
            if (epoch >= boundary) lr *= decay_factor;
        return lr;
    }
};

enum class RtRefresh { per_batch, per_epoch };

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    LrSchedule lr;
    double momentum = 0.8;
    double weight_decay = 0.0;
    std::uint64_t seed = 1993;
    RtRefresh rt_refresh = RtRefresh::per_batch;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        for (std::size_t boundary : lr.decay_epochs)
            if (epochs > 0 && boundary >= epochs)
                throw std::invalid_argument("TrainConfig: lr decay epoch " + std::to_string(boundary) +
                                            " must be before the last epoch");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown loss;  // batch means averaged over the epoch
    double lr = 0.0;
};

struct StageState {
    Model model;
    ExemplarStore store;
    std::size_t completed_tasks = 0;
};

struct TaskRunResult {
    std::vector<EpochRecord> epochs;
    std::size_t nonconverged_transports = 0;
};

// Prospective transport: synthesise classifier columns for the incoming
// classes from the old classifier, with exemplars as origin support and the
// whole new task as goal support, both embedded by the current network.
inline TransportResult pt_initialize(const Model& model, const ExemplarStore& store, const Task& task,
                                     const OtConfig& ot) {
    if (store.empty()) throw std::runtime_error("pt_initialize: exemplar store is empty");
    const std::vector<int> origin_classes = store.class_labels();
    if (origin_classes.size() != model.num_classes())
        throw std::runtime_error("pt_initialize: store covers " + std::to_string(origin_classes.size()) +
                                 " classes but the classifier has " + std::to_string(model.num_classes()));
    const EmbedFn fn = [&model](const Matrix& x) { return embed(model, x); };
    return transport_classifier(store.as_examples(), origin_classes, as_examples(task.train), task.label_set,
                                model.classifier, fn, ot);
}

// Retrospective transport mixing weights: origin = new classes (centers from
// the new task), goal = old classes (centers from the exemplars), both under
// the current embedding. Result is new_classes x old_classes.
struct RtContext {
    Matrix mixing;
    bool converged = true;
};

inline RtContext compute_rt_mixing(const Model& model, const Task& task, const ExemplarStore& store,
                                   const OtConfig& ot) {
    // TODO: config hook to subsample task.train for the origin centers on large tasks
    const ClassCenters origin =
        compute_class_centers(embed(model, features_matrix(task.train)), labels_vector(task.train), task.label_set);
    const LabeledExamples old_examples = store.as_examples();
    const ClassCenters goal =
        compute_class_centers(embed(model, old_examples.features), old_examples.labels, store.class_labels());
    const TransportPlan plan =
        sinkhorn(compute_cost(origin, goal), uniform_marginal(origin.labels.size()),
                 uniform_marginal(goal.labels.size()), ot);
    return RtContext{column_normalized(plan.coupling), plan.converged};
}

namespace detail {

inline Batch gather_batch(const std::vector<Instance>& pool, const std::vector<std::size_t>& order,
                          std::size_t first, std::size_t count) {
    Batch batch;
    batch.inputs = Matrix(count, pool[order[first]].features.size());
    batch.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const Instance& inst = pool[order[first + i]];
        for (std::size_t j = 0; j < batch.inputs.cols(); ++j) batch.inputs(i, j) = inst.features[j];
        batch.labels[i] = inst.label;
    }
    return batch;
}

inline void update_exemplars(StageState& state, const Task& task) {
    const std::size_t total_classes = state.model.num_classes();
    rebalance(state.store, total_classes);
    const std::vector<std::size_t> quotas = class_quotas(state.store.policy(), total_classes);
    const EmbedFn fn = [&state](const Matrix& x) { return embed(state.model, x); };

    std::map<int, std::vector<Instance>> by_class;
    for (const Instance& inst : task.train) by_class[inst.label].push_back(inst);
    for (int label : task.label_set) {
        auto it = by_class.find(label);
        if (it == by_class.end())
            throw std::runtime_error("update_exemplars: task has no training data for class " +
                                     std::to_string(label));
        const std::size_t quota = quotas[static_cast<std::size_t>(label)];
        const std::size_t take = std::min(quota, it->second.size());
        if (take == 0) continue;
        state.store.set_class(label, herding_select(it->second, fn, take));
    }
}

}  // namespace detail

inline TaskRunResult run_task(StageState& state, const Task& task, Method method, const TrainConfig& train_cfg,
                              const LossConfig& loss_cfg, const OtConfig& ot_cfg) {
    train_cfg.validate();
    loss_cfg.validate();
    const std::size_t stage = state.completed_tasks + 1;
    if (task.index != stage)
        throw std::invalid_argument("run_task: task " + std::to_string(task.index) +
                                    " does not follow completed stage " + std::to_string(state.completed_tasks));
    const std::size_t old_classes = state.model.num_classes();
    const std::size_t new_classes = task.label_set.size();
    if (new_classes == 0) throw std::invalid_argument("run_task: task has no classes");
    if (task.label_set.front() != static_cast<int>(old_classes))
        throw std::invalid_argument("run_task: task labels do not extend the known class range");

    const bool first_task = old_classes == 0;
    const bool uses_memory = method != Method::finetune;
    const bool uses_pt = (method == Method::coil || method == Method::pt_only) && !first_task;
    const bool uses_rt = (method == Method::coil || method == Method::rt_only) && !first_task;

    Rng rng(mix_seed(train_cfg.seed, 0xB000ull + stage));
    const ModelSnapshot snapshot = capture_snapshot(state.model);

    TaskRunResult result;
    Matrix frozen_new;  // PT-initialised columns, frozen as the distillation teacher block
    if (uses_pt) {
        TransportResult transported = pt_initialize(state.model, state.store, task, ot_cfg);
        if (!transported.plan.converged) ++result.nonconverged_transports;
        frozen_new = transported.weights;
        append_classifier_columns(state.model, transported.weights);
    } else {
        append_classifier_columns(
            state.model, random_classifier_columns(state.model.embedding.embed_dim, new_classes, rng));
    }

    std::vector<Instance> train_pool = task.train;
    if (uses_memory && !state.store.empty()) {
        const std::vector<Instance> replay = state.store.all();
        train_pool.insert(train_pool.end(), replay.begin(), replay.end());
    }

    const double lambda =
        (first_task || !uses_memory) ? 0.0 : lambda_class_ratio(old_classes, state.model.num_classes());

    SgdOptimizer optimizer(state.model);
    std::vector<std::size_t> order(train_pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        const double lr = train_cfg.lr.at(epoch);
        const double gamma =
            uses_rt ? gamma_schedule(epoch, train_cfg.epochs, loss_cfg.gamma_exponent) : 0.0;
        const bool pt_active = uses_pt && epoch < loss_cfg.pt_epochs;
        const bool rt_active = uses_rt && gamma > 0.0;

        RtContext rt;
        Matrix rt_frozen;  // per-epoch refresh keeps the transported-back classifier fixed
        if (rt_active) {
            rt = compute_rt_mixing(state.model, task, state.store, ot_cfg);
            if (!rt.converged) ++result.nonconverged_transports;
            if (train_cfg.rt_refresh == RtRefresh::per_epoch)
                rt_frozen = matmul(columns(state.model.classifier, old_classes, new_classes), rt.mixing);
        }

        rng.shuffle(order);
        LossBreakdown epoch_mean;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += train_cfg.batch_size) {
            const std::size_t count = std::min(train_cfg.batch_size, order.size() - start);
            const Batch batch = detail::gather_batch(train_pool, order, start, count);

            Objective objective;
            objective.tau = loss_cfg.tau;
            objective.ce_weight = 1.0 - lambda;
            objective.kd_weight = lambda;
            objective.lambda_value = lambda;
            objective.gamma_value = gamma;
            if (!first_task && uses_memory) objective.snapshot = &snapshot;
            if (pt_active) {
                objective.pt_weight = 1.0;
                objective.transported_new = &frozen_new;
            }
            if (rt_active) {
                objective.rt_weight = gamma;
                if (train_cfg.rt_refresh == RtRefresh::per_batch)
                    objective.rt_mixing = &rt.mixing;
                else
                    objective.rt_transported = &rt_frozen;
            }

            Gradients grads = zero_gradients(state.model);
            const LossBreakdown loss = evaluate_objective(state.model, batch, objective, &grads);
            if (!std::isfinite(loss.total))
                throw std::runtime_error("run_task: non-finite loss at stage " + std::to_string(stage) +
                                         ", epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batches));
            optimizer.step(state.model, grads, lr, train_cfg.momentum, train_cfg.weight_decay);

            epoch_mean.ce += loss.ce;
            epoch_mean.kd += loss.kd;
            epoch_mean.pt += loss.pt;
            epoch_mean.rt += loss.rt;
            epoch_mean.total += loss.total;
            ++batches;
        }
        if (batches > 0) {
            const double inv = 1.0 / static_cast<double>(batches);
            epoch_mean.ce *= inv;
            epoch_mean.kd *= inv;
            epoch_mean.pt *= inv;
            epoch_mean.rt *= inv;
            epoch_mean.total *= inv;
        }
        epoch_mean.lambda_value = lambda;
        epoch_mean.gamma_value = gamma;
        result.epochs.push_back(EpochRecord{epoch, epoch_mean, lr});
    }

    if (uses_memory) detail::update_exemplars(state, task);
    state.completed_tasks = stage;
    return result;
}

// Nearest-class-mean labels for a query batch: class means over the given
// references, means and queries length-normalised, ties to the earliest
// entry of class_ids.
inline std::vector<int> ncm_predict(const Model& model, const LabeledExamples& references,
                                    const std::vector<int>& class_ids, const Matrix& queries) {
    if (class_ids.empty()) throw std::invalid_argument("ncm_predict: no classes given");
    const ClassCenters centers =
        compute_class_centers(embed(model, references.features), references.labels, class_ids);
    const Matrix unit_centers = normalize_rows(centers.centers);
    const Matrix unit_queries = normalize_rows(embed(model, queries));

    std::vector<int> labels(queries.rows());
    for (std::size_t i = 0; i < unit_queries.rows(); ++i) {
        std::size_t best = 0;
        double best_dist = squared_distance(unit_queries.row(i), unit_centers.row(0), unit_centers.cols());
        for (std::size_t c = 1; c < unit_centers.rows(); ++c) {
            const double dist = squared_distance(unit_queries.row(i), unit_centers.row(c), unit_centers.cols());
            if (dist < best_dist) {
                best = c;
                best_dist = dist;
            }
        }
        labels[i] = class_ids[best];
    }
    return labels;
}

}  // namespace otcil

#pragma once

// Loss terms and schedules for incremental training. Every distillation
// term is a tempered cross-entropy between a frozen teacher distribution
// and a live student distribution; teachers are always computed from a
// snapshot and treated as constants, so no gradient ever reaches them.
//
// evaluate_objective() is the single entry point the trainer uses: it
// computes the weighted combination of all active terms and, when asked,
// the exact gradients with respect to every live parameter. Transport
// mixing weights enter as constants.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/matrix.hpp"
#include "otcil/network.hpp"

namespace otcil {

struct LossConfig {
    double tau = 2.0;
    double gamma_exponent = 2.0;
    std::size_t pt_epochs = 5;

    void validate() const {
        if (!(tau > 0.0)) throw std::invalid_argument("LossConfig: tau must be > 0");
        if (!(gamma_exponent > 0.0)) throw std::invalid_argument("LossConfig: gamma_exponent must be > 0");
    }
};

struct LossBreakdown {
    double ce = 0.0;
    double kd = 0.0;
    double pt = 0.0;
    double rt = 0.0;
    double total = 0.0;
    double lambda_value = 0.0;
    double gamma_value = 0.0;
};

// ---------------------------------------------------------------------------
// Schedules

inline double lambda_class_ratio(std::size_t old_classes, std::size_t total_classes) {
    if (total_classes == 0) throw std::invalid_argument("lambda_class_ratio: no classes");
    if (old_classes > total_classes)
        throw std::invalid_argument("lambda_class_ratio: old class count exceeds total");
    return static_cast<double>(old_classes) / static_cast<double>(total_classes);
}

inline double gamma_schedule(std::size_t epoch, std::size_t total_epochs, double exponent = 2.0) {
    if (total_epochs < 1) throw std::invalid_argument("gamma_schedule: total_epochs must be >= 1");
    if (epoch > total_epochs)
        throw std::out_of_range("gamma_schedule: epoch " + std::to_string(epoch) + " exceeds total " +
                                std::to_string(total_epochs));
    if (epoch == total_epochs) return 1.0;
    return std::pow(static_cast<double>(epoch) / static_cast<double>(total_epochs), exponent);
}

// ---------------------------------------------------------------------------
// Probability helpers

inline std::vector<double> softmax_with_temperature(const std::vector<double>& logits, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("softmax_with_temperature: tau must be > 0");
    std::vector<double> probs(logits.size());
    double peak = -std::numeric_limits<double>::infinity();
    for (double v : logits) peak = std::max(peak, v / tau);
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        probs[k] = std::exp(logits[k] / tau - peak);
        sum += probs[k];
    }
    for (double& p : probs) p /= sum;
    return probs;
}

inline Matrix softmax_rows(const Matrix& logits, double tau) {
    Matrix probs(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* in = logits.row(i);
        double* out = probs.row(i);
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < logits.cols(); ++k) peak = std::max(peak, in[k] / tau);
        double sum = 0.0;
        for (std::size_t k = 0; k < logits.cols(); ++k) {
            out[k] = std::exp(in[k] / tau - peak);
            sum += out[k];
        }
        for (std::size_t k = 0; k < logits.cols(); ++k) out[k] /= sum;
    }
    return probs;
}

inline Matrix log_softmax_rows(const Matrix& logits, double tau) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* in = logits.row(i);
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < logits.cols(); ++k) peak = std::max(peak, in[k] / tau);
        double sum = 0.0;
        for (std::size_t k = 0; k < logits.cols(); ++k) sum += std::exp(in[k] / tau - peak);
        const double lse = peak + std::log(sum);
        for (std::size_t k = 0; k < logits.cols(); ++k) out(i, k) = in[k] / tau - lse;
    }
    return out;
}

// Batch-mean cross-entropy of hard labels against logits (tau = 1).
inline double ce_from_logits(const Matrix& logits, const std::vector<int>& labels) {
    if (logits.rows() != labels.size()) throw std::invalid_argument("ce_from_logits: batch size mismatch");
    const Matrix logq = log_softmax_rows(logits, 1.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
            throw std::out_of_range("ce_from_logits: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(logits.cols()) + ")");
        loss -= logq(i, static_cast<std::size_t>(y));
    }
    return loss / static_cast<double>(logits.rows());
}

// Batch-mean of sum_k -p_k log q_k with both sides tempered by tau;
// the teacher side is a constant.
inline double tempered_cross_entropy(const Matrix& teacher_logits, const Matrix& student_logits, double tau) {
    if (!teacher_logits.same_shape(student_logits))
        throw std::invalid_argument("tempered_cross_entropy: teacher/student shapes differ");
    const Matrix p = softmax_rows(teacher_logits, tau);
    const Matrix logq = log_softmax_rows(student_logits, tau);
    double loss = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t k = 0; k < p.cols(); ++k) loss -= p(i, k) * logq(i, k);
    return loss / static_cast<double>(p.rows());
}

// ---------------------------------------------------------------------------
// Spec-level loss operations (values only; gradients live in
// evaluate_objective below)

inline double ce_loss(const Model& model, const Batch& batch) {
    return ce_from_logits(cosine_logits(model, embed(model, batch.inputs)), batch.labels);
}

inline double kd_loss(const Matrix& teacher_old_logits, const Matrix& student_old_logits, double tau) {
    return tempered_cross_entropy(teacher_old_logits, student_old_logits, tau);
}

inline LossBreakdown baseline_loss(const Model& model, const Batch& batch, const ModelSnapshot* snapshot,
                                   double tau) {
    LossBreakdown out;
    const Matrix student_logits = cosine_logits(model, embed(model, batch.inputs));
    out.ce = ce_from_logits(student_logits, batch.labels);
    if (snapshot != nullptr && snapshot->model.num_classes() > 0) {
        const std::size_t old_classes = snapshot->model.num_classes();
        if (old_classes > model.num_classes())
            throw std::invalid_argument("baseline_loss: snapshot has more classes than the live model");
        const Matrix teacher =
            cosine_logits(snapshot->model, embed(snapshot->model, batch.inputs));
        out.kd = kd_loss(teacher, columns(student_logits, 0, old_classes), tau);
        out.lambda_value = lambda_class_ratio(old_classes, model.num_classes());
    }
    out.total = (1.0 - out.lambda_value) * out.ce + out.lambda_value * out.kd;
    return out;
}

// Teacher is [frozen old classifier, transported new classifier] under the
// frozen embedding; student is the live model over all seen classes.
inline double pt_loss(const Model& model, const Batch& batch, const ModelSnapshot& snapshot,
                      const Matrix& transported_new, double tau) {
    const std::size_t old_classes = snapshot.model.num_classes();
    if (old_classes + transported_new.cols() != model.num_classes())
        throw std::invalid_argument("pt_loss: transported column count " + std::to_string(transported_new.cols()) +
                                    " does not extend " + std::to_string(old_classes) + " old classes to " +
                                    std::to_string(model.num_classes()));
    const Matrix teacher_embed = embed(snapshot.model, batch.inputs);
    const Matrix teacher_logits = cosine_scores(teacher_embed, hconcat(snapshot.model.classifier, transported_new),
                                                snapshot.model.logit_scale);
    const Matrix student_logits = cosine_logits(model, embed(model, batch.inputs));
    return tempered_cross_entropy(teacher_logits, student_logits, tau);
}

// Teacher is the frozen old model; student is the transported-back
// classifier applied to the live embedding. Softmax runs over old classes
// only.
inline double rt_loss(const Model& model, const Batch& batch, const ModelSnapshot& snapshot,
                      const Matrix& transported_old, double tau) {
    const std::size_t old_classes = snapshot.model.num_classes();
    if (transported_old.cols() != old_classes)
        throw std::invalid_argument("rt_loss: transported classifier must cover the " +
                                    std::to_string(old_classes) + " old classes");
    const Matrix teacher_logits =
        cosine_logits(snapshot.model, embed(snapshot.model, batch.inputs));
    const Matrix student_logits =
        cosine_scores(embed(model, batch.inputs), transported_old, model.logit_scale);
    return tempered_cross_entropy(teacher_logits, student_logits, tau);
}

// ---------------------------------------------------------------------------
// Composite objective with gradients

// Term weights are explicit so each loss can also be exercised (and
// gradient-checked) in isolation. The trainer fills them from the
// schedules: ce (1-lambda), kd (lambda), pt (0/1 gate), rt (gamma).
struct Objective {
    double tau = 2.0;
    double ce_weight = 1.0;
    double kd_weight = 0.0;
    double pt_weight = 0.0;
    double rt_weight = 0.0;
    const ModelSnapshot* snapshot = nullptr;  // required by kd/pt/rt
    const Matrix* transported_new = nullptr;  // d x new_classes, PT teacher block (frozen)
    const Matrix* rt_mixing = nullptr;        // new_classes x old_classes, constant mixing weights
    const Matrix* rt_transported = nullptr;   // d x old_classes, fixed transported-back classifier
                                              // (per-epoch refresh; no gradient into the classifier)
    double lambda_value = 0.0;                // echoed into the breakdown
    double gamma_value = 0.0;
};

namespace detail {

// d(tempered cross-entropy)/d(student logits) = (q - p) / (n * tau)
inline Matrix tempered_ce_grad(const Matrix& teacher_logits, const Matrix& student_logits, double tau) {
    const Matrix p = softmax_rows(teacher_logits, tau);
    Matrix grad = softmax_rows(student_logits, tau);
    const double inv = 1.0 / (tau * static_cast<double>(p.rows()));
    for (std::size_t i = 0; i < grad.data().size(); ++i) grad.data()[i] = (grad.data()[i] - p.data()[i]) * inv;
    return grad;
}

}  // namespace detail

inline LossBreakdown evaluate_objective(const Model& model, const Batch& batch, const Objective& obj,
                                        Gradients* grads = nullptr) {
    if (!(obj.tau > 0.0)) throw std::invalid_argument("evaluate_objective: tau must be > 0");
    const bool needs_teacher = obj.kd_weight != 0.0 || obj.pt_weight != 0.0 || obj.rt_weight != 0.0;
    if (needs_teacher && obj.snapshot == nullptr)
        throw std::invalid_argument("evaluate_objective: distillation terms require a snapshot");

    LossBreakdown out;
    out.lambda_value = obj.lambda_value;
    out.gamma_value = obj.gamma_value;

    ForwardTrace trace;
    const Matrix embeddings = embed(model, batch.inputs, grads ? &trace : nullptr);
    const Matrix student_logits = cosine_scores(embeddings, model.classifier, model.logit_scale);
    const std::size_t n = batch.inputs.rows();
    const std::size_t total_classes = model.num_classes();

    Matrix head_grad;       // dL/d(student_logits), accumulated over ce/kd/pt
    Matrix embedding_grad;  // dL/d(embeddings)
    if (grads) {
        head_grad = Matrix(n, total_classes);
        embedding_grad = Matrix(n, model.embedding.embed_dim);
    }

    out.ce = ce_from_logits(student_logits, batch.labels);
    if (grads && obj.ce_weight != 0.0) {
        Matrix ce_grad = softmax_rows(student_logits, 1.0);
        for (std::size_t i = 0; i < n; ++i) ce_grad(i, static_cast<std::size_t>(batch.labels[i])) -= 1.0;
        scale_in_place(ce_grad, obj.ce_weight / static_cast<double>(n));
        axpy(head_grad, ce_grad);
    }

    Matrix snapshot_embed;
    Matrix teacher_old_logits;
    std::size_t old_classes = 0;
    if (needs_teacher) {
        old_classes = obj.snapshot->model.num_classes();
        snapshot_embed = embed(obj.snapshot->model, batch.inputs);
        teacher_old_logits =
            cosine_scores(snapshot_embed, obj.snapshot->model.classifier, obj.snapshot->model.logit_scale);
    }

    if (obj.kd_weight != 0.0 || (needs_teacher && old_classes > 0)) {
        if (old_classes > 0) {
            const Matrix student_old = columns(student_logits, 0, old_classes);
            out.kd = tempered_cross_entropy(teacher_old_logits, student_old, obj.tau);
            if (grads && obj.kd_weight != 0.0) {
                const Matrix kd_grad = detail::tempered_ce_grad(teacher_old_logits, student_old, obj.tau);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < old_classes; ++k)
                        head_grad(i, k) += obj.kd_weight * kd_grad(i, k);
            }
        }
    }

    if (obj.pt_weight != 0.0) {
        if (obj.transported_new == nullptr)
            throw std::invalid_argument("evaluate_objective: PT term requires transported_new");
        if (old_classes + obj.transported_new->cols() != total_classes)
            throw std::invalid_argument("evaluate_objective: PT teacher width mismatch");
        const Matrix pt_teacher =
            cosine_scores(snapshot_embed, hconcat(obj.snapshot->model.classifier, *obj.transported_new),
                          obj.snapshot->model.logit_scale);
        out.pt = tempered_cross_entropy(pt_teacher, student_logits, obj.tau);
        if (grads) {
            Matrix pt_grad = detail::tempered_ce_grad(pt_teacher, student_logits, obj.tau);
            scale_in_place(pt_grad, obj.pt_weight);
            axpy(head_grad, pt_grad);
        }
    }

    if (obj.rt_weight != 0.0) {
        if (old_classes == 0) throw std::invalid_argument("evaluate_objective: RT term requires old classes");
        const std::size_t new_classes = total_classes - old_classes;
        Matrix transported_old;
        if (obj.rt_mixing != nullptr) {
            if (obj.rt_mixing->rows() != new_classes || obj.rt_mixing->cols() != old_classes)
                throw std::invalid_argument("evaluate_objective: rt_mixing must be new_classes x old_classes");
            transported_old = matmul(columns(model.classifier, old_classes, new_classes), *obj.rt_mixing);
        } else if (obj.rt_transported != nullptr) {
            if (obj.rt_transported->cols() != old_classes)
                throw std::invalid_argument("evaluate_objective: rt_transported must cover the old classes");
            transported_old = *obj.rt_transported;
        } else {
            throw std::invalid_argument("evaluate_objective: RT term requires rt_mixing or rt_transported");
        }
        const Matrix rt_student = cosine_scores(embeddings, transported_old, model.logit_scale);
        out.rt = tempered_cross_entropy(teacher_old_logits, rt_student, obj.tau);
        if (grads) {
            Matrix rt_grad = detail::tempered_ce_grad(teacher_old_logits, rt_student, obj.tau);
            scale_in_place(rt_grad, obj.rt_weight);
            if (obj.rt_mixing != nullptr) {
                Matrix d_transported(transported_old.rows(), transported_old.cols());
                cosine_scores_backward(embeddings, transported_old, model.logit_scale, rt_grad, &embedding_grad,
                                       &d_transported);
                const Matrix d_live_new = matmul(d_transported, transpose(*obj.rt_mixing));
                for (std::size_t i = 0; i < d_live_new.rows(); ++i)
                    for (std::size_t k = 0; k < new_classes; ++k)
                        grads->classifier(i, old_classes + k) += d_live_new(i, k);
            } else {
                cosine_scores_backward(embeddings, transported_old, model.logit_scale, rt_grad, &embedding_grad,
                                       nullptr);
            }
        }
    }

    out.total = obj.ce_weight * out.ce + obj.kd_weight * out.kd + obj.pt_weight * out.pt + obj.rt_weight * out.rt;

    if (grads) {
        cosine_scores_backward(embeddings, model.classifier, model.logit_scale, head_grad, &embedding_grad,
                               &grads->classifier);
        embed_backward(model, trace, embedding_grad, *grads);
    }
    return out;
}

// Full combination: (1-lambda) CE + lambda KD + PT while epoch < pt_epochs
// + gamma(epoch) RT. transported_old is the already-synthesised d x old
// classifier (value-level; the trainer's gradient path goes through
// evaluate_objective with the mixing weights instead).
inline LossBreakdown coil_total(const Model& model, const Batch& batch, const ModelSnapshot* snapshot,
                                const Matrix* transported_new, const Matrix* transported_old, std::size_t epoch,
                                std::size_t total_epochs, const LossConfig& cfg) {
    cfg.validate();
    LossBreakdown out = baseline_loss(model, batch, snapshot, cfg.tau);
    if (snapshot == nullptr || snapshot->model.num_classes() == 0) {
        out.total = out.ce;
        return out;
    }
    const bool pt_active = epoch < cfg.pt_epochs;
    if (pt_active && transported_new != nullptr) out.pt = pt_loss(model, batch, *snapshot, *transported_new, cfg.tau);
    out.gamma_value = gamma_schedule(std::min(epoch, total_epochs), total_epochs, cfg.gamma_exponent);
    if (out.gamma_value != 0.0 && transported_old != nullptr)
        out.rt = rt_loss(model, batch, *snapshot, *transported_old, cfg.tau);
    out.total = (1.0 - out.lambda_value) * out.ce + out.lambda_value * out.kd + (pt_active ? out.pt : 0.0) +
                out.gamma_value * out.rt;
    return out;
}

}  // namespace otcil

#pragma once

// Entropic optimal transport between class sets, and the classifier
// synthesis built on top of it. A transport plan couples the classes of an
// origin task with the classes of a goal task; column-normalising the plan
// turns each goal classifier into a convex combination of origin
// classifiers. The Sinkhorn solve runs in log domain so small epsilon never
// underflows the kernel.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/matrix.hpp"

namespace otcil {

struct ClassCenters {
    std::vector<int> labels;  // one entry per row of centers
    Matrix centers;           // num_classes x d
};

struct CostMatrix {
    Matrix values;  // origin classes x goal classes, squared distances
};

enum class CostNormalization { none, divide_by_mean };

struct OtConfig {
    double epsilon = 0.45;
    std::size_t max_iterations = 1000;
    double tolerance = 1e-6;
    CostNormalization cost_normalization = CostNormalization::divide_by_mean;

    void validate() const {
        if (!(epsilon > 0.0)) throw std::invalid_argument("OtConfig: epsilon must be > 0");
        if (!(tolerance > 0.0)) throw std::invalid_argument("OtConfig: tolerance must be > 0");
        if (max_iterations < 1) throw std::invalid_argument("OtConfig: max_iterations must be >= 1");
    }
};

struct TransportPlan {
    Matrix coupling;  // alpha x beta, nonnegative
    std::vector<double> mu1;
    std::vector<double> mu2;
    bool converged = false;
    std::size_t iterations_used = 0;
};

// Flat batch of labelled feature rows; the minimal view both the trainer and
// the OT layer agree on.
struct LabeledExamples {
    Matrix features;          // n x D (or n x d when already embedded)
    std::vector<int> labels;  // length n
};

using EmbedFn = std::function<Matrix(const Matrix&)>;

inline ClassCenters compute_class_centers(const Matrix& embeddings, const std::vector<int>& row_labels,
                                          const std::vector<int>& wanted_labels) {
    if (embeddings.rows() != row_labels.size())
        throw std::invalid_argument("compute_class_centers: one label per embedding row required");
    ClassCenters out;
    out.labels = wanted_labels;
    out.centers = Matrix(wanted_labels.size(), embeddings.cols());
    for (std::size_t c = 0; c < wanted_labels.size(); ++c) {
        const int label = wanted_labels[c];
        std::size_t count = 0;
        double* center = out.centers.row(c);
        for (std::size_t i = 0; i < embeddings.rows(); ++i) {
            if (row_labels[i] != label) continue;
            const double* row = embeddings.row(i);
            for (std::size_t j = 0; j < embeddings.cols(); ++j) center[j] += row[j];
            ++count;
        }
        if (count == 0)
            throw std::invalid_argument("compute_class_centers: no instances for class " + std::to_string(label));
        for (std::size_t j = 0; j < embeddings.cols(); ++j) center[j] /= static_cast<double>(count);
    }
    return out;
}

inline CostMatrix compute_cost(const ClassCenters& origin, const ClassCenters& goal) {
    if (origin.centers.cols() != goal.centers.cols())
        throw std::invalid_argument("compute_cost: center dimensions differ (" +
                                    std::to_string(origin.centers.cols()) + " vs " +
                                    std::to_string(goal.centers.cols()) + ")");
    CostMatrix cost;
    cost.values = Matrix(origin.centers.rows(), goal.centers.rows());
    for (std::size_t n = 0; n < origin.centers.rows(); ++n)
        for (std::size_t m = 0; m < goal.centers.rows(); ++m)
            cost.values(n, m) = squared_distance(origin.centers.row(n), goal.centers.row(m), origin.centers.cols());
    return cost;
}

namespace detail {

inline double log_sum_exp(const std::vector<double>& terms) {
    double peak = -std::numeric_limits<double>::infinity();
    for (double t : terms) peak = std::max(peak, t);
    if (!std::isfinite(peak)) return peak;
    double sum = 0.0;
    for (double t : terms) sum += std::exp(t - peak);
    return peak + std::log(sum);
}

inline void validate_marginal(const std::vector<double>& mu, std::size_t expected, const char* name) {
    if (mu.size() != expected)
        throw std::invalid_argument(std::string("sinkhorn: ") + name + " length does not match cost matrix");
    double sum = 0.0;
    for (double v : mu) {
        if (!(v > 0.0)) throw std::invalid_argument(std::string("sinkhorn: ") + name + " must be strictly positive");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument(std::string("sinkhorn: ") + name + " must sum to 1");
}

}  // namespace detail

inline std::vector<double> uniform_marginal(std::size_t n) {
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

inline TransportPlan sinkhorn(const CostMatrix& cost, const std::vector<double>& mu1,
                              const std::vector<double>& mu2, const OtConfig& cfg) {
    cfg.validate();
    const std::size_t alpha = cost.values.rows();
    const std::size_t beta = cost.values.cols();
    if (alpha == 0 || beta == 0) throw std::invalid_argument("sinkhorn: empty cost matrix");
    for (double v : cost.values.data())
        if (!std::isfinite(v) || v < 0.0)
            throw std::invalid_argument("sinkhorn: cost entries must be finite and nonnegative");
    detail::validate_marginal(mu1, alpha, "mu1");
    detail::validate_marginal(mu2, beta, "mu2");

    Matrix scaled = cost.values;
    if (cfg.cost_normalization == CostNormalization::divide_by_mean) {
        double mean = 0.0;
        for (double v : scaled.data()) mean += v;
        mean /= static_cast<double>(scaled.data().size());
        if (mean > 0.0) scale_in_place(scaled, 1.0 / mean);
    }

    const double eps = cfg.epsilon;
    std::vector<double> f(alpha, 0.0), g(beta, 0.0);
    std::vector<double> log_mu1(alpha), log_mu2(beta);
    for (std::size_t i = 0; i < alpha; ++i) log_mu1[i] = std::log(mu1[i]);
    for (std::size_t j = 0; j < beta; ++j) log_mu2[j] = std::log(mu2[j]);

    TransportPlan plan;
    plan.mu1 = mu1;
    plan.mu2 = mu2;
    plan.coupling = Matrix(alpha, beta);

    std::vector<double> terms(std::max(alpha, beta));
    auto rebuild_coupling = [&] {
        for (std::size_t i = 0; i < alpha; ++i)
            for (std::size_t j = 0; j < beta; ++j)
                plan.coupling(i, j) = std::exp((f[i] + g[j] - scaled(i, j)) / eps);
    };

    double violation = std::numeric_limits<double>::infinity();
    std::size_t iter = 0;
    for (; iter < cfg.max_iterations; ++iter) {
        for (std::size_t i = 0; i < alpha; ++i) {
            terms.resize(beta);
            for (std::size_t j = 0; j < beta; ++j) terms[j] = (g[j] - scaled(i, j)) / eps;
            f[i] = eps * (log_mu1[i] - detail::log_sum_exp(terms));
        }
        for (std::size_t j = 0; j < beta; ++j) {
            terms.resize(alpha);
            for (std::size_t i = 0; i < alpha; ++i) terms[i] = (f[i] - scaled(i, j)) / eps;
            g[j] = eps * (log_mu2[j] - detail::log_sum_exp(terms));
        }
        rebuild_coupling();
        violation = 0.0;
        for (std::size_t i = 0; i < alpha; ++i) {
            double row_sum = 0.0;
            for (std::size_t j = 0; j < beta; ++j) row_sum += plan.coupling(i, j);
            violation = std::max(violation, std::abs(row_sum - mu1[i]));
        }
        for (std::size_t j = 0; j < beta; ++j) {
            double col_sum = 0.0;
            for (std::size_t i = 0; i < alpha; ++i) col_sum += plan.coupling(i, j);
            violation = std::max(violation, std::abs(col_sum - mu2[j]));
        }
        if (violation <= cfg.tolerance) {
            plan.converged = true;
            ++iter;
            break;
        }
    }
    plan.iterations_used = iter;
    return plan;
}

// Column-normalised plan: mixing(i, j) = T(i, j) / sum_i T(i, j). Each goal
// column of the synthesised classifier is then origin_weights * mixing.
inline Matrix column_normalized(const Matrix& coupling) {
    Matrix mixing = coupling;
    for (std::size_t j = 0; j < mixing.cols(); ++j) {
        double col_sum = 0.0;
        for (std::size_t i = 0; i < mixing.rows(); ++i) col_sum += mixing(i, j);
        const double denom = std::max(col_sum, 1e-300);
        for (std::size_t i = 0; i < mixing.rows(); ++i) mixing(i, j) /= denom;
    }
    return mixing;
}

struct TransportResult {
    Matrix weights;  // d x beta, synthesised goal classifier
    Matrix mixing;   // alpha x beta, convex mixing weights per goal column
    TransportPlan plan;
};

inline TransportResult transport_classifier(const LabeledExamples& origin_exemplars,
                                            const std::vector<int>& origin_classes,
                                            const LabeledExamples& goal_exemplars,
                                            const std::vector<int>& goal_classes, const Matrix& origin_weights,
                                            const EmbedFn& embed, const OtConfig& cfg,
                                            const std::vector<double>& mu1 = {},
                                            const std::vector<double>& mu2 = {}) {
    const std::size_t alpha = origin_classes.size();
    const std::size_t beta = goal_classes.size();
    if (origin_weights.cols() != alpha)
        throw std::invalid_argument("transport_classifier: origin weight columns (" +
                                    std::to_string(origin_weights.cols()) + ") must equal origin class count (" +
                                    std::to_string(alpha) + ")");

    const ClassCenters origin_centers =
        compute_class_centers(embed(origin_exemplars.features), origin_exemplars.labels, origin_classes);
    const ClassCenters goal_centers =
        compute_class_centers(embed(goal_exemplars.features), goal_exemplars.labels, goal_classes);
    const CostMatrix cost = compute_cost(origin_centers, goal_centers);

    TransportResult result;
    result.plan = sinkhorn(cost, mu1.empty() ? uniform_marginal(alpha) : mu1,
                           mu2.empty() ? uniform_marginal(beta) : mu2, cfg);
    result.mixing = column_normalized(result.plan.coupling);
    result.weights = matmul(origin_weights, result.mixing);
    return result;
}

}  // namespace otcil

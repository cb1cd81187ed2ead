#pragma once

// Exemplar memory with greedy herding selection. Per-class lists are kept in
// selection order, so shrinking a quota is a prefix truncation and never
// needs reselection.

#include <algorithm>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/datasets.hpp"
#include "otcil/matrix.hpp"

namespace otcil {

enum class BudgetKind { fixed_total, fixed_per_class };

struct BudgetPolicy {
    BudgetKind kind = BudgetKind::fixed_per_class;
    std::size_t amount = 20;
};

// Greedy herding over precomputed embeddings of a single class: step k picks
// the row whose inclusion keeps the running mean closest to the class mean.
// Ties break toward the lowest original index. Returns selected row indices
// in selection order.
inline std::vector<std::size_t> herding_order(const Matrix& embeddings, std::size_t count) {
    const std::size_t n = embeddings.rows();
    if (count > n)
        throw std::invalid_argument("herding_order: requested " + std::to_string(count) + " of " +
                                    std::to_string(n) + " instances");
    const std::size_t d = embeddings.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += embeddings(i, j);
    for (double& v : mean) v /= static_cast<double>(n);

    std::vector<std::size_t> picked;
    std::vector<bool> used(n, false);
    std::vector<double> running_sum(d, 0.0);
    for (std::size_t step = 1; picked.size() < count; ++step) {
        std::size_t best = n;
        double best_score = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            double score = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double candidate = (running_sum[j] + embeddings(i, j)) / static_cast<double>(step);
                const double diff = mean[j] - candidate;
                score += diff * diff;
            }
            if (best == n || score < best_score) {
                best = i;
                best_score = score;
            }
        }
        used[best] = true;
        picked.push_back(best);
        for (std::size_t j = 0; j < d; ++j) running_sum[j] += embeddings(best, j);
    }
    return picked;
}

inline std::vector<Instance> herding_select(const std::vector<Instance>& instances, const EmbedFn& embed,
                                            std::size_t count) {
    if (count > instances.size())
        throw std::invalid_argument("herding_select: budget " + std::to_string(count) + " exceeds class size " +
                                    std::to_string(instances.size()));
    const std::vector<std::size_t> order = herding_order(embed(features_matrix(instances)), count);
    std::vector<Instance> selected;
    selected.reserve(count);
    for (std::size_t idx : order) selected.push_back(instances[idx]);
    return selected;
}

// Per-class quotas under a budget policy; under fixed_total the remainder
// after the even split goes to the lowest class ids.
inline std::vector<std::size_t> class_quotas(const BudgetPolicy& policy, std::size_t num_classes) {
    if (num_classes == 0) return {};
    if (policy.kind == BudgetKind::fixed_per_class) return std::vector<std::size_t>(num_classes, policy.amount);
    const std::size_t base = policy.amount / num_classes;
    const std::size_t remainder = policy.amount % num_classes;
    std::vector<std::size_t> quotas(num_classes, base);
    for (std::size_t c = 0; c < remainder; ++c) ++quotas[c];
    return quotas;
}

class ExemplarStore {
public:
    ExemplarStore() = default;
    explicit ExemplarStore(BudgetPolicy policy) : policy_(policy) {}

    [[nodiscard]] const BudgetPolicy& policy() const noexcept { return policy_; }
    [[nodiscard]] bool empty() const noexcept { return per_class_.empty(); }
    [[nodiscard]] std::size_t class_count() const noexcept { return per_class_.size(); }

    [[nodiscard]] std::size_t total_count() const noexcept {
        std::size_t total = 0;
        for (const auto& [label, list] : per_class_) total += list.size();
        return total;
    }

    [[nodiscard]] std::vector<int> class_labels() const {
        std::vector<int> labels;
        labels.reserve(per_class_.size());
        for (const auto& [label, list] : per_class_) labels.push_back(label);
        return labels;
    }

    void set_class(int label, std::vector<Instance> herded) {
        if (herded.empty()) throw std::invalid_argument("ExemplarStore: refusing to store an empty class list");
        per_class_[label] = std::move(herded);
    }

    [[nodiscard]] const std::vector<Instance>& exemplars(int label) const {
        auto it = per_class_.find(label);
        if (it == per_class_.end())
            throw std::out_of_range("ExemplarStore: no exemplars for class " + std::to_string(label));
        return it->second;
    }

    void truncate_class(int label, std::size_t keep) {
        auto it = per_class_.find(label);
        if (it == per_class_.end()) return;
        if (keep == 0) {
            per_class_.erase(it);
            return;
        }
        if (it->second.size() > keep) it->second.resize(keep);
    }

    [[nodiscard]] std::vector<Instance> all() const {
        std::vector<Instance> flat;
        flat.reserve(total_count());
        for (const auto& [label, list] : per_class_) flat.insert(flat.end(), list.begin(), list.end());
        return flat;
    }

    [[nodiscard]] LabeledExamples as_examples() const { return otcil::as_examples(all()); }

private:
    BudgetPolicy policy_;
    std::map<int, std::vector<Instance>> per_class_;  // herding order within each class
};

// Shrinks stored classes to the quota implied by the total class count after
// the newest task. Lists are in herding order, so truncation keeps the best
// prefix. fixed_per_class budgets never shrink.
inline void rebalance(ExemplarStore& store, std::size_t total_classes) {
    if (store.policy().kind == BudgetKind::fixed_per_class) return;
    const std::vector<std::size_t> quotas = class_quotas(store.policy(), total_classes);
    for (int label : store.class_labels()) {
        const std::size_t idx = static_cast<std::size_t>(label);
        store.truncate_class(label, idx < quotas.size() ? quotas[idx] : 0);
    }
}

}  // namespace otcil

#pragma once

// Versioned binary container for a model and (optionally) its exemplar
// store. All scalars are little-endian; doubles travel as raw IEEE-754 bit
// patterns, so save -> load round-trips are bit-exact.
//
// Layout (version 1). Every field is a little-endian u64 unless noted;
// matrices are u64 rows, u64 cols, then rows*cols f64 in row-major order.
//
//   u64 magic   0x4F54434C ("OTCL")
//   u64 version 1
//   u64 has_store (0 or 1)
//   u64 input_dim
//   u64 hidden_count, then hidden_count u64 widths
//   u64 embed_dim
//   f64 logit_scale
//   u64 layer_count, then per layer: matrix weight, u64 bias_len, bias f64s
//   matrix classifier
//   if has_store:
//     u64 budget_kind (0 = fixed total, 1 = fixed per class)
//     u64 budget_amount
//     u64 class_count, then per class:
//       u64 label, u64 exemplar_count, u64 feature_dim,
//       exemplar_count * feature_dim f64 (selection order preserved)

#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/exemplars.hpp"
#include "otcil/network.hpp"

namespace otcil {

namespace detail {

constexpr std::uint32_t kCheckpointMagic = 0x4F54434Cu;  // "OTCL"
constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

inline void write_matrix(std::ostream& out, const Matrix& m) {
    write_u64(out, m.rows());
    write_u64(out, m.cols());
    for (double v : m.data()) write_f64(out, v);
}

inline Matrix read_matrix(std::istream& in) {
    const std::uint64_t rows = read_u64(in);
    const std::uint64_t cols = read_u64(in);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = read_f64(in);
    return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& model,
                            const ExemplarStore* store = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    detail::write_u64(out, detail::kCheckpointMagic);
    detail::write_u64(out, detail::kCheckpointVersion);
    detail::write_u64(out, store != nullptr ? 1 : 0);

    detail::write_u64(out, model.embedding.input_dim);
    detail::write_u64(out, model.embedding.hidden_dims.size());
    for (std::size_t h : model.embedding.hidden_dims) detail::write_u64(out, h);
    detail::write_u64(out, model.embedding.embed_dim);
    detail::write_f64(out, model.logit_scale);
    detail::write_u64(out, model.layers.size());
    for (const DenseLayer& layer : model.layers) {
        detail::write_matrix(out, layer.weight);
        detail::write_u64(out, layer.bias.size());
        for (double v : layer.bias) detail::write_f64(out, v);
    }
    detail::write_matrix(out, model.classifier);

    if (store != nullptr) {
        detail::write_u64(out, store->policy().kind == BudgetKind::fixed_total ? 0 : 1);
        detail::write_u64(out, store->policy().amount);
        const std::vector<int> labels = store->class_labels();
        detail::write_u64(out, labels.size());
        for (int label : labels) {
            const std::vector<Instance>& list = store->exemplars(label);
            detail::write_u64(out, static_cast<std::uint64_t>(label));
            detail::write_u64(out, list.size());
            detail::write_u64(out, list.empty() ? 0 : list[0].features.size());
            for (const Instance& inst : list)
                for (double v : inst.features) detail::write_f64(out, v);
        }
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct Checkpoint {
    Model model;
    std::optional<ExemplarStore> store;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    if (detail::read_u64(in) != detail::kCheckpointMagic)
        throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
    const std::uint64_t version = detail::read_u64(in);
    if (version != detail::kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    const bool has_store = detail::read_u64(in) != 0;

    Checkpoint ckpt;
    ckpt.model.embedding.input_dim = detail::read_u64(in);
    const std::uint64_t n_hidden = detail::read_u64(in);
    ckpt.model.embedding.hidden_dims.resize(n_hidden);
    for (std::uint64_t i = 0; i < n_hidden; ++i) ckpt.model.embedding.hidden_dims[i] = detail::read_u64(in);
    ckpt.model.embedding.embed_dim = detail::read_u64(in);
    ckpt.model.logit_scale = detail::read_f64(in);
    const std::uint64_t n_layers = detail::read_u64(in);
    for (std::uint64_t l = 0; l < n_layers; ++l) {
        DenseLayer layer;
        layer.weight = detail::read_matrix(in);
        const std::uint64_t bias_n = detail::read_u64(in);
        layer.bias.resize(bias_n);
        for (double& v : layer.bias) v = detail::read_f64(in);
        ckpt.model.layers.push_back(std::move(layer));
    }
    ckpt.model.classifier = detail::read_matrix(in);

    if (has_store) {
        BudgetPolicy policy;
        policy.kind = detail::read_u64(in) == 0 ? BudgetKind::fixed_total : BudgetKind::fixed_per_class;
        policy.amount = detail::read_u64(in);
        ExemplarStore store(policy);
        const std::uint64_t n_classes = detail::read_u64(in);
        for (std::uint64_t c = 0; c < n_classes; ++c) {
            const int label = static_cast<int>(detail::read_u64(in));
            const std::uint64_t count = detail::read_u64(in);
            const std::uint64_t dim = detail::read_u64(in);
            std::vector<Instance> list(count);
            for (auto& inst : list) {
                inst.label = label;
                inst.features.resize(dim);
                for (double& v : inst.features) v = detail::read_f64(in);
            }
            store.set_class(label, std::move(list));
        }
        ckpt.store = std::move(store);
    }
    return ckpt;
}

}  // namespace otcil

#pragma once

// Dense embedding network with a cosine-normalised classifier head, plus the
// exact reverse-mode gradients the training losses need. No autograd graph:
// the network is small and fixed-shape, so forward traces and hand-written
// backward passes are simpler and easy to check against finite differences.
//
// Layout: input_dim -> hidden_dims... -> embed_dim, ReLU after every layer
// except the last. The classifier is a d x num_classes matrix whose columns
// are compared against embeddings by cosine similarity scaled by
// logit_scale, so column magnitudes never affect predictions.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "otcil/matrix.hpp"
#include "otcil/rng.hpp"

namespace otcil {

constexpr double kNormFloor = 1e-12;

struct EmbeddingConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    std::size_t embed_dim = 0;

    [[nodiscard]] std::vector<std::size_t> layer_sizes() const {
        std::vector<std::size_t> sizes;
        sizes.push_back(input_dim);
        sizes.insert(sizes.end(), hidden_dims.begin(), hidden_dims.end());
        sizes.push_back(embed_dim);
        return sizes;
    }

    void validate() const {
        if (input_dim == 0 || embed_dim == 0)
            throw std::invalid_argument("EmbeddingConfig: input_dim and embed_dim must be positive");
        for (std::size_t h : hidden_dims)
            if (h == 0) throw std::invalid_argument("EmbeddingConfig: hidden dims must be positive");
    }
};

struct DenseLayer {
    Matrix weight;             // in x out
    std::vector<double> bias;  // out
};

struct Model {
    EmbeddingConfig embedding;
    std::vector<DenseLayer> layers;
    Matrix classifier;  // embed_dim x num_classes
    double logit_scale = 4.0;

    [[nodiscard]] std::size_t num_classes() const noexcept { return classifier.cols(); }
};

// Frozen copy of a model; the training loop captures one per task and only
// ever reads from it.
struct ModelSnapshot {
    Model model;
};

inline ModelSnapshot capture_snapshot(const Model& model) { return ModelSnapshot{model}; }

struct Batch {
    Matrix inputs;            // batch x input_dim
    std::vector<int> labels;  // batch
};

inline DenseLayer make_dense_layer(std::size_t in, std::size_t out, Rng& rng) {
    DenseLayer layer;
    layer.weight = Matrix(in, out);
    layer.bias.assign(out, 0.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : layer.weight.data()) v = rng.uniform(-bound, bound);
    for (double& v : layer.bias) v = rng.uniform(-bound, bound);
    return layer;
}

inline Matrix random_classifier_columns(std::size_t embed_dim, std::size_t count, Rng& rng) {
    Matrix cols(embed_dim, count);
    const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (double& v : cols.data()) v = rng.uniform(-bound, bound);
    return cols;
}

inline Model make_model(const EmbeddingConfig& config, std::size_t num_classes, Rng& rng) {
    config.validate();
    Model model;
    model.embedding = config;
    const auto sizes = config.layer_sizes();
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
        model.layers.push_back(make_dense_layer(sizes[l], sizes[l + 1], rng));
    model.classifier = random_classifier_columns(config.embed_dim, num_classes, rng);
    return model;
}

inline void append_classifier_columns(Model& model, const Matrix& cols) {
    if (cols.rows() != model.embedding.embed_dim)
        throw std::invalid_argument("append_classifier_columns: embedding dimension mismatch");
    model.classifier = model.classifier.empty() ? cols : hconcat(model.classifier, cols);
}

// ---------------------------------------------------------------------------
// Forward

struct ForwardTrace {
    std::vector<Matrix> layer_inputs;  // input seen by each dense layer
    Matrix embeddings;                 // batch x embed_dim
};

inline Matrix embed(const Model& model, const Matrix& inputs, ForwardTrace* trace = nullptr) {
    if (inputs.cols() != model.embedding.input_dim)
        throw std::invalid_argument("embed: input width " + std::to_string(inputs.cols()) +
                                    " does not match configured input_dim " +
                                    std::to_string(model.embedding.input_dim));
    if (trace) {
        trace->layer_inputs.clear();
        trace->layer_inputs.reserve(model.layers.size());
    }
    Matrix current = inputs;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const DenseLayer& layer = model.layers[l];
        if (trace) trace->layer_inputs.push_back(current);
        Matrix next = matmul(current, layer.weight);
        for (std::size_t i = 0; i < next.rows(); ++i) {
            double* row = next.row(i);
            for (std::size_t j = 0; j < next.cols(); ++j) row[j] += layer.bias[j];
        }
        if (l + 1 < model.layers.size())
            for (double& v : next.data()) v = v > 0.0 ? v : 0.0;  // ReLU on hidden layers
        current = std::move(next);
    }
    if (trace) trace->embeddings = current;
    return current;
}

// ---------------------------------------------------------------------------
// Cosine head

inline Matrix normalize_rows(const Matrix& z, std::vector<double>* norms = nullptr) {
    Matrix out = z;
    if (norms) norms->assign(z.rows(), 0.0);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const double norm = std::max(euclidean_norm(z.row(i), z.cols()), kNormFloor);
        if (norms) (*norms)[i] = norm;
        double* row = out.row(i);
        for (std::size_t j = 0; j < z.cols(); ++j) row[j] /= norm;
    }
    return out;
}

inline Matrix normalize_columns(const Matrix& w, std::vector<double>* norms = nullptr) {
    Matrix out = w;
    if (norms) norms->assign(w.cols(), 0.0);
    for (std::size_t k = 0; k < w.cols(); ++k) {
        double sq = 0.0;
        for (std::size_t i = 0; i < w.rows(); ++i) sq += w(i, k) * w(i, k);
        const double norm = std::max(std::sqrt(sq), kNormFloor);
        if (norms) (*norms)[k] = norm;
        for (std::size_t i = 0; i < w.rows(); ++i) out(i, k) /= norm;
    }
    return out;
}

// scale * cos(z_i, w_k) for every row/column pair
inline Matrix cosine_scores(const Matrix& z, const Matrix& weights, double scale) {
    if (z.cols() != weights.rows())
        throw std::invalid_argument("cosine_scores: embedding dim " + std::to_string(z.cols()) +
                                    " does not match weight rows " + std::to_string(weights.rows()));
    Matrix scores = matmul(normalize_rows(z), normalize_columns(weights));
    scale_in_place(scores, scale);
    return scores;
}

inline Matrix cosine_logits(const Model& model, const Matrix& z) {
    return cosine_scores(z, model.classifier, model.logit_scale);
}

// Accumulates dL/dz and dL/dweights given dL/dscores. The normalisation
// Jacobian is (I - u u^T)/norm away from the clamp and I/kNormFloor inside
// it, matching the forward exactly so finite differences agree.
inline void cosine_scores_backward(const Matrix& z, const Matrix& weights, double scale, const Matrix& upstream,
                                   Matrix* dz_accum, Matrix* dweights_accum) {
    std::vector<double> z_norms, w_norms;
    const Matrix z_hat = normalize_rows(z, &z_norms);
    const Matrix w_hat = normalize_columns(weights, &w_norms);
    require_shape(upstream, z.rows(), weights.cols(), "cosine_scores_backward upstream");

    if (dz_accum) {
        Matrix d_zhat = matmul(upstream, transpose(w_hat));  // n x d
        scale_in_place(d_zhat, scale);
        for (std::size_t i = 0; i < z.rows(); ++i) {
            const double* zh = z_hat.row(i);
            const double* dzh = d_zhat.row(i);
            double* out = dz_accum->row(i);
            const bool clamped = euclidean_norm(z.row(i), z.cols()) < kNormFloor;
            if (clamped) {
                for (std::size_t j = 0; j < z.cols(); ++j) out[j] += dzh[j] / kNormFloor;
            } else {
                const double inner = dot(dzh, zh, z.cols());
                for (std::size_t j = 0; j < z.cols(); ++j) out[j] += (dzh[j] - inner * zh[j]) / z_norms[i];
            }
        }
    }
    if (dweights_accum) {
        Matrix d_what = matmul(transpose(z_hat), upstream);  // d x K
        scale_in_place(d_what, scale);
        for (std::size_t k = 0; k < weights.cols(); ++k) {
            double raw_sq = 0.0;
            for (std::size_t i = 0; i < weights.rows(); ++i) raw_sq += weights(i, k) * weights(i, k);
            const bool clamped = std::sqrt(raw_sq) < kNormFloor;
            if (clamped) {
                for (std::size_t i = 0; i < weights.rows(); ++i)
                    (*dweights_accum)(i, k) += d_what(i, k) / kNormFloor;
            } else {
                double inner = 0.0;
                for (std::size_t i = 0; i < weights.rows(); ++i) inner += d_what(i, k) * w_hat(i, k);
                for (std::size_t i = 0; i < weights.rows(); ++i)
                    (*dweights_accum)(i, k) += (d_what(i, k) - inner * w_hat(i, k)) / w_norms[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradients

struct Gradients {
    std::vector<DenseLayer> layers;
    Matrix classifier;
};

inline Gradients zero_gradients(const Model& model) {
    Gradients grads;
    grads.layers.reserve(model.layers.size());
    for (const DenseLayer& layer : model.layers) {
        DenseLayer zero;
        zero.weight = Matrix(layer.weight.rows(), layer.weight.cols());
        zero.bias.assign(layer.bias.size(), 0.0);
        grads.layers.push_back(std::move(zero));
    }
    grads.classifier = Matrix(model.classifier.rows(), model.classifier.cols());
    return grads;
}

// Backpropagates dL/dembeddings through the dense stack.
inline void embed_backward(const Model& model, const ForwardTrace& trace, const Matrix& upstream,
                           Gradients& grads) {
    if (trace.layer_inputs.size() != model.layers.size())
        throw std::invalid_argument("embed_backward: trace does not match model depth");
    Matrix delta = upstream;
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const Matrix& layer_in = trace.layer_inputs[l];
        Matrix weight_grad = matmul(transpose(layer_in), delta);
        axpy(grads.layers[l].weight, weight_grad);
        for (std::size_t i = 0; i < delta.rows(); ++i)
            for (std::size_t j = 0; j < delta.cols(); ++j) grads.layers[l].bias[j] += delta(i, j);
        if (l == 0) break;
        delta = matmul(delta, transpose(model.layers[l].weight));
        // ReLU mask: layer_in is the post-activation output of layer l-1
        for (std::size_t i = 0; i < delta.rows(); ++i)
            for (std::size_t j = 0; j < delta.cols(); ++j)
                if (layer_in(i, j) <= 0.0) delta(i, j) = 0.0;
    }
}

// ---------------------------------------------------------------------------
// SGD with momentum

namespace detail {

inline void check_finite(const Matrix& grad, const std::string& block) {
    if (!all_finite(grad)) throw std::runtime_error("sgd_step: non-finite gradient in " + block);
}

inline void update_block(Matrix& param, const Matrix& grad, Matrix& velocity, double lr, double momentum,
                         double weight_decay, const std::string& block) {
    check_finite(grad, block);
    for (std::size_t i = 0; i < param.data().size(); ++i) {
        const double g = grad.data()[i] + weight_decay * param.data()[i];
        velocity.data()[i] = momentum * velocity.data()[i] + g;
        param.data()[i] -= lr * velocity.data()[i];
    }
}

}  // namespace detail

// velocity must have the same shapes as the model (see zero_gradients) and
// persists across steps.
inline void sgd_step(Model& model, const Gradients& grads, double lr, double momentum, double weight_decay,
                     Gradients& velocity) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        detail::update_block(model.layers[l].weight, grads.layers[l].weight, velocity.layers[l].weight, lr,
                             momentum, weight_decay, "layer " + std::to_string(l) + " weight");
        for (double g : grads.layers[l].bias)
            if (!std::isfinite(g))
                throw std::runtime_error("sgd_step: non-finite gradient in layer " + std::to_string(l) + " bias");
        for (std::size_t j = 0; j < model.layers[l].bias.size(); ++j) {
            const double g = grads.layers[l].bias[j] + weight_decay * model.layers[l].bias[j];
            velocity.layers[l].bias[j] = momentum * velocity.layers[l].bias[j] + g;
            model.layers[l].bias[j] -= lr * velocity.layers[l].bias[j];
        }
    }
    detail::update_block(model.classifier, grads.classifier, velocity.classifier, lr, momentum, weight_decay,
                         "classifier");
}

class SgdOptimizer {
public:
    explicit SgdOptimizer(const Model& model) : velocity_(zero_gradients(model)) {}

    void step(Model& model, const Gradients& grads, double lr, double momentum, double weight_decay) {
        sgd_step(model, grads, lr, momentum, weight_decay, velocity_);
    }

private:
    Gradients velocity_;
};

}  // namespace otcil

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "otcil/checkpoint.hpp"
#include "otcil/network.hpp"
#include "otcil/rng.hpp"
#include "test_support.hpp"

using namespace otcil;
using otcil::testing::random_batch;
using otcil::testing::small_random_model;

TEST_CASE("embed: identity-initialised single layer is the identity map") {
    Model model = small_random_model(3, {}, 3, 2, 1);
    model.layers[0].weight.fill(0.0);
    for (std::size_t i = 0; i < 3; ++i) model.layers[0].weight(i, i) = 1.0;
    model.layers[0].bias.assign(3, 0.0);

    const Matrix x = Matrix::from_rows({{0.5, -1.0, 2.0}});
    const Matrix z = embed(model, x);
    CHECK(max_abs_difference(z, x) == 0.0);
}

TEST_CASE("embed: identical inputs give identical rows") {
    Model model = small_random_model(4, {6}, 3, 2, 5);
    const Matrix x = Matrix::from_rows({{1.0, 2.0, 3.0, 4.0}, {1.0, 2.0, 3.0, 4.0}});
    const Matrix z = embed(model, x);
    for (std::size_t j = 0; j < z.cols(); ++j) CHECK(z(0, j) == z(1, j));
}

TEST_CASE("embed: matches a straight-line forward oracle") {
    Model model = small_random_model(5, {7, 6}, 4, 3, 17);
    const Batch batch = random_batch(3, 5, 3, 18);
    const Matrix z = embed(model, batch.inputs);

    // oracle: plain nested loops, no shared code with embed()
    for (std::size_t row = 0; row < batch.inputs.rows(); ++row) {
        std::vector<double> current(batch.inputs.row(row), batch.inputs.row(row) + 5);
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            const DenseLayer& layer = model.layers[l];
            std::vector<double> next(layer.bias);
            for (std::size_t j = 0; j < next.size(); ++j)
                for (std::size_t i = 0; i < current.size(); ++i) next[j] += current[i] * layer.weight(i, j);
            if (l + 1 < model.layers.size())
                for (double& v : next) v = std::max(v, 0.0);
            current = std::move(next);
        }
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(z(row, j) == doctest::Approx(current[j]).epsilon(1e-12));
    }
}

TEST_CASE("embed: wrong input width is rejected") {
    const Model model = small_random_model(4, {}, 2, 1, 3);
    CHECK_THROWS_AS(embed(model, Matrix(2, 5)), std::invalid_argument);
}

TEST_CASE("cosine logits: embedding parallel to a column scores logit_scale") {
    Model model = small_random_model(2, {}, 2, 2, 9, 8.0);
    model.classifier = Matrix::from_rows({{2.0, 0.0}, {0.0, -3.0}});
    const Matrix z = Matrix::from_rows({{5.0, 0.0}});  // parallel to column 0
    const Matrix logits = cosine_scores(z, model.classifier, model.logit_scale);
    CHECK(logits(0, 0) == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("cosine logits: column magnitude never matters") {
    Model model = small_random_model(4, {5}, 3, 4, 21);
    const Batch batch = random_batch(6, 4, 4, 22);
    const Matrix z = embed(model, batch.inputs);
    const Matrix before = cosine_scores(z, model.classifier, model.logit_scale);
    for (std::size_t i = 0; i < model.classifier.rows(); ++i) model.classifier(i, 2) *= 3.0;
    const Matrix after = cosine_scores(z, model.classifier, model.logit_scale);
    CHECK(max_abs_difference(before, after) < 1e-9);
}

TEST_CASE("cosine logits: random case matches the per-pair cosine loop") {
    const Model model = small_random_model(4, {6}, 3, 5, 33, 8.0);
    const Batch batch = random_batch(4, 4, 5, 34);
    const Matrix z = embed(model, batch.inputs);
    const Matrix logits = cosine_scores(z, model.classifier, model.logit_scale);
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t k = 0; k < model.classifier.cols(); ++k) {
            double zz = 0.0, ww = 0.0, zw = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                zz += z(i, j) * z(i, j);
                ww += model.classifier(j, k) * model.classifier(j, k);
                zw += z(i, j) * model.classifier(j, k);
            }
            const double expected =
                8.0 * zw / (std::max(std::sqrt(zz), 1e-12) * std::max(std::sqrt(ww), 1e-12));
            CHECK(logits(i, k) == doctest::Approx(expected).epsilon(1e-12));
        }
}

TEST_CASE("cosine logits: zero embedding rows are clamped, not crashed") {
    Model model = small_random_model(2, {}, 2, 3, 44);
    const Matrix z(2, 2);  // all-zero rows
    const Matrix logits = cosine_scores(z, model.classifier, model.logit_scale);
    CHECK(all_finite(logits));
}

TEST_CASE("cosine backward: agrees with finite differences on z and weights") {
    Rng rng(55);
    Matrix z(3, 4), weights(4, 2), upstream(3, 2);
    for (double& v : z.data()) v = rng.normal();
    for (double& v : weights.data()) v = rng.normal();
    for (double& v : upstream.data()) v = rng.normal();
    const double scale = 8.0;

    auto objective = [&](const Matrix& zz, const Matrix& ww) {
        const Matrix scores = cosine_scores(zz, ww, scale);
        double total = 0.0;
        for (std::size_t i = 0; i < scores.data().size(); ++i) total += scores.data()[i] * upstream.data()[i];
        return total;
    };

    Matrix dz(3, 4), dw(4, 2);
    cosine_scores_backward(z, weights, scale, upstream, &dz, &dw);

    const double h = 1e-6;
    for (std::size_t i = 0; i < z.data().size(); ++i) {
        Matrix zp = z, zm = z;
        zp.data()[i] += h;
        zm.data()[i] -= h;
        const double fd = (objective(zp, weights) - objective(zm, weights)) / (2.0 * h);
        CHECK(dz.data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < weights.data().size(); ++i) {
        Matrix wp = weights, wm = weights;
        wp.data()[i] += h;
        wm.data()[i] -= h;
        const double fd = (objective(z, wp) - objective(z, wm)) / (2.0 * h);
        CHECK(dw.data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("embed backward: single linear layer gives the outer-product gradient") {
    Model model = small_random_model(3, {}, 2, 1, 66);
    const Matrix x = Matrix::from_rows({{0.7, -1.2, 0.4}});
    ForwardTrace trace;
    embed(model, x, &trace);

    const Matrix upstream = Matrix::from_rows({{0.3, -0.9}});  // e.g. softmax minus one-hot
    Gradients grads = zero_gradients(model);
    embed_backward(model, trace, upstream, grads);

    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(grads.layers[0].weight(i, j) ==
                  doctest::Approx(x(0, i) * upstream(0, j)).epsilon(1e-12));
    for (std::size_t j = 0; j < 2; ++j)
        CHECK(grads.layers[0].bias[j] == doctest::Approx(upstream(0, j)).epsilon(1e-12));
}

TEST_CASE("sgd: zero learning rate leaves the model untouched") {
    Model model = small_random_model(3, {4}, 2, 2, 70);
    const Model before = model;
    Gradients grads = zero_gradients(model);
    for (double& v : grads.classifier.data()) v = 1.0;
    Gradients velocity = zero_gradients(model);
    sgd_step(model, grads, 0.0, 0.9, 0.0, velocity);
    CHECK(max_abs_difference(model.classifier, before.classifier) == 0.0);
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        CHECK(max_abs_difference(model.layers[l].weight, before.layers[l].weight) == 0.0);
}

TEST_CASE("sgd: plain step is p - lr * g") {
    Model model = small_random_model(1, {}, 1, 1, 71);
    model.classifier(0, 0) = 2.0;
    Gradients grads = zero_gradients(model);
    grads.classifier(0, 0) = 0.5;
    Gradients velocity = zero_gradients(model);
    sgd_step(model, grads, 0.1, 0.0, 0.0, velocity);
    CHECK(model.classifier(0, 0) == doctest::Approx(2.0 - 0.1 * 0.5).epsilon(1e-15));
}

TEST_CASE("sgd: two momentum steps match the hand-unrolled recursion") {
    Model model = small_random_model(1, {}, 1, 1, 72);
    const double p0 = model.classifier(0, 0);
    const double g1 = 0.4, g2 = -0.2, lr = 0.05, momentum = 0.9;

    Gradients grads = zero_gradients(model);
    Gradients velocity = zero_gradients(model);
    grads.classifier(0, 0) = g1;
    sgd_step(model, grads, lr, momentum, 0.0, velocity);
    grads.classifier(0, 0) = g2;
    sgd_step(model, grads, lr, momentum, 0.0, velocity);

    const double v1 = g1;
    const double p1 = p0 - lr * v1;
    const double v2 = momentum * v1 + g2;
    const double p2 = p1 - lr * v2;
    CHECK(model.classifier(0, 0) == doctest::Approx(p2).epsilon(1e-15));
}

TEST_CASE("sgd: non-finite gradients raise an error naming the block") {
    Model model = small_random_model(2, {}, 2, 2, 73);
    Gradients grads = zero_gradients(model);
    grads.classifier(0, 0) = std::nan("");
    Gradients velocity = zero_gradients(model);
    CHECK_THROWS_WITH_AS(sgd_step(model, grads, 0.1, 0.9, 0.0, velocity), doctest::Contains("classifier"),
                         std::runtime_error);
}

TEST_CASE("snapshot: training the live model never changes snapshot outputs") {
    Model model = small_random_model(4, {5}, 3, 3, 80);
    const Batch probe = random_batch(4, 4, 3, 81);
    const ModelSnapshot snapshot = capture_snapshot(model);
    const Matrix before = cosine_logits(snapshot.model, embed(snapshot.model, probe.inputs));

    Rng rng(82);
    Gradients velocity = zero_gradients(model);
    for (int step = 0; step < 5; ++step) {
        Gradients grads = zero_gradients(model);
        for (double& v : grads.classifier.data()) v = rng.normal();
        for (auto& layer : grads.layers) {
            for (double& v : layer.weight.data()) v = rng.normal();
            for (double& v : layer.bias) v = rng.normal();
        }
        sgd_step(model, grads, 0.1, 0.9, 0.0, velocity);
    }

    const Matrix after = cosine_logits(snapshot.model, embed(snapshot.model, probe.inputs));
    CHECK(max_abs_difference(before, after) == 0.0);  // bitwise equal
}

TEST_CASE("checkpoint: save then load round-trips bit-exact") {
    Model model = small_random_model(4, {6, 5}, 3, 4, 90);
    ExemplarStore store(BudgetPolicy{BudgetKind::fixed_total, 7});
    Rng rng(91);
    for (int label : {0, 1, 2}) {
        std::vector<Instance> list;
        for (int i = 0; i < 2; ++i) {
            Instance inst;
            inst.label = label;
            inst.features = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
            list.push_back(inst);
        }
        store.set_class(label, list);
    }

    const std::string path = (std::filesystem::temp_directory_path() / "otcil_ckpt_test.bin").string();
    save_checkpoint(path, model, &store);
    const Checkpoint loaded = load_checkpoint(path);
    std::remove(path.c_str());

    CHECK(loaded.model.embedding.input_dim == model.embedding.input_dim);
    CHECK(loaded.model.embedding.hidden_dims == model.embedding.hidden_dims);
    CHECK(loaded.model.logit_scale == model.logit_scale);
    CHECK(max_abs_difference(loaded.model.classifier, model.classifier) == 0.0);
    REQUIRE(loaded.model.layers.size() == model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        CHECK(max_abs_difference(loaded.model.layers[l].weight, model.layers[l].weight) == 0.0);
        CHECK(loaded.model.layers[l].bias == model.layers[l].bias);
    }
    REQUIRE(loaded.store.has_value());
    CHECK(loaded.store->policy().kind == BudgetKind::fixed_total);
    CHECK(loaded.store->policy().amount == 7);
    CHECK(loaded.store->class_labels() == store.class_labels());
    for (int label : {0, 1, 2}) {
        const auto& a = store.exemplars(label);
        const auto& b = loaded.store->exemplars(label);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].features == b[i].features);
    }
}

TEST_CASE("checkpoint: rejects files that are not checkpoints") {
    const std::string path = (std::filesystem::temp_directory_path() / "otcil_ckpt_garbage.bin").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "definitely not a checkpoint";
    }
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}

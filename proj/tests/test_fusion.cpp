#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "support/fusion_oracle.hpp"
#include "support/gradcheck.hpp"
#include "trifusion/captioner.hpp"
#include "trifusion/error.hpp"
#include "trifusion/fusion.hpp"
#include "trifusion/ops.hpp"

using namespace trifusion;
using testsupport::random_tensor;

namespace {

Tensor unit_rows(std::size_t b, std::size_t d, std::mt19937_64& rng) {
    return ops::l2_normalize(random_tensor({b, d}, rng, -1, 1, false));
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
    return ops::gather_rows(x, perm);
}

}  // namespace

TEST_CASE("identical embeddings give ln B") {
    std::mt19937_64 rng(1);
    for (std::size_t b : {2u, 4u, 8u}) {
        Tensor v = unit_rows(1, 6, rng);
        std::vector<Tensor> rows(b, ops::reshape(v, {6}));
        Tensor batch = stack_rows(rows);
        const double loss = contrastive_loss(batch, batch, 0.07).item();
        CHECK(loss == std::log(static_cast<double>(b)));
    }
}

TEST_CASE("contrastive loss matches the brute-force sums") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t b = 2 + trial % 5;
        const double temp = 0.05 + 0.1 * (trial % 4);
        Tensor img = unit_rows(b, 5, rng), txt = unit_rows(b, 5, rng);
        CHECK(std::abs(contrastive_loss(img, txt, temp).item() - oracle::infonce(img, txt, temp)) < 1e-10);
    }
}

TEST_CASE("orthonormal pairs drive the loss to zero as temperature shrinks") {
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    Tensor basis = Tensor::from({4, 4}, eye);
    double previous = 1e9;
    for (double t : {1.0, 0.1, 0.01, 0.001}) {
        const double loss = contrastive_loss(basis, basis, t).item();
        CHECK(loss >= 0.0);
        CHECK(loss <= previous);
        previous = loss;
    }
    CHECK(previous < 1e-12);
}

TEST_CASE("contrastive loss is permutation equivariant") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor img = unit_rows(6, 4, rng), txt = unit_rows(6, 4, rng);
        std::vector<std::size_t> perm(6);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        const double a = contrastive_loss(img, txt, 0.1).item();
        const double b = contrastive_loss(permute_rows(img, perm), permute_rows(txt, perm), 0.1).item();
        CHECK(std::abs(a - b) <= 1e-12);
    }
}

TEST_CASE("contrastive loss contract") {
    std::mt19937_64 rng(4);
    Tensor one = unit_rows(1, 4, rng);
    CHECK_THROWS_AS(contrastive_loss(one, one, 0.07), ContractError);
    Tensor two = unit_rows(2, 4, rng);
    CHECK_THROWS_AS(contrastive_loss(two, two, 0.0), ContractError);
    CHECK_THROWS_AS(contrastive_loss(two, unit_rows(3, 4, rng), 0.07), ShapeError);
}

TEST_CASE("contrastive gradient matches finite differences") {
    std::mt19937_64 rng(5);
    Tensor img = random_tensor({4, 5}, rng), txt = random_tensor({4, 5}, rng);
    Tensor log_inv = Tensor::scalar(std::log(1 / 0.3), true);
    auto loss = [&] {
        return contrastive_loss(ops::l2_normalize(img), ops::l2_normalize(txt), ops::exp(log_inv));
    };
    auto report = testsupport::gradcheck(loss, {img, txt, log_inv}, {"image", "text", "log_inv_temperature"});
    INFO(report.worst);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("pool_and_project examples") {
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor row = Tensor::from({1, 3}, {0.6, 0.0, 0.8});
    auto v = pool_and_project(row, eye);
    CHECK(v.shape() == Shape{3});
    for (std::size_t i = 0; i < 3; ++i) CHECK(v.at(i) == doctest::Approx(row.at(i)).epsilon(1e-15));

    Tensor twice = Tensor::from({2, 3}, {0.6, 0.0, 0.8, 0.6, 0.0, 0.8});
    auto w = pool_and_project(twice, eye);
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.at(i) == v.at(i));

    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        auto out = pool_and_project(random_tensor({5, 4}, rng, -1, 1, false), random_tensor({4, 6}, rng, -1, 1, false));
        double n = 0;
        for (double x : out.data()) n += x * x;
        CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-9);
    }
}

TEST_CASE("fuse concatenates image then text") {
    auto f = fuse(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1}));
    CHECK(std::vector<double>(f.data().begin(), f.data().end()) == std::vector<double>{1, 0, 0, 1});

    std::mt19937_64 rng(7);
    Tensor x = random_tensor({5}, rng, -1, 1, false), y = random_tensor({5}, rng, -1, 1, false);
    auto z = fuse(x, Tensor::zeros({5}));
    for (std::size_t i = 0; i < 5; ++i) CHECK(z.at(i) == x.at(i));
    auto both = fuse(x, y);
    auto first = ops::slice(both, 0, 0, 5), second = ops::slice(both, 0, 5, 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(first.at(i) == x.at(i));
        CHECK(second.at(i) == y.at(i));
    }
    CHECK_THROWS_AS(fuse(x, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("joint embedding halves are unit vectors") {
    Rng init(8);
    auto params = init_fusion_params(6, 4, kDefaultTemperature, init);
    CHECK(params.log_inv_temperature.item() == doctest::Approx(std::log(1 / 0.07)));
    std::mt19937_64 rng(9);
    auto e = joint_embedding(random_tensor({9, 6}, rng), random_tensor({5, 6}, rng), params);
    CHECK(e.fused.shape() == Shape{8});
    double ni = 0, nt = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        ni += e.image_vec.at(i) * e.image_vec.at(i);
        nt += e.text_vec.at(i) * e.text_vec.at(i);
        CHECK(e.fused.at(i) == e.image_vec.at(i));
        CHECK(e.fused.at(4 + i) == e.text_vec.at(i));
    }
    CHECK(std::abs(ni - 1) < 1e-12);
    CHECK(std::abs(nt - 1) < 1e-12);
}

TEST_CASE("training the projections aligns eight pairs") {
    Rng init(10);
    auto params = init_fusion_params(6, 8, kDefaultTemperature, init);
    NamedTensors named;
    params.collect("fusion", named);
    std::mt19937_64 rng(11);
    std::vector<Tensor> image_feats, text_feats;
    for (int i = 0; i < 8; ++i) {
        image_feats.push_back(random_tensor({4, 6}, rng, -1, 1, false));
        text_feats.push_back(random_tensor({3, 6}, rng, -1, 1, false));
    }
    auto batch = [&] {
        std::vector<Tensor> iv, tv;
        for (int i = 0; i < 8; ++i) {
            iv.push_back(pool_and_project(image_feats[i], params.image_projection));
            tv.push_back(pool_and_project(text_feats[i], params.text_projection));
        }
        return std::make_pair(stack_rows(iv), stack_rows(tv));
    };
    TrainConfig cfg;
    cfg.lr = 1e-2;
    auto adam = AdamState::for_params(named);
    double first = 0, last = 0;
    for (int step = 0; step < 300; ++step) {
        for (auto& [n, t] : named) t.zero_grad();
        auto [iv, tv] = batch();
        auto loss = contrastive_loss(iv, tv, ops::exp(params.log_inv_temperature));
        (step == 0 ? first : last) = loss.item();
        loss.backward();
        adam_step(named, adam, cfg);
    }
    CHECK(last < 0.1 * first);
    auto [iv, tv] = batch();
    CHECK(retrieval_accuracy(iv, tv) == 1.0);
}

TEST_CASE("retrieval accuracy requires a strict row maximum") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    CHECK(retrieval_accuracy(eye, eye) == 1.0);
    Tensor same = Tensor::from({2, 2}, {1, 0, 1, 0});
    CHECK(retrieval_accuracy(same, same) == 0.0);
}

#include <cmath>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "waicflow/errors.hpp"
#include "waicflow/flow.hpp"
#include "waicflow/waic.hpp"

using namespace waicflow;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Block whose subnet ignores its input and emits constant (s, t), chosen so
// the clamped log-scale equals `s_hat`.
CouplingBlock constant_block(std::size_t dim, double s_hat, double t, double alpha = 2.0) {
    const std::size_t split = (dim + 1) / 2;
    const std::size_t trans = dim - split;
    auto net = Mlp::zeros(split, 4, 2 * trans);
    auto& bias = net.layer(2).bias;
    for (std::size_t i = 0; i < trans; ++i) {
        bias[i] = alpha * std::atanh(s_hat / alpha);
        bias[trans + i] = t;
    }
    return CouplingBlock(dim, std::move(net), alpha);
}

FlowModel single_block_model(CouplingBlock block) {
    const std::size_t n = block.dim();
    return FlowModel(InputScaling::identity(n), {std::move(block)}, {Permutation::identity(n)});
}

FlowConfig config_for(std::size_t n, std::size_t hidden = 16) {
    FlowConfig c;
    c.input_dim = n;
    c.hidden_width = hidden;
    return c;
}

// Random model with every parameter jittered, so biases are non-zero too.
FlowModel random_model(std::size_t n, std::uint64_t seed, std::size_t hidden = 16) {
    auto model = FlowModel::random(config_for(n, hidden), seed);
    Rng rng(seed ^ 0xabcdef);
    auto params = model.flatten();
    for (double& p : params) p += 0.05 * rng.normal();
    model.assign(params);
    return model;
}

Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
    Vector v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

}  // namespace

TEST_CASE("coupling_forward") {
    SUBCASE("zero subnet is the identity") {
        CouplingBlock block(5, Mlp::zeros(3, 8, 4), 2.0);
        const Vector x{0.3, -1.0, 2.0, 4.5, -7.0};
        const auto r = coupling_forward(block, x);
        CHECK(r.y == x);
        CHECK(r.logdet == 0.0);
        CHECK(coupling_inverse(block, x) == x);
    }
    SUBCASE("constant log-scale ln 2 and shift 1") {
        const auto block = constant_block(2, std::log(2.0), 1.0);
        const auto r = coupling_forward(block, Vector{3.0, 5.0});
        CHECK(r.y[0] == 3.0);
        CHECK(r.y[1] == doctest::Approx(11.0).epsilon(1e-12));
        CHECK(r.logdet == doctest::Approx(0.693147).epsilon(1e-6));
        const auto back = coupling_inverse(block, Vector{3.0, 11.0});
        CHECK(back[0] == 3.0);
        CHECK(back[1] == doctest::Approx(5.0).epsilon(1e-12));
    }
    SUBCASE("random n=8 block logdet matches the numerical Jacobian") {
        Rng rng(17);
        for (int trial = 0; trial < 5; ++trial) {
            CouplingBlock block(8, Mlp::gaussian(4, 16, 8, rng), 2.0);
            const auto x = random_vector(rng, 8);
            const auto f = [&](std::span<const double> v) { return coupling_forward(block, v).y; };
            const double numeric = oracle::log_abs_det(oracle::numerical_jacobian(f, x, 1e-5));
            CHECK(oracle::rel_err(coupling_forward(block, x).logdet, numeric, 1e-3) < 1e-4);
        }
    }
    SUBCASE("roundtrip on 1000 random vectors") {
        Rng rng(4);
        CouplingBlock block(7, Mlp::gaussian(4, 16, 6, rng), 2.0);
        double worst = 0.0;
        for (int i = 0; i < 1000; ++i) {
            const auto x = random_vector(rng, 7, 3.0);
            worst = std::max(worst, oracle::max_abs_diff(coupling_inverse(block, coupling_forward(block, x).y), x));
        }
        CHECK(worst < 1e-10);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(CouplingBlock(1, Mlp::zeros(1, 2, 0 + 1), 2.0), ArchitectureError);
        CHECK_THROWS_AS(CouplingBlock(4, Mlp::zeros(3, 4, 4), 2.0), ShapeError);
        CouplingBlock block(4, Mlp::zeros(2, 4, 4), 2.0);
        CHECK_THROWS_AS(coupling_inverse(block, Vector{1.0, NAN, 0.0, 0.0}), DomainError);
        CHECK_THROWS_AS(coupling_forward(block, Vector{1.0, 2.0}), ShapeError);
    }
}

TEST_CASE("clamp keeps the scale factor inside (e^-alpha, e^alpha)") {
    CouplingBlock block(4, Mlp::zeros(2, 4, 4), 1.5);
    for (double s = -20.0; s <= 20.0; s += 0.25) {
        const double c = block.clamp(s);
        CHECK(std::abs(c) < 1.5);
        CHECK(std::exp(c) > std::exp(-1.5));
        CHECK(std::exp(c) < std::exp(1.5));
    }
    CHECK(block.clamp(0.1) == doctest::Approx(0.1).epsilon(1e-2));
}

TEST_CASE("permutation") {
    Rng rng(8);
    const auto p = Permutation::random(9, rng);
    const auto x = random_vector(rng, 9);
    Vector y(9), back(9);
    p.apply(x, y);
    p.apply_inverse(y, back);
    CHECK(back == x);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == x[p.indices()[i]]);
    CHECK_THROWS_AS(Permutation({0, 0, 1}), FormatError);
    CHECK_THROWS_AS(Permutation({0, 3, 1}), FormatError);
}

TEST_CASE("flow_forward and flow_inverse") {
    SUBCASE("identity blocks permute the input") {
        const auto model = FlowModel::identity(config_for(8), 3);
        CHECK(model.n_blocks() == 10);
        const Vector x{1, 2, 3, 4, 5, 6, 7, 8};
        const auto r = flow_forward(model, x);
        CHECK(r.logdet == 0.0);
        auto sorted = r.z;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == x);
        CHECK(flow_inverse(model, r.z) == x);
    }
    SUBCASE("one block with identity permutation equals coupling_forward") {
        Rng rng(6);
        CouplingBlock block(6, Mlp::gaussian(3, 8, 6, rng), 2.0);
        const auto model = single_block_model(block);
        const auto x = random_vector(rng, 6);
        const auto a = flow_forward(model, x);
        const auto b = coupling_forward(block, x);
        CHECK(a.z == b.y);
        CHECK(a.logdet == b.logdet);
        CHECK(oracle::max_abs_diff(flow_inverse(model, a.z), x) < 1e-12);
    }
    SUBCASE("random model logdet matches the numerical oracle") {
        Rng rng(21);
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto model = FlowModel::random(config_for(8, 32), 500 + seed);
            const auto x = random_vector(rng, 8);
            const auto r = flow_forward(model, x);
            CHECK(oracle::rel_err(r.logdet, oracle::numerical_flow_logdet(model, x), 1e-3) < 1e-4);
            CHECK(oracle::max_abs_diff(flow_inverse(model, r.z), x) < 1e-9);
        }
    }
    SUBCASE("batch and single-row paths agree") {
        const auto model = random_model(5, 9);
        Rng rng(2);
        Matrix xs(20, 5);
        for (double& v : xs.values()) v = rng.normal();
        const auto batch = flow_forward(model, xs);
        const auto lls = log_likelihood(model, xs);
        for (std::size_t i = 0; i < xs.rows(); ++i) {
            const auto r = flow_forward(model, xs.row(i));
            CHECK(oracle::max_abs_diff(r.z, batch.z.row(i)) < 1e-12);
            CHECK(std::abs(r.logdet - batch.logdet[i]) < 1e-12);
            CHECK(std::abs(log_likelihood(model, xs.row(i)) - lls[i]) < 1e-12);
        }
        CHECK(oracle::max_abs_diff(flow_inverse(model, batch.z).values(), xs.values()) < 1e-10);
    }
    SUBCASE("dimension mismatch") {
        const auto model = random_model(4, 1);
        CHECK_THROWS_AS(flow_forward(model, Vector{1, 2, 3}), ShapeError);
        CHECK_THROWS_AS(flow_inverse(model, Vector{1, 2, 3, 4, 5}), ShapeError);
    }
}

TEST_CASE("numerical logdet oracle") {
    const Vector x{0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 0.25, 3.0};
    CHECK(std::abs(oracle::numerical_flow_logdet(FlowModel::identity(config_for(8), 1, true), x)) < 1e-8);
    CHECK(std::abs(oracle::numerical_flow_logdet(FlowModel::identity(config_for(8), 1, false), x)) < 1e-8);
    CHECK_THROWS_AS(oracle::log_abs_det(Matrix(2, 2, Vector{1, 2, 2, 4})), OracleError);
}

TEST_CASE("log_likelihood") {
    CHECK(log_likelihood(FlowModel::identity(config_for(2), 1), Vector{0, 0}) ==
          doctest::Approx(-1.837877).epsilon(1e-6));
    CHECK(log_likelihood(FlowModel::identity(config_for(8), 1), Vector(8, 0.0)) ==
          doctest::Approx(-7.351508).epsilon(1e-6));
    const auto model = single_block_model(constant_block(2, std::log(2.0), 0.0));
    CHECK(log_likelihood(model, Vector{0, 1}) == doctest::Approx(-2.0 - kLog2Pi + std::log(2.0)).epsilon(1e-12));
    CHECK(log_likelihood(model, Vector{0, 1}) == doctest::Approx(-3.144730).epsilon(1e-6));

    SUBCASE("extra permutations do not change identity-coupling likelihoods") {
        Rng rng(5);
        const auto few = FlowModel::identity(config_for(6), 1, true);
        auto cfg = config_for(6);
        cfg.n_blocks = 17;
        const auto many = FlowModel::identity(cfg, 99, false);
        for (int i = 0; i < 20; ++i) {
            const auto x = random_vector(rng, 6, 2.0);
            CHECK(std::abs(log_likelihood(few, x) - log_likelihood(many, x)) < 1e-10);
        }
    }
    SUBCASE("input scaling enters through its log-determinant") {
        auto model = FlowModel::identity(config_for(2), 1, true);
        model.set_scaling(InputScaling{{1.0, -1.0}, {2.0, 0.5}});
        // z = ((3 - 1) / 2, (0 + 1) / 0.5) = (1, 2); log|det| = -ln 2 - ln 0.5 = 0.
        CHECK(log_likelihood(model, Vector{3.0, 0.0}) == doctest::Approx(-2.5 - kLog2Pi).epsilon(1e-12));
    }
    SUBCASE("overflowing input is reported with its block") {
        const auto model = single_block_model(constant_block(2, 1.9, 0.0));
        try {
            log_likelihood(model, Vector{0.0, 1e308});
            FAIL("expected LikelihoodError");
        } catch (const LikelihoodError& e) {
            CHECK(e.block() == 0);
        }
    }
}

TEST_CASE("nll_loss_and_grad") {
    SUBCASE("identity model at the origin") {
        const auto model = FlowModel::identity(config_for(4), 2);
        const auto lg = nll_loss_and_grad(model, Matrix(1, 4, 0.0));
        CHECK(lg.loss == doctest::Approx(2.0 * kLog2Pi).epsilon(1e-12));
        auto loss = [&](std::span<const double> p) {
            auto probe = model;
            probe.assign(p);
            return nll_loss_and_grad(probe, Matrix(1, 4, 0.0)).loss;
        };
        const auto numeric = oracle::numerical_gradient(loss, model.flatten(), 1e-6);
        CHECK(oracle::max_abs_diff(numeric, lg.grads) < 1e-6);
    }
    SUBCASE("10-block n=4 model matches central differences") {
        const auto model = random_model(4, 77, 8);
        REQUIRE(model.n_blocks() == 10);
        Rng rng(3);
        Matrix batch(5, 4);
        for (double& v : batch.values()) v = rng.normal();
        const auto lg = nll_loss_and_grad(model, batch);
        auto loss = [&](std::span<const double> p) {
            auto probe = model;
            probe.assign(p);
            return nll_loss_and_grad(probe, batch).loss;
        };
        const auto numeric = oracle::numerical_gradient(loss, model.flatten(), 1e-6);
        double diff = 0.0, norm = 0.0;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            diff += (numeric[i] - lg.grads[i]) * (numeric[i] - lg.grads[i]);
            norm += numeric[i] * numeric[i];
        }
        CHECK(std::sqrt(diff / norm) < 1e-3);
        CHECK(std::abs(lg.loss + mean_nll(model, batch) - 2 * lg.loss) < 1e-12);
    }
    SUBCASE("loss decreases under 200 Adam steps") {
        Rng rng(10);
        Matrix data(4096, 2);
        for (double& v : data.values()) v = rng.normal();
        auto model = FlowModel::random(config_for(2, 16), 5);
        AdamState adam(model.param_count(), AdamHyper{});
        auto params = model.flatten();
        const double before = mean_nll(model, data);
        for (int step = 0; step < 200; ++step) {
            std::vector<std::size_t> rows(256);
            for (auto& r : rows) r = rng.next_u64() % data.rows();
            const auto lg = nll_loss_and_grad(model, data.select_rows(rows));
            adam_step(adam, params, lg.grads);
            model.assign(params);
        }
        CHECK(mean_nll(model, data) < before);
    }
    SUBCASE("empty batch") {
        CHECK_THROWS_AS(nll_loss_and_grad(FlowModel::identity(config_for(2), 1), Matrix(0, 2)), UsageError);
    }
}

TEST_CASE("sample") {
    SUBCASE("identity model draws standard normals") {
        const auto model = FlowModel::identity(config_for(3), 4);
        Rng rng(12);
        const std::size_t count = 20000;
        const auto s = sample(model, rng, count);
        for (std::size_t c = 0; c < 3; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < count; ++r) mean += s(r, c);
            mean /= static_cast<double>(count);
            CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(count)));
        }
    }
    SUBCASE("fixed seed reproduces") {
        const auto model = random_model(4, 3);
        Rng a(1), b(1);
        CHECK(sample(model, a, 50) == sample(model, b, 50));
        CHECK_THROWS_AS(sample(model, a, 0), UsageError);
    }
    SUBCASE("trained model recovers a shifted mean") {
        Rng rng(31);
        Matrix data(6000, 2);
        for (std::size_t r = 0; r < data.rows(); ++r) {
            data(r, 0) = 3.0 + rng.normal();
            data(r, 1) = -2.0 + 0.5 * rng.normal();
        }
        TrainConfig tc;
        tc.arch.hidden_width = 16;
        tc.epochs = 15;
        const auto model = train_member(tc, data, 8);
        Rng srng(2);
        const auto s = sample(model, srng, 20000);
        double m0 = 0.0, m1 = 0.0;
        for (std::size_t r = 0; r < s.rows(); ++r) {
            m0 += s(r, 0);
            m1 += s(r, 1);
        }
        CHECK(std::abs(m0 / 20000.0 - 3.0) < 0.1);
        CHECK(std::abs(m1 / 20000.0 + 2.0) < 0.1);
    }
}

TEST_CASE("flatten and assign roundtrip on a flow") {
    auto model = random_model(6, 4);
    const auto p = model.flatten();
    auto other = FlowModel::random(config_for(6), 4);
    other.assign(p);
    CHECK(other.flatten() == p);
    CHECK(p.size() == model.param_count());
    CHECK_THROWS_AS(other.assign(Vector(3)), ShapeError);
}

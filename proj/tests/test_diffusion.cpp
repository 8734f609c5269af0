#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emdt/diffusion.hpp"
#include "emdt/gradcheck.hpp"
#include "test_util.hpp"

using namespace emdt;
using D = Tensor<double>;

namespace {

ModelConfig micro_like() {
    ModelConfig cfg;
    cfg.width = 64;
    cfg.heads = 4;
    cfg.n1 = 1;
    cfg.n2 = 1;
    cfg.n3 = 0;
    cfg.asa_cycle = {{1, 1}, {2, 1}};
    cfg.compression = Compression::kTwoBranch;
    cfg.variant = Variant::kSingleStream;
    cfg.num_classes = 4;
    cfg.in_channels = 3;
    cfg.image_h = 16;
    cfg.image_w = 16;
    cfg.patch_size = 2;
    cfg.freq_dim = 32;
    return cfg;
}

void randomize_params(Model<double>& m, uint64_t seed, double stddev = 0.05) {
    Rng rng(seed);
    for (auto& [name, t] : m.params)
        for (auto& v : t.data()) v = rng.normal() * stddev;
}

}  // namespace

TEST_CASE("forward_process endpoints are exact") {
    Rng rng(1);
    D x0 = test::random_tensor<double>({2, 3, 4, 4}, rng);
    D eps = test::random_tensor<double>({2, 3, 4, 4}, rng);
    auto sched = FlowSchedule<double>::linear();

    D t0({2}, {0.0, 0.0});
    CHECK(test::bitwise_equal(forward_process(x0, eps, t0, sched), x0));
    D t1({2}, {1.0, 1.0});
    CHECK(test::bitwise_equal(forward_process(x0, eps, t1, sched), eps));

    D th({2}, {0.5, 0.5});
    D mid = forward_process(x0, eps, th, sched);
    for (size_t i = 0; i < mid.data().size(); ++i)
        CHECK(mid.data()[i] == doctest::Approx(0.5 * x0.data()[i] + 0.5 * eps.data()[i]).epsilon(1e-15));
}

TEST_CASE("rf_loss: oracle teacher reaches zero, zero model matches closed form") {
    Rng rng(3);
    D x0 = test::random_tensor<double>({4, 3, 4, 4}, rng);
    D eps = test::random_tensor<double>({4, 3, 4, 4}, rng);
    D t({4}, {0.1, 0.4, 0.7, 0.95});
    auto sched = FlowSchedule<double>::linear();

    VelocityFn<double> teacher = [&](const D&, const D&) { return sub(eps, x0); };
    CHECK(std::abs(rf_loss_parts(x0, eps, t, sched, teacher).item()) <= 1e-12);

    VelocityFn<double> zero_model = [&](const D& x_t, const D&) { return D::zeros(x_t.shape()); };
    double expect = 0;
    for (size_t i = 0; i < x0.data().size(); ++i) {
        const double d = eps.data()[i] - x0.data()[i];
        expect += d * d;
    }
    expect /= static_cast<double>(x0.numel());
    CHECK(rf_loss_parts(x0, eps, t, sched, zero_model).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("rf_loss differentiates through a micro model") {
    auto cfg = micro_like();
    auto model = Model<double>::build(cfg, 5);
    randomize_params(model, 6, 0.08);
    auto sched = FlowSchedule<double>::linear();
    Rng rng(7);
    D eps = test::random_tensor<double>({1, 3, 16, 16}, rng);
    D t({1}, {0.35});
    Conditioning<double> cond;
    cond.class_ids = {2};

    auto f = [&](D& x0) {
        return rf_loss_parts<double>(x0, eps, t, sched, [&](const D& x_t, const D& tt) {
            return model.forward(x_t, tt, cond);
        });
    };
    D x0 = test::random_tensor<double>({1, 3, 16, 16}, rng);
    CHECK(grad_check<double>(f, x0, 1e-5) <= 1e-4);
}

TEST_CASE("repa_loss: identical features -1, orthogonal 0, gradient routing") {
    Rng rng(9);
    auto enc = ReuseEncoder<double>::make(3, 4, 16, 42);
    D x0 = test::random_tensor<double>({2, 3, 16, 16}, rng);
    D g = enc.features(x0);
    CHECK(g.shape() == Shape{2, 16, 16});

    // identity head on features equal to g -> cosine 1 -> loss -1
    ProjectionHead<double> ident;
    ident.two_layer = false;
    ident.w1 = D::zeros({16, 16});
    for (int i = 0; i < 16; ++i) ident.w1.data()[i * 16 + i] = 1.0;
    ident.b1 = D::zeros({16});
    CHECK(std::abs(repa_loss(g, x0, enc, ident).item() + 1.0) <= 1e-12);

    // orthogonal features -> loss 0: rotate each feature pair by 90 degrees
    // on a 2-feature encoder
    auto enc2 = ReuseEncoder<double>::make(3, 4, 2, 43);
    D g2 = enc2.features(x0);
    D rotated = D::zeros(g2.shape());
    for (int64_t r = 0; r < g2.numel() / 2; ++r) {
        rotated.data()[r * 2 + 0] = -g2.data()[r * 2 + 1];
        rotated.data()[r * 2 + 1] = g2.data()[r * 2 + 0];
    }
    ProjectionHead<double> ident2;
    ident2.two_layer = false;
    ident2.w1 = D({2, 2}, {1, 0, 0, 1});
    ident2.b1 = D::zeros({2});
    CHECK(std::abs(repa_loss(rotated, x0, enc2, ident2).item()) <= 1e-12);

    // gradients reach the head and the features but not the encoder
    Rng hrng(10);
    auto head = ProjectionHead<double>::make(8, 16, true, hrng);
    D feats = test::random_tensor<double>({2, 16, 8}, rng);
    feats.set_requires_grad(true);
    D loss = repa_loss(feats, x0, enc, head);
    backward(loss);
    auto nonzero = [](const std::vector<double>& v) {
        for (double x : v)
            if (x != 0.0) return true;
        return false;
    };
    CHECK(nonzero(feats.grad()));
    CHECK(nonzero(head.w1.grad()));
    CHECK_FALSE(enc.w1.has_grad());
    CHECK_FALSE(enc.w1.requires_grad());
}

TEST_CASE("total_loss composition") {
    D rf = D::scalar(0.8);
    D repa = D::scalar(-0.6);
    CHECK(total_loss<double>(rf, &repa, 0.5).item() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(total_loss<double>(rf, &repa, 0.0).item() == 0.8);
    CHECK(total_loss<double>(rf, nullptr, 0.7).item() == 0.8);
    CHECK_THROWS_AS(total_loss<double>(rf, &repa, -0.1), ConfigError);
}

TEST_CASE("euler sampler recovers x0 exactly from the oracle constant field") {
    Rng seed_rng(11);
    D x0 = test::random_tensor<double>({2, 3, 4, 4}, seed_rng);
    auto sched = FlowSchedule<double>::linear();

    for (int steps : {1, 20}) {
        SamplerConfig cfg;
        cfg.steps = steps;
        Rng rng(77);  // same seed -> same initial noise for both step counts
        // initial state is eps; oracle velocity (eps - x0) is captured after
        // the sampler draws it, via a probe on the first call
        D eps_holder;
        VelocityFn<double> oracle = [&](const D& x, const D& t) {
            if (!eps_holder.defined()) {
                // first call sees x(1) = eps exactly
                CHECK(t.data()[0] == 1.0);
                eps_holder = x.clone();
            }
            return sub(eps_holder, x0);
        };
        D out = sample(oracle, {2, 3, 4, 4}, cfg, sched, rng);
        CHECK(test::max_abs_diff(out, x0) <= 1e-12);
    }
}

TEST_CASE("sampler is deterministic per seed and varies across seeds") {
    auto cfg = micro_like();
    auto model = Model<double>::build(cfg, 13);
    randomize_params(model, 14, 0.03);
    Conditioning<double> cond;
    cond.class_ids = {1};
    Conditioning<double> uncond;
    uncond.class_ids = {static_cast<int64_t>(cfg.num_classes)};
    auto sched = FlowSchedule<double>::linear();
    SamplerConfig sc;
    sc.steps = 4;

    auto fn = guided_velocity(model, cond, uncond, 1.0);
    Rng r1(100), r2(100), r3(101);
    D a = sample(fn, {1, 3, 16, 16}, sc, sched, r1);
    D b = sample(fn, {1, 3, 16, 16}, sc, sched, r2);
    D c = sample(fn, {1, 3, 16, 16}, sc, sched, r3);
    CHECK(test::bitwise_equal(a, b));
    CHECK(test::max_abs_diff(a, c) > 1e-12);
}

TEST_CASE("guidance scale 1 skips the unconditional branch") {
    auto cfg = micro_like();
    auto model = Model<double>::build(cfg, 15);
    randomize_params(model, 16, 0.03);
    Conditioning<double> cond;
    cond.class_ids = {0};
    Conditioning<double> uncond;
    uncond.class_ids = {static_cast<int64_t>(cfg.num_classes)};
    auto sched = FlowSchedule<double>::linear();

    int calls = 0;
    VelocityFn<double> counted = [&](const D& x, const D& t) {
        ++calls;
        return guided_velocity(model, cond, uncond, 1.0)(x, t);
    };
    SamplerConfig sc;
    sc.steps = 3;
    Rng rng(5);
    (void)sample(counted, {1, 3, 16, 16}, sc, sched, rng);
    CHECK(calls == 3);  // one evaluation per step, no uncond pass

    // guided path differs from conditional-only
    Rng ra(6), rb(6);
    D plain = sample(guided_velocity(model, cond, uncond, 1.0), {1, 3, 16, 16}, sc, sched, ra);
    D guided = sample(guided_velocity(model, cond, uncond, 2.5), {1, 3, 16, 16}, sc, sched, rb);
    CHECK(test::max_abs_diff(plain, guided) > 1e-15);
}

TEST_CASE("timestep samplers stay in [0,1]") {
    Rng rng(17);
    for (auto kind : {TimestepSampler::kUniform, TimestepSampler::kLogitNormal}) {
        D t = draw_timesteps<double>(256, kind, rng);
        for (double v : t.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("sampler config validation") {
    SamplerConfig bad;
    bad.steps = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    SamplerConfig bad2;
    bad2.guidance_scale = 0.5;
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

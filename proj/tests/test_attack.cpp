#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "freqpure/attack.hpp"
#include "test_util.hpp"

using namespace freqpure;
using namespace testutil;

namespace {

ImageBatch interior_batch(Shape s, std::mt19937_64& gen) { return {uniform(s, gen, 0.3, 0.7), RangeTag::unit}; }

double weighted_sum(const Tensor& a, const Tensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * w[i];
    return s;
}

} // namespace

TEST(Perturb, IdentityReturnsInput) {
    std::mt19937_64 gen(1);
    const ImageBatch x = unit_batch(Shape{2, 3, 8, 6}, gen);
    for (auto m : {AttackMode::pixel, AttackMode::phase_mag, AttackMode::all}) {
        const auto y = apply_perturbations(x, PerturbationSet::identity(x.shape(), active_fields(m)));
        EXPECT_LT(max_abs_diff(y.data, x.data), 1e-12);
    }
}

TEST(Perturb, LargePixelOffsetSaturates) {
    std::mt19937_64 gen(2);
    const ImageBatch x = unit_batch(Shape{1, 1, 4, 4}, gen);
    auto p = PerturbationSet::identity(x.shape(), active_fields(AttackMode::pixel));
    p.delta_pixel = Tensor(x.shape(), 2.0);
    const auto y = apply_perturbations(x, p);
    for (double v : y.data.values()) EXPECT_EQ(v, 1.0);
}

TEST(Perturb, ZeroMagnitudeGivesBlackImage) {
    std::mt19937_64 gen(3);
    const ImageBatch x = unit_batch(Shape{1, 2, 4, 4}, gen);
    auto p = PerturbationSet::identity(x.shape(), active_fields(AttackMode::mag));
    p.delta_mag = Tensor(x.shape(), 0.0);
    const auto y = apply_perturbations(x, p);
    for (double v : y.data.values()) EXPECT_EQ(v, 0.0);
}

TEST(Perturb, NegativeMagnitudeFactorIsRectified) {
    std::mt19937_64 gen(4);
    const ImageBatch x = unit_batch(Shape{1, 1, 4, 4}, gen);
    auto p = PerturbationSet::identity(x.shape(), active_fields(AttackMode::mag));
    p.delta_mag = Tensor(x.shape(), -3.0);
    const auto y = apply_perturbations(x, p);
    for (double v : y.data.values()) EXPECT_EQ(v, 0.0);
}

TEST(Perturb, ShapeMismatchThrows) {
    std::mt19937_64 gen(5);
    const ImageBatch x = unit_batch(Shape{1, 1, 4, 4}, gen);
    auto p = PerturbationSet::identity(Shape{1, 1, 4, 5}, active_fields(AttackMode::all));
    EXPECT_THROW(apply_perturbations(x, p), InvalidInput);
}

TEST(Perturb, BackwardMatchesFiniteDifferences) {
    std::mt19937_64 gen(6);
    const Shape s{1, 2, 6, 5};
    const ImageBatch x = interior_batch(s, gen);
    const Tensor w = gaussian(s, gen);
    const PerturbationModel model(x);
    auto p = PerturbationSet::identity(s, active_fields(AttackMode::all));
    // a generic point: small random offsets on every field
    p.delta_mag = uniform(s, gen, 0.95, 1.05);
    p.delta_phase = uniform(s, gen, -0.05, 0.05);
    p.delta_pixel = uniform(s, gen, -0.01, 0.01);

    const auto f = model.forward(p);
    const auto g = model.backward(f, w, p);
    const double eps = 1e-6;
    auto check = [&](Tensor PerturbationSet::*field, const Tensor& analytic, const char* name) {
        for (std::size_t i = 0; i < s.size(); i += 7) {
            PerturbationSet a = p, b = p;
            (a.*field)[i] += eps;
            (b.*field)[i] -= eps;
            const double fd = (weighted_sum(model.forward(a).pre_clip, w) - weighted_sum(model.forward(b).pre_clip, w)) / (2 * eps);
            EXPECT_NEAR(analytic[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << name << " " << i;
        }
    };
    check(&PerturbationSet::delta_mag, g.mag, "mag");
    check(&PerturbationSet::delta_phase, g.phase, "phase");
    check(&PerturbationSet::delta_pixel, g.pixel, "pixel");
}

TEST(Perturb, BackwardZeroOutsideClip) {
    std::mt19937_64 gen(7);
    const Shape s{1, 1, 4, 4};
    const ImageBatch x = unit_batch(s, gen);
    const PerturbationModel model(x);
    auto p = PerturbationSet::identity(s, active_fields(AttackMode::pixel));
    p.delta_pixel = Tensor(s, 5.0);
    const auto g = model.backward(model.forward(p), Tensor(s, 1.0), p);
    for (double v : g.pixel.values()) EXPECT_EQ(v, 0.0);
}

TEST(Loss, UniformLogitsGiveLogK) {
    std::mt19937_64 gen(8);
    const ImageBatch x = unit_batch(Shape{3, 1, 4, 4}, gen);
    const std::vector<int> labels{0, 4, 9};
    EXPECT_NEAR(attack_loss(x, x, Tensor(Shape{3, 10, 1, 1}), labels, 5e4), std::log(10.0), 1e-12);
}

TEST(Loss, ConfidentCorrectLogitsGiveNearZero) {
    std::mt19937_64 gen(9);
    const ImageBatch x = unit_batch(Shape{1, 1, 4, 4}, gen);
    Tensor z(Shape{1, 3, 1, 1});
    z[1] = 100.0;
    EXPECT_LT(attack_loss(x, x, z, std::vector<int>{1}, 1.0), 1e-12);
}

TEST(Loss, ZeroLambdaIsCrossEntropy) {
    std::mt19937_64 gen(10);
    const ImageBatch x = unit_batch(Shape{2, 1, 4, 4}, gen);
    const ImageBatch y = unit_batch(Shape{2, 1, 4, 4}, gen);
    const Tensor z = gaussian(Shape{2, 4, 1, 1}, gen, 3.0);
    const std::vector<int> labels{2, 3};
    const double want = 0.5 * (cross_entropy({z[0], z[1], z[2], z[3]}, 2) + cross_entropy({z[4], z[5], z[6], z[7]}, 3));
    EXPECT_LT(rel_err(attack_loss(y, x, z, labels, 0.0), want), 1e-12);
}

TEST(Loss, DistortionTermScalesWithLambda) {
    std::mt19937_64 gen(11);
    const ImageBatch x = unit_batch(Shape{1, 1, 4, 4}, gen);
    ImageBatch y = x;
    for (double& v : y.data.values()) v += 0.1;
    const Tensor z(Shape{1, 2, 1, 1});
    const double ce = std::log(2.0);
    EXPECT_NEAR(attack_loss(y, x, z, std::vector<int>{0}, 3.0), 3.0 * 0.01 + ce, 1e-12);
    EXPECT_NEAR(attack_loss(y, x, z, std::vector<int>{0}, 3.0, Distortion::rms), 3.0 * 0.1 + ce, 1e-12);
}

TEST(Loss, InputGradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(12);
    const Shape item{1, 1, 4, 4};
    const auto clf = brightness_classifier(item);
    const ImageBatch x = unit_batch(Shape{2, 1, 4, 4}, gen);
    ImageBatch y = unit_batch(Shape{2, 1, 4, 4}, gen);
    const std::vector<int> labels{0, 1};
    for (auto kind : {Distortion::mse, Distortion::rms}) {
        const Tensor g = attack_loss_input_gradient(clf, y, x, labels, 2.0, kind);
        for (std::size_t i = 0; i < y.data.size(); i += 3) {
            ImageBatch a = y, b = y;
            a.data[i] += 1e-6;
            b.data[i] -= 1e-6;
            const double fd = (attack_loss(a, x, clf.logits(a.data), labels, 2.0, kind) -
                               attack_loss(b, x, clf.logits(b.data), labels, 2.0, kind)) / 2e-6;
            EXPECT_NEAR(g[i], fd, 1e-6);
        }
    }
}

TEST(Config, UnknownModeListsValidOnes) {
    try {
        attack_mode_from_string("amplitude");
        FAIL();
    } catch (const InvalidInput& e) {
        const std::string msg = e.what();
        for (const auto& m : attack_mode_names()) EXPECT_NE(msg.find(m), std::string::npos);
    }
}

TEST(Config, ModeNamesRoundTrip) {
    for (const auto& m : attack_mode_names()) EXPECT_EQ(to_string(attack_mode_from_string(m)), m);
}

TEST(Config, RejectsBadValues) {
    AttackConfig c;
    c.lambda = -1.0;
    EXPECT_THROW(c.validate(), InvalidInput);
    c = AttackConfig{};
    c.max_iterations = 0;
    EXPECT_THROW(c.validate(), InvalidInput);
}

TEST(RunAttack, HugeLambdaReturnsCleanImage) {
    std::mt19937_64 gen(13);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(4, item, gen);
    for (auto m : {AttackMode::pixel, AttackMode::phase, AttackMode::all}) {
        AttackConfig cfg;
        cfg.lambda = 1e12;
        cfg.mode = m;
        const auto r = run_attack(x, labels, clf, cfg);
        EXPECT_LT(max_abs_diff(r.adversarial.data, x.data), 1e-9) << to_string(m);
    }
}

TEST(RunAttack, UnconstrainedPixelAttackFlipsLinearClassifier) {
    std::mt19937_64 gen(14);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(20, item, gen);
    ASSERT_GE(accuracy(clf, x.data, labels), 0.95);
    AttackConfig cfg;
    cfg.lambda = 0.0;
    cfg.mode = AttackMode::pixel;
    const auto r = run_attack(x, labels, clf, cfg);
    EXPECT_LE(accuracy(clf, r.adversarial.data, labels), 0.10);
}

TEST(RunAttack, TraceInvariants) {
    std::mt19937_64 gen(15);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(4, item, gen);
    AttackConfig cfg;
    cfg.mode = AttackMode::phase_mag;
    cfg.max_iterations = 60;
    const auto r = run_attack(x, labels, clf, cfg);
    ASSERT_EQ(r.traces.size(), 4u);
    for (const auto& t : r.traces) {
        ASSERT_FALSE(t.points.empty());
        EXPECT_LE(t.points.size(), cfg.max_iterations);
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < t.points.size(); ++i) {
            EXPECT_EQ(t.points[i].iteration, i + 1);
            EXPECT_GE(t.points[i].l2, 0.0);
            EXPECT_GE(t.points[i].cross_entropy, 0.0);
            best = std::min(best, t.points[i].objective);
        }
        EXPECT_EQ(best, t.best_objective);
        if (t.early_stopped) {
            const std::size_t n = t.points.size();
            ASSERT_GT(n, cfg.patience);
            for (std::size_t i = n - cfg.patience; i < n; ++i) EXPECT_GE(t.points[i].objective, t.best_objective);
        } else {
            EXPECT_EQ(t.points.size(), cfg.max_iterations);
        }
    }
}

TEST(RunAttack, InactiveFieldsStayAtIdentity) {
    std::mt19937_64 gen(16);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(2, item, gen);
    AttackConfig cfg;
    cfg.max_iterations = 30;
    cfg.mode = AttackMode::mag;
    const auto r1 = run_attack(x, labels, clf, cfg);
    for (const auto& p : r1.perturbations) {
        for (double v : p.delta_phase.values()) EXPECT_EQ(v, 0.0);
        for (double v : p.delta_pixel.values()) EXPECT_EQ(v, 0.0);
    }
    cfg.mode = AttackMode::phase;
    const auto r2 = run_attack(x, labels, clf, cfg);
    for (const auto& p : r2.perturbations) {
        for (double v : p.delta_mag.values()) EXPECT_EQ(v, 1.0);
        for (double v : p.delta_pixel.values()) EXPECT_EQ(v, 0.0);
    }
    cfg.mode = AttackMode::pixel;
    const auto r3 = run_attack(x, labels, clf, cfg);
    for (const auto& p : r3.perturbations) {
        for (double v : p.delta_mag.values()) EXPECT_EQ(v, 1.0);
        for (double v : p.delta_phase.values()) EXPECT_EQ(v, 0.0);
    }
}

TEST(RunAttack, SpectralFieldsStaySymmetric) {
    std::mt19937_64 gen(17);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(2, item, gen);
    AttackConfig cfg;
    cfg.lambda = 10.0;
    cfg.max_iterations = 40;
    cfg.mode = AttackMode::all;
    const auto r = run_attack(x, labels, clf, cfg);
    for (std::size_t b = 0; b < 2; ++b) {
        const auto d = decompose(ImageBatch{detail::slice_item(x.data, b), RangeTag::unit});
        double max_mag = 0.0;
        for (double m : d.magnitude.values()) max_mag = std::max(max_mag, m);
        for (const auto& pt : r.traces[b].points) EXPECT_LE(pt.imag_residual, 1e-6 * max_mag);
        const auto& p = r.perturbations[b];
        for (std::size_t i = 0; i < item.plane(); ++i) {
            const std::size_t j = reflect_index(i, item.h, item.w);
            EXPECT_NEAR(p.delta_mag[i], p.delta_mag[j], 1e-12);
            EXPECT_NEAR(p.delta_phase[i], -p.delta_phase[j], 1e-12);
        }
    }
}

TEST(RunAttack, OutputInUnitRangeAndPerturbationExact) {
    std::mt19937_64 gen(18);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(4, item, gen);
    AttackConfig cfg;
    cfg.lambda = 0.0;
    cfg.mode = AttackMode::all;
    cfg.max_iterations = 50;
    const auto r = run_attack(x, labels, clf, cfg);
    EXPECT_TRUE(r.adversarial.in_range());
    EXPECT_EQ(r.adversarial.range, RangeTag::unit);
    const ImageBatch d = extract_perturbation(x, r.adversarial);
    EXPECT_EQ(d.range, RangeTag::signed_unit);
    EXPECT_LT(max_abs_diff(x.data + d.data, r.adversarial.data), 1e-15);
}

TEST(RunAttack, RejectsMismatchedLabels) {
    std::mt19937_64 gen(19);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(4, item, gen);
    labels.pop_back();
    EXPECT_THROW(run_attack(x, labels, clf, AttackConfig{}), InvalidInput);
}

TEST(RunAttack, IsDeterministic) {
    std::mt19937_64 gen(20);
    const Shape item{1, 1, 8, 8};
    const auto clf = brightness_classifier(item);
    auto [x, labels] = brightness_data(3, item, gen);
    AttackConfig cfg;
    cfg.mode = AttackMode::phase_mag;
    cfg.max_iterations = 25;
    EXPECT_EQ(run_attack(x, labels, clf, cfg).adversarial.data.values(),
              run_attack(x, labels, clf, cfg).adversarial.data.values());
}

TEST(Traces, FileHasHeaderAndOneRowPerPoint) {
    AttackTrace a, b;
    a.points = {{1, -1.0, 0.0, 1.0, 0.0}, {2, -2.0, 0.1, 2.0, 0.0}};
    b.points = {{1, -0.5, 0.0, 0.5, 0.0}};
    const auto path = (std::filesystem::temp_directory_path() / "fq_trace.tsv").string();
    write_traces(path, {a, b});
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "item\titeration\tobjective\tl2\tcross_entropy");
    std::size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 3u);
    std::filesystem::remove(path);
}

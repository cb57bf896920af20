#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "freqpure/models.hpp"
#include "test_util.hpp"

using namespace freqpure;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

ToyDatasetSpec small_spec() {
    ToyDatasetSpec s;
    s.height = 8;
    s.width = 8;
    s.band = 2;
    s.class_count = 3;
    s.train_size = 600;
    s.val_size = 100;
    s.test_size = 200;
    s.seed = 5;
    s.spread = 2.0;
    return s;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("fq_models_" + name);
    fs::create_directories(d);
    return d;
}

ToyClassifier small_classifier(std::mt19937_64& gen) {
    ToyClassifier clf(Shape{1, 2, 8, 8}, 3, 2);
    clf.initialize(11);
    clf.fit_whitening(uniform(Shape{20, 2, 8, 8}, gen), 0.05);
    return clf;
}

} // namespace

TEST(Dataset, DeterministicAndWellFormed) {
    const auto spec = small_spec();
    const ToyDataset a = make_toy_dataset(spec), b = make_toy_dataset(spec);
    EXPECT_EQ(a.train.images.data.values(), b.train.images.data.values());
    EXPECT_EQ(a.test.labels, b.test.labels);
    EXPECT_EQ(a.train.size(), spec.train_size);
    EXPECT_EQ(a.val.size(), spec.val_size);
    EXPECT_EQ(a.test.size(), spec.test_size);
    EXPECT_EQ(a.test.images.shape(), (Shape{spec.test_size, 1, 8, 8}));
    EXPECT_TRUE(a.train.images.in_range());
    for (int y : a.train.labels) EXPECT_TRUE(y >= 0 && y < 3);
    auto other = spec;
    other.seed = 6;
    EXPECT_NE(make_toy_dataset(other).train.images.data.values(), a.train.images.data.values());
}

TEST(Dataset, RejectsSizesNotDivisibleByEight) {
    auto spec = small_spec();
    spec.height = 12;
    EXPECT_THROW(make_toy_dataset(spec), InvalidInput);
}

TEST(Dataset, BasisIsOrthonormal) {
    const auto basis = fourier_basis(8, 8, 2);
    for (std::size_t i = 0; i < basis.size(); ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < 64; ++k) dot += basis[i][k] * basis[j][k];
            EXPECT_NEAR(dot / 64.0, i == j ? 1.0 : 0.0, 1e-12);
        }
}

TEST(Classifier, LogitShape) {
    std::mt19937_64 gen(1);
    const auto clf = small_classifier(gen);
    EXPECT_EQ(clf.logits(uniform(Shape{5, 2, 8, 8}, gen)).shape(), (Shape{5, 3, 1, 1}));
    EXPECT_THROW(clf.logits(uniform(Shape{5, 1, 8, 8}, gen)), InvalidInput);
}

TEST(Classifier, InputGradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(2);
    const auto clf = small_classifier(gen);
    const Tensor x = uniform(Shape{2, 2, 8, 8}, gen);
    const Tensor w = gaussian(Shape{2, 3, 1, 1}, gen);
    auto loss = [&](const Tensor& in) {
        const Tensor z = clf.logits(in);
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) s += z[i] * w[i];
        return s;
    };
    Tensor z_out;
    const Tensor g = clf.input_gradient(x, [&](const Tensor&) { return w; }, &z_out);
    EXPECT_EQ(z_out.values(), clf.logits(x).values());
    for (std::size_t i = 0; i < x.size(); i += 9) {
        Tensor a = x, b = x;
        a[i] += 1e-6;
        b[i] -= 1e-6;
        EXPECT_NEAR(g[i], (loss(a) - loss(b)) / 2e-6, 1e-5 * std::max(1.0, std::abs(g[i]))) << i;
    }
}

TEST(Classifier, TrainGradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(3);
    auto clf = small_classifier(gen);
    const Tensor x = uniform(Shape{4, 2, 8, 8}, gen);
    const std::vector<int> labels{0, 2, 1, 2};
    std::vector<double> grad(clf.params().size(), 0.0);
    clf.train_gradient(x, labels, 0.1, grad);
    std::vector<double> scratch(grad.size());
    for (std::size_t i = 0; i < grad.size(); i += std::max<std::size_t>(1, grad.size() / 40)) {
        const double keep = clf.params()[i];
        clf.params()[i] = keep + 1e-6;
        const double up = clf.train_gradient(x, labels, 0.1, scratch);
        clf.params()[i] = keep - 1e-6;
        const double down = clf.train_gradient(x, labels, 0.1, scratch);
        clf.params()[i] = keep;
        EXPECT_NEAR(grad[i], (up - down) / 2e-6, 1e-5 * std::max(1.0, std::abs(grad[i]))) << i;
    }
}

TEST(Classifier, SaveLoadRoundTrip) {
    std::mt19937_64 gen(4);
    const auto clf = small_classifier(gen);
    const auto path = (scratch_dir("save") / "clf.fqm").string();
    clf.save(path);
    const auto back = ToyClassifier::load(path);
    const Tensor x = uniform(Shape{3, 2, 8, 8}, gen);
    EXPECT_EQ(back->logits(x).values(), clf.logits(x).values());
    EXPECT_EQ(back->fingerprint(), clf.fingerprint());
    EXPECT_FALSE(fs::exists(path + ".tmp"));
}

TEST(Classifier, TrainingIsSeedDeterministicAndLearns) {
    const auto ds = make_toy_dataset(small_spec());
    ClassifierTraining cfg;
    cfg.epochs = 5;
    cfg.seed = 9;
    const auto a = train_classifier(ds.train, ds.test, 3, cfg);
    const auto b = train_classifier(ds.train, ds.test, 3, cfg);
    EXPECT_EQ(a.model->params(), b.model->params());
    EXPECT_EQ(a.loss_curve.size(), 5u);
    EXPECT_LT(a.loss_curve.back(), a.loss_curve.front());
    EXPECT_GT(a.test_accuracy, 0.6);
    cfg.seed = 10;
    EXPECT_NE(train_classifier(ds.train, ds.test, 3, cfg).model->params(), a.model->params());
}

TEST(Classifier, ZeroEpochsStaysNearChance) {
    auto spec = small_spec();
    spec.class_count = 5;
    const auto ds = make_toy_dataset(spec);
    ClassifierTraining cfg;
    cfg.epochs = 0;
    const auto r = train_classifier(ds.train, ds.test, 5, cfg);
    EXPECT_TRUE(r.loss_curve.empty());
    EXPECT_LT(r.test_accuracy, 0.5);
}

TEST(Classifier, UnlearnableLabelsRaiseTrainingFailure) {
    auto ds = make_toy_dataset(small_spec());
    std::mt19937_64 gen(12);
    for (int& y : ds.train.labels) y = int(gen() % 3);
    for (int& y : ds.test.labels) y = int(gen() % 3);
    ClassifierTraining cfg;
    cfg.epochs = 1;
    try {
        train_classifier(ds.train, ds.test, 3, cfg);
        FAIL();
    } catch (const TrainingFailure& e) {
        EXPECT_EQ(e.loss_curve.size(), 1u);
    }
}

TEST(Score, OutputShapeAndInputCheck) {
    ToyScoreNet net(Shape{1, 2, 8, 8}, 2);
    net.initialize(3);
    std::mt19937_64 gen(5);
    EXPECT_EQ(net.predict_noise(gaussian(Shape{3, 2, 8, 8}, gen), 0.4).shape(), (Shape{3, 2, 8, 8}));
    EXPECT_THROW(net.evaluate(gaussian(Shape{3, 1, 8, 8}, gen), 0.4), InvalidInput);
}

TEST(Score, DsmGradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(6);
    ToyScoreNet net(Shape{1, 1, 8, 8}, 2);
    net.fit_prior(uniform(Shape{30, 1, 8, 8}, gen, -1.0, 1.0));
    net.initialize(4);
    const Tensor xt = gaussian(Shape{2, 1, 8, 8}, gen);
    const Tensor eps = gaussian(Shape{2, 1, 8, 8}, gen);
    const std::vector<double> t{0.2, 0.7};
    std::vector<double> grad(net.params().size(), 0.0);
    net.dsm_loss(xt, t, eps, &grad);
    for (std::size_t i = 0; i < grad.size(); i += std::max<std::size_t>(1, grad.size() / 60)) {
        const double keep = net.params()[i];
        net.params()[i] = keep + 1e-6;
        const double up = net.dsm_loss(xt, t, eps, nullptr);
        net.params()[i] = keep - 1e-6;
        const double down = net.dsm_loss(xt, t, eps, nullptr);
        net.params()[i] = keep;
        EXPECT_NEAR(grad[i], (up - down) / 2e-6, 1e-5 * std::max(1.0, std::abs(grad[i]))) << i;
    }
}

TEST(Score, LearnsGaussianScore) {
    // white Gaussian data with variance v0: the true score is -x / (a v0 + 1 - a)
    const double sd = 0.3;
    std::mt19937_64 gen(7);
    const Tensor train = gaussian(Shape{1200, 1, 8, 8}, gen, sd);
    const Tensor val = gaussian(Shape{200, 1, 8, 8}, gen, sd);
    const DiffusionSchedule sched;
    ScoreTraining cfg;
    cfg.epochs = 2;
    cfg.seed = 1;
    const auto r = train_score_model(train, val, sched, cfg);
    EXPECT_LT(r.val_loss, r.zero_baseline);
    for (double t : {0.05, 0.15, 0.5}) {
        const double a = sched.alpha(t);
        const Tensor x = gaussian(Shape{16, 1, 8, 8}, gen, std::sqrt(a * sd * sd + 1 - a));
        const Tensor s = r.model->evaluate(x, t);
        double dot = 0.0, ns = 0.0, nt = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double truth = -x[i] / (a * sd * sd + 1 - a);
            dot += s[i] * truth;
            ns += s[i] * s[i];
            nt += truth * truth;
        }
        EXPECT_GT(dot / std::sqrt(ns * nt), 0.8) << t;
    }
}

TEST(Score, TrainingIsSeedDeterministicAndSaves) {
    std::mt19937_64 gen(8);
    const Tensor train = uniform(Shape{130, 1, 8, 8}, gen, -1.0, 1.0);
    ScoreTraining cfg;
    cfg.epochs = 1;
    cfg.width = 2;
    const auto a = train_score_model(train, train, DiffusionSchedule{}, cfg);
    const auto b = train_score_model(train, train, DiffusionSchedule{}, cfg);
    EXPECT_EQ(a.model->params(), b.model->params());
    const auto path = (scratch_dir("score") / "score.fqm").string();
    a.model->save(path);
    const auto back = ToyScoreNet::load(path);
    const Tensor x = gaussian(Shape{2, 1, 8, 8}, gen);
    EXPECT_EQ(back->evaluate(x, 0.3).values(), a.model->evaluate(x, 0.3).values());
}

TEST(Manifest, LoadsClassifierAndAppliesNormalization) {
    std::mt19937_64 gen(9);
    const auto clf = small_classifier(gen);
    const auto dir = scratch_dir("manifest_ok");
    clf.save((dir / "w.fqm").string());
    std::ofstream((dir / "clf.manifest").string()) << "# test model\nweights = w.fqm\ninput_shape = 2,8,8\n"
                                                      "class_count = 3\nvalue_range = unit\nmean = 0.5\nstd = 0.5\n";
    const auto loaded = load_external_classifier((dir / "clf.manifest").string());
    EXPECT_EQ(loaded->class_count(), 3u);
    const Tensor x = uniform(Shape{2, 2, 8, 8}, gen);
    Tensor normalized = x;
    for (double& v : normalized.values()) v = (v - 0.5) / 0.5;
    EXPECT_EQ(loaded->logits(x).values(), clf.logits(normalized).values());
}

TEST(Manifest, ShapeMismatchNamesBothShapes) {
    std::mt19937_64 gen(10);
    const auto dir = scratch_dir("manifest_shape");
    small_classifier(gen).save((dir / "w.fqm").string());
    std::ofstream((dir / "clf.manifest").string()) << "weights = w.fqm\ninput_shape = 3,224,224\nclass_count = 3\nvalue_range = unit\n";
    try {
        load_external_classifier((dir / "clf.manifest").string());
        FAIL();
    } catch (const LoadError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(1,3,224,224)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(1,2,8,8)"), std::string::npos) << msg;
    }
}

TEST(Manifest, MissingWeightsAndBadRange) {
    const auto dir = scratch_dir("manifest_missing");
    std::ofstream((dir / "clf.manifest").string()) << "weights = nope.fqm\ninput_shape = 1,8,8\nclass_count = 3\nvalue_range = unit\n";
    EXPECT_THROW(load_external_classifier((dir / "clf.manifest").string()), LoadError);
    EXPECT_THROW(load_external_classifier((dir / "absent.manifest").string()), LoadError);
    std::mt19937_64 gen(11);
    small_classifier(gen).save((dir / "w.fqm").string());
    std::ofstream((dir / "signed.manifest").string()) << "weights = w.fqm\ninput_shape = 2,8,8\nclass_count = 3\nvalue_range = signed\n";
    EXPECT_THROW(load_external_classifier((dir / "signed.manifest").string()), LoadError);
}

TEST(Manifest, LoadsScoreModel) {
    const auto dir = scratch_dir("manifest_score");
    ToyScoreNet net(Shape{1, 1, 8, 8}, 2);
    net.initialize(1);
    net.save((dir / "s.fqm").string());
    std::ofstream((dir / "score.manifest").string()) << "weights = s.fqm\ninput_shape = 1,8,8\nvalue_range = signed\n";
    const auto loaded = load_external_score((dir / "score.manifest").string());
    std::mt19937_64 gen(12);
    const Tensor x = gaussian(Shape{1, 1, 8, 8}, gen);
    EXPECT_EQ(loaded->evaluate(x, 0.2).values(), net.evaluate(x, 0.2).values());
}

TEST(Weights, RejectsForeignFile) {
    const auto path = (scratch_dir("foreign") / "junk.fqm").string();
    std::ofstream(path) << "definitely not weights";
    EXPECT_THROW(ToyClassifier::load(path), LoadError);
    EXPECT_THROW(ToyScoreNet::load(path), LoadError);
}

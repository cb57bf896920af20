#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "freqpure/bench.hpp"
#include "test_util.hpp"

using namespace freqpure;
using namespace testutil;

namespace {

struct Fixture {
    Shape item{1, 1, 8, 8};
    LinearClassifier clf = brightness_classifier(item);
    FunctionScore score{[](const Tensor& x, double) {
        Tensor out = x;
        out *= -1.0;
        return out;
    }};
    LabeledBatch test;

    Fixture() {
        std::mt19937_64 gen(1);
        auto [x, y] = brightness_data(60, item, gen);
        test = LabeledBatch{x, y};
    }

    EvalComponents components(AttackCache* cache = nullptr) const {
        EvalComponents c;
        c.classifier = &clf;
        c.score = &score;
        c.test = &test;
        c.attack.lambda = 0.0;
        c.attack.max_iterations = 20;
        c.attack_hash = "h";
        c.purify.dt = 1e-2;
        c.cache = cache;
        c.purify_chunk = 7;
        return c;
    }

    static EvalPlan plan() {
        EvalPlan p;
        p.subset_size = 12;
        p.subset_count = 2;
        p.seeds = {3, 4};
        p.repeats = 3;
        p.modes = {AttackMode::pixel, AttackMode::phase};
        p.t_star_list = {0.02, 0.05};
        return p;
    }
};

} // namespace

TEST(Subsets, DeterministicDistinctAndInRange) {
    const auto a = subset_indices(100, 30, 7);
    EXPECT_EQ(a, subset_indices(100, 30, 7));
    EXPECT_NE(a, subset_indices(100, 30, 8));
    EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 30u);
    for (auto i : a) EXPECT_LT(i, 100u);
    EXPECT_THROW(subset_indices(10, 11, 0), InvalidInput);
}

TEST(Stats, SampleStdUsesBesselCorrection) {
    EXPECT_DOUBLE_EQ(sample_std({2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0}), std::sqrt(32.0 / 7.0));
    EXPECT_EQ(sample_std({3.0}), 0.0);
    EXPECT_DOUBLE_EQ(mean_of({1.0, 2.0, 6.0}), 3.0);
}

TEST(Plan, ValidationAndCellCount) {
    EvalPlan p = Fixture::plan();
    EXPECT_EQ(p.cell_count(), 2u * 2u * 3u);
    p.modes.clear();
    EXPECT_EQ(p.cell_count(), 2u * 3u);
    p.seeds = {1};
    EXPECT_THROW(p.validate(), InvalidInput);
    p = Fixture::plan();
    p.t_star_list = {0.0};
    EXPECT_THROW(p.validate(), InvalidInput);
}

TEST(Sweep, RecordCountAndGridOrder) {
    const Fixture f;
    const EvalPlan plan = Fixture::plan();
    const auto rep = run_sweep(plan, f.components());
    ASSERT_EQ(rep.records.size(), plan.cell_count());
    std::size_t j = 0;
    for (auto m : plan.modes)
        for (double t : plan.t_star_list)
            for (std::size_t r = 0; r < plan.repeats; ++r, ++j) {
                const auto& rec = rep.records[j];
                EXPECT_EQ(rec.mode, to_string(m));
                EXPECT_EQ(rec.t_star, t);
                EXPECT_EQ(rec.repeat, r);
                EXPECT_EQ(rec.subset_seed, plan.seeds[r % plan.subset_count]);
                EXPECT_FALSE(rec.failed) << rec.cause;
                for (const auto& name : metric_names()) {
                    const auto v = metric_value(rec, name);
                    ASSERT_TRUE(v.has_value());
                    EXPECT_GE(*v, 0.0);
                    EXPECT_LE(*v, 100.0);
                }
            }
    // summaries: modes x t* x four metrics, each with `repeats` runs
    EXPECT_EQ(rep.summaries.size(), plan.modes.size() * plan.t_star_list.size() * 4);
    for (const auto& s : rep.summaries) {
        EXPECT_EQ(s.runs.size(), plan.repeats);
        EXPECT_DOUBLE_EQ(s.mean, mean_of(s.runs));
        EXPECT_DOUBLE_EQ(s.std, sample_std(s.runs));
    }
}

TEST(Sweep, EmptyModeListGivesCleanColumnsOnly) {
    const Fixture f;
    EvalPlan plan = Fixture::plan();
    plan.modes.clear();
    const auto rep = run_sweep(plan, f.components());
    ASSERT_EQ(rep.records.size(), plan.t_star_list.size() * plan.repeats);
    for (const auto& r : rep.records) {
        EXPECT_EQ(r.mode, "none");
        EXPECT_TRUE(r.clean && r.purified_clean);
        EXPECT_FALSE(r.adversarial || r.purified_adversarial);
    }
    const std::string table = render_table(rep);
    EXPECT_NE(table.find("none"), std::string::npos);
    EXPECT_NE(table.find(" - "), std::string::npos);
}

TEST(Sweep, HugeLambdaMatchesCleanAccuracy) {
    const Fixture f;
    EvalPlan plan = Fixture::plan();
    plan.t_star_list = {0.02};
    auto comp = f.components();
    comp.attack.lambda = 1e12;
    const auto rep = run_sweep(plan, comp);
    for (const auto& r : rep.records) EXPECT_EQ(r.adversarial, r.clean);
}

TEST(Sweep, WorkerCountDoesNotChangeReport) {
    const Fixture f;
    const EvalPlan plan = Fixture::plan();
    AttackCache c1, c3;
    auto r1 = run_sweep(plan, f.components(&c1), 1);
    auto r3 = run_sweep(plan, f.components(&c3), 3);
    r1.config_hash = r3.config_hash = "x";
    EXPECT_EQ(report_json(r1), report_json(r3));
}

TEST(Sweep, CacheComputesEachAttackOnce) {
    const Fixture f;
    const EvalPlan plan = Fixture::plan();
    AttackCache cache;
    run_sweep(plan, f.components(&cache), 2);
    // one attack per (mode, subset)
    EXPECT_EQ(cache.computed(), plan.modes.size() * plan.subset_count);
}

TEST(Sweep, DiskCacheIsReused) {
    const Fixture f;
    EvalPlan plan = Fixture::plan();
    plan.t_star_list = {0.02};
    const auto dir = std::filesystem::temp_directory_path() / "fq_bench_cache";
    std::filesystem::remove_all(dir);
    AttackCache first(dir.string());
    const auto a = run_sweep(plan, f.components(&first));
    EXPECT_GT(first.computed(), 0u);
    AttackCache second(dir.string());
    const auto b = run_sweep(plan, f.components(&second));
    EXPECT_EQ(second.computed(), 0u);
    EXPECT_EQ(report_json(a), report_json(b));
    std::filesystem::remove_all(dir);
}

TEST(Sweep, FailuresAreRecordedNotThrown) {
    const Fixture f;
    const FunctionScore broken([](const Tensor& x, double) { return Tensor(x.shape(), std::nan("")); });
    auto comp = f.components();
    comp.score = &broken;
    EvalPlan plan = Fixture::plan();
    plan.modes = {AttackMode::pixel};
    plan.t_star_list = {0.02};
    const auto rep = run_sweep(plan, comp);
    for (const auto& r : rep.records) {
        EXPECT_TRUE(r.failed);
        EXPECT_NE(r.cause.find("non-finite"), std::string::npos);
    }
    EXPECT_TRUE(rep.summaries.empty());
}

TEST(Report, JsonRoundTrip) {
    const Fixture f;
    EvalPlan plan = Fixture::plan();
    plan.t_star_list = {0.02};
    auto rep = run_sweep(plan, f.components());
    rep.config_hash = "0123456789abcdef";
    const std::string text = report_json(rep);
    EXPECT_EQ(text.find("wall"), std::string::npos);
    const auto back = parse_report(text);
    EXPECT_EQ(back.config_hash, rep.config_hash);
    ASSERT_EQ(back.records.size(), rep.records.size());
    EXPECT_EQ(report_json(back), text);
}

TEST(Report, TableHeaderAndRows) {
    const Fixture f;
    EvalPlan plan = Fixture::plan();
    plan.t_star_list = {0.02};
    const auto rep = run_sweep(plan, f.components());
    const std::string table = render_table(rep);
    const std::string header = table.substr(0, table.find('\n'));
    std::size_t pos = 0;
    for (const char* col : {"Clean", "Adversarial", "Purified Clean", "Purified Adversarial"}) {
        const auto at = header.find(col, pos);
        ASSERT_NE(at, std::string::npos) << col;
        pos = at + 1;
    }
    EXPECT_NE(table.find("+-"), std::string::npos);
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 1 + long(plan.modes.size()));
}

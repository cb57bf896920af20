#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "freqpure/io.hpp"
#include "test_util.hpp"

using namespace freqpure;
using namespace testutil;

namespace {
std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }
}

TEST(BatchFile, RoundTripIsBitExact) {
    std::mt19937_64 gen(1);
    BatchFile f{ImageBatch{gaussian(Shape{3, 2, 5, 4}, gen), RangeTag::signed_unit}, {1, 0, 2}, "phase", 42, "abc"};
    f.batch.data[0] = 1e-300;
    const auto path = tmp("fq_batch.fqb");
    write_batch(path, f);
    const BatchFile g = read_batch(path);
    EXPECT_EQ(g.batch.data.values(), f.batch.data.values());
    EXPECT_EQ(g.batch.shape(), f.batch.shape());
    EXPECT_EQ(g.batch.range, RangeTag::signed_unit);
    EXPECT_EQ(g.labels, f.labels);
    EXPECT_EQ(g.mode, "phase");
    EXPECT_EQ(g.seed, 42u);
    EXPECT_EQ(g.config_hash, "abc");
    std::filesystem::remove(path);
}

TEST(BatchFile, RejectsForeignFile) {
    const auto path = tmp("fq_not_batch.fqb");
    std::ofstream(path) << "hello world, not a batch";
    EXPECT_THROW(read_batch(path), LoadError);
    EXPECT_THROW(read_batch(tmp("fq_missing.fqb")), LoadError);
    std::filesystem::remove(path);
}

TEST(BatchFile, LabelCountMustMatch) {
    BatchFile f{ImageBatch{Tensor(Shape{2, 1, 2, 2}), RangeTag::unit}, {1}, "clean", 0, ""};
    EXPECT_THROW(write_batch(tmp("fq_bad.fqb"), f), InvalidInput);
}

TEST(Pgm16, QuantisesWithinHalfStep) {
    std::mt19937_64 gen(2);
    const Tensor x = uniform(Shape{1, 1, 6, 7}, gen);
    const auto path = tmp("fq_img.pgm");
    write_pgm16(path, x.plane(0, 0), 6, 7);
    std::size_t h = 0, w = 0;
    const auto back = read_pgm16(path, h, w);
    ASSERT_EQ(h, 6u);
    ASSERT_EQ(w, 7u);
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_LE(std::abs(back[i] - x[i]), 0.5 / 65535.0 + 1e-12);
    std::filesystem::remove(path);
}

TEST(Pgm16, MagnifiedPerturbationIsCentred) {
    Tensor d(Shape{1, 1, 1, 3});
    d[0] = -0.01;
    d[1] = 0.0;
    d[2] = 0.01;
    const auto path = tmp("fq_pert.pgm");
    write_pgm16(path, d.plane(0, 0), 1, 3, 20.0, 0.5);
    std::size_t h = 0, w = 0;
    const auto back = read_pgm16(path, h, w);
    EXPECT_NEAR(back[0], 0.3, 1e-4);
    EXPECT_NEAR(back[1], 0.5, 1e-4);
    EXPECT_NEAR(back[2], 0.7, 1e-4);
    std::filesystem::remove(path);
}

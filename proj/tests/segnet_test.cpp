#include <algorithm>
#include <optional>
#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "msgen/rng.hpp"
#include "msgen/segnet/adam.hpp"
#include "msgen/segnet/network.hpp"
#include "msgen/segnet/train.hpp"
#include "test_util.hpp"

using namespace msgen;
using namespace msgen::segnet;

namespace {

Topology topo(SkipKind k, std::size_t depth, std::size_t c)
{
    Topology t;
    t.kind = k;
    t.depth = depth;
    t.base_channels = c;
    return t;
}

template <typename T>
Batch<T> random_batch(std::uint64_t seed, std::size_t count, std::size_t side)
{
    Rng rng(seed);
    Batch<T> b{count, side, side, {}, {}};
    for (std::size_t i = 0; i < count * side * side; ++i) {
        b.images.push_back(static_cast<T>(rng.uniform(0.0, 2.0)));
        b.masks.push_back(rng.uniform() < 0.3 ? 1 : 0);
    }
    return b;
}

// Bright disk on a dim background; the mask is the disk.
SliceSample disk_slice(std::uint64_t seed, std::size_t side, const std::string& patient, const std::string& scan,
                       std::size_t z)
{
    Rng rng(seed);
    SliceSample s;
    s.image = Image2D(side, side);
    s.mask = Mask2D(side, side);
    const double cy = rng.uniform(4.0, double(side) - 4), cx = rng.uniform(4.0, double(side) - 4);
    const double r = rng.uniform(2.0, 3.5);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const bool in = std::hypot(double(y) - cy, double(x) - cx) <= r;
            s.mask(y, x) = in;
            s.image(y, x) = static_cast<float>((in ? 1.6 : 0.8) + 0.05 * rng.normal());
            s.lesion_pixels += in;
        }
    s.provenance = {"ds", patient, scan, z};
    return s;
}

std::vector<SliceSample> disk_set(std::uint64_t seed, std::size_t patients, std::size_t per, std::size_t side)
{
    std::vector<SliceSample> out;
    for (std::size_t p = 0; p < patients; ++p)
        for (std::size_t z = 0; z < per; ++z)
            out.push_back(disk_slice(derive_seed(seed, "disk", p * 100 + z), side, "p" + std::to_string(p),
                                     "s" + std::to_string(p), z));
    return out;
}

TrainConfig small_config(std::size_t epochs)
{
    TrainConfig c;
    c.topology = topo(SkipKind::nested_dense, 2, 4);
    c.epochs = epochs;
    c.batch_size = 2;
    c.seed = 11;
    return c;
}

} // namespace

TEST(Network, ZeroWeightsGiveHalf)
{
    ModelParams<double> p(topo(SkipKind::nested_dense, 3, 2));
    const auto b = random_batch<double>(1, 2, 8);
    for (double v : forward(p, b)) ASSERT_EQ(v, 0.5);
    std::vector<SliceSample> s = {disk_slice(1, 8, "a", "a", 0)};
    const auto m = predict(p.cast<float>(), s, 0.5);
    EXPECT_TRUE(std::all_of(m[0].data.begin(), m[0].data.end(), [](auto v) { return v == 1; }));
}

TEST(Network, OutputsStrictlyInsideUnitInterval)
{
    for (auto kind : {SkipKind::plain_skip, SkipKind::nested_dense}) {
        const auto p = init_params<double>(topo(kind, 3, 3), 5);
        for (double v : forward(p, random_batch<double>(2, 3, 16))) {
            ASSERT_GT(v, 0.0);
            ASSERT_LT(v, 1.0);
        }
    }
}

TEST(Network, DepthTwoNodeGraph)
{
    for (auto kind : {SkipKind::plain_skip, SkipKind::nested_dense}) {
        const Network net(topo(kind, 2, 2));
        std::set<std::pair<std::size_t, std::size_t>> ids;
        for (const auto& n : net.nodes()) ids.emplace(n.level, n.column);
        EXPECT_EQ(ids, (std::set<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 0}, {0, 1}}));
    }
    const auto a = init_params<double>(topo(SkipKind::plain_skip, 2, 3), 9);
    const auto b = init_params<double>(topo(SkipKind::nested_dense, 2, 3), 9);
    EXPECT_EQ(a.values, b.values);
    const auto batch = random_batch<double>(3, 2, 8);
    EXPECT_EQ(forward(a, batch), forward(b, batch));
}

TEST(Network, NestedHasMoreParametersFromDepthThree)
{
    for (std::size_t d = 3; d <= 5; ++d) {
        const Network plain(topo(SkipKind::plain_skip, d, 4)), nested(topo(SkipKind::nested_dense, d, 4));
        EXPECT_GT(nested.param_count(), plain.param_count()) << d;
        // dense nodes X(i,j), j >= 1, i < L-1-j
        EXPECT_EQ(nested.nodes().size(), d * (d + 1) / 2);
        EXPECT_EQ(plain.nodes().size(), 2 * d - 1);
    }
}

TEST(Network, ShapeErrors)
{
    const auto p = init_params<double>(topo(SkipKind::nested_dense, 3, 2), 1);
    EXPECT_THROW(forward(p, random_batch<double>(1, 1, 10)), ValidationError);
    auto b = random_batch<double>(1, 1, 8);
    b.images.pop_back();
    EXPECT_THROW(forward(p, b), ValidationError);
    EXPECT_THROW(topo(SkipKind::plain_skip, 1, 2).validate(), ValidationError);
    EXPECT_THROW(topo(SkipKind::plain_skip, 2, 0).validate(), ValidationError);
}

TEST(Loss, ClosedForms)
{
    const std::vector<double> half = {0.5};
    const std::vector<std::uint8_t> one = {1}, zero = {0};
    EXPECT_NEAR(weighted_bce<double>(half, one, 0.8), 0.8 * std::log(2.0), 1e-12);
    EXPECT_NEAR(weighted_bce<double>(half, one, 0.8), 0.554518, 1e-6);
    EXPECT_NEAR(weighted_bce<double>(half, zero, 0.8), 0.138629, 1e-6);
    const std::vector<double> sure = {1.0};
    EXPECT_NEAR(weighted_bce<double>(sure, one, 0.8), -0.8 * std::log(1 - 1e-7), 1e-15);
    double prev = 1e9;
    for (double p : {0.5, 0.7, 0.9, 0.99, 0.9999}) {
        const std::vector<double> pr = {p};
        const double l = weighted_bce<double>(pr, one, 0.8);
        EXPECT_LT(l, prev);
        prev = l;
    }
    EXPECT_THROW(weighted_bce<double>(half, std::vector<std::uint8_t>{1, 0}, 0.8), ValidationError);
}

namespace {

// Central differences are only valid where no ReLU or max-pool switch lies
// within +-h of the parameter. The fixture is screened for that without
// looking at the analytic gradient: the difference quotients at h and h/2
// must agree, which fails whenever a kink is crossed.
struct FdFixture {
    ModelParams<double> params;
    Batch<double> batch;
    std::vector<double> fd;
};

std::optional<FdFixture> smooth_fixture(SkipKind kind, std::uint64_t seed, double h)
{
    FdFixture f{init_params<double>(topo(kind, 2, 2), seed), random_batch<double>(seed + 2, 2, 8), {}};
    Rng rng(seed + 1);
    for (auto& v : f.params.values) v += rng.uniform(-0.05, 0.05);  // nonzero biases too
    auto quotient = [&](std::size_t i, double step) {
        const double orig = f.params.values[i];
        f.params.values[i] = orig + step;
        const double up = gradients(f.params, f.batch, 0.8).loss;
        f.params.values[i] = orig - step;
        const double down = gradients(f.params, f.batch, 0.8).loss;
        f.params.values[i] = orig;
        return (up - down) / (2 * step);
    };
    for (std::size_t i = 0; i < f.params.values.size(); ++i) {
        const double a = quotient(i, h), b = quotient(i, h / 2);
        if (std::abs(a - b) > 1e-6 * std::max({std::abs(a), std::abs(b), 1e-8})) return std::nullopt;
        f.fd.push_back(a);
    }
    return f;
}

} // namespace

TEST(Gradients, MatchCentralDifferences)
{
    const double h = 1e-4;
    for (auto kind : {SkipKind::plain_skip, SkipKind::nested_dense}) {
        std::size_t checked = 0;
        for (std::uint64_t seed = 1; seed <= 60 && checked < 3; ++seed) {
            auto f = smooth_fixture(kind, seed, h);
            if (!f) continue;
            ++checked;
            const auto g = gradients(f->params, f->batch, 0.8);
            double worst = 0;
            for (std::size_t i = 0; i < f->fd.size(); ++i) {
                const double scale = std::max({std::abs(f->fd[i]), std::abs(g.grad[i]), 1e-8});
                worst = std::max(worst, std::abs(f->fd[i] - g.grad[i]) / scale);
            }
            EXPECT_LT(worst, 1e-4) << to_string(kind) << " seed " << seed;
        }
        EXPECT_EQ(checked, 3u) << "too few kink-free fixtures";
    }
}

TEST(Gradients, SmallerStepAgreesEverywhere)
{
    // without screening, a step small enough to avoid kinks still matches
    auto f = FdFixture{init_params<double>(topo(SkipKind::nested_dense, 2, 2), 21), random_batch<double>(7, 2, 8), {}};
    const auto g = gradients(f.params, f.batch, 0.8);
    const double h = 1e-5;
    double worst = 0;
    for (std::size_t i = 0; i < f.params.values.size(); ++i) {
        const double orig = f.params.values[i];
        f.params.values[i] = orig + h;
        const double up = gradients(f.params, f.batch, 0.8).loss;
        f.params.values[i] = orig - h;
        const double down = gradients(f.params, f.batch, 0.8).loss;
        f.params.values[i] = orig;
        const double fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - g.grad[i]) / std::max({std::abs(fd), std::abs(g.grad[i]), 1e-8}));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Gradients, VanishAtSaturatedMinimum)
{
    // single pixel pushed through the head bias: p -> y
    ModelParams<double> p(topo(SkipKind::plain_skip, 2, 1));
    p.values[p.network.head_bias_offset()] = 40.0;
    Batch<double> b{1, 2, 2, {0, 0, 0, 0}, {1, 1, 1, 1}};
    const auto g = gradients(p, b, 0.8);
    for (double v : g.grad) EXPECT_LE(std::abs(v), 1e-6);
}

TEST(Gradients, DeadUnitHasZeroGradient)
{
    // all-zero weights: every ReLU output is zero, so conv1 weights of the
    // first node receive no gradient
    ModelParams<double> p(topo(SkipKind::nested_dense, 2, 2));
    const auto g = gradients(p, random_batch<double>(3, 1, 8), 0.8);
    const auto& n0 = p.network.nodes()[0];
    for (std::size_t k = 0; k < n0.conv1.weight_count(); ++k) EXPECT_EQ(g.grad[n0.conv1.weight_offset + k], 0.0);
}

TEST(Adam, FirstStep)
{
    std::vector<double> x = {0.0};
    const std::vector<double> g = {1.0};
    AdamState st(1);
    AdamConfig cfg;
    cfg.weight_decay = 0;
    adam_step<double>(x, g, st, cfg);
    EXPECT_NEAR(x[0], -1e-3 / (1 + 1e-8), 1e-18);
    EXPECT_NEAR(x[0], -9.99999990e-4, 1e-12);
    EXPECT_EQ(st.t, 1u);
    adam_step<double>(x, g, st, cfg);
    EXPECT_NEAR(x[0], -2e-3, 1e-10);
    EXPECT_GE(st.v[0], 0.0);
}

TEST(Adam, ZeroGradientLeavesParams)
{
    std::vector<double> x = {0.3, -2.0};
    const std::vector<double> g = {0.0, 0.0};
    AdamState st(2);
    AdamConfig cfg;
    cfg.weight_decay = 0;
    adam_step<double>(x, g, st, cfg);
    EXPECT_EQ(x, (std::vector<double>{0.3, -2.0}));
    EXPECT_EQ(st.t, 1u);
    EXPECT_THROW(adam_step<double>(x, std::vector<double>{1.0}, st, cfg), ValidationError);
}

TEST(Adam, WeightDecayIsCoupled)
{
    std::vector<double> x = {1.0};
    const std::vector<double> g = {0.0};
    AdamState st(1);
    AdamConfig cfg;
    cfg.weight_decay = 0.5;
    adam_step<double>(x, g, st, cfg);
    // g_eff = 0.5, first step moves by lr * sign
    EXPECT_NEAR(x[0], 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), 1e-15);
}

TEST(Split, FivePatients)
{
    const auto s = disk_set(1, 5, 3, 8);
    const auto sp = split_grouped(s, 0.8, 42);
    std::set<std::string> tr, va;
    for (const auto& x : sp.train) tr.insert(x.provenance.patient_id);
    for (const auto& x : sp.val) va.insert(x.provenance.patient_id);
    EXPECT_EQ(tr.size(), 4u);
    EXPECT_EQ(va.size(), 1u);
    EXPECT_EQ(sp.train.size(), 12u);
    const auto again = split_grouped(s, 0.8, 42);
    EXPECT_EQ(again.val[0].provenance.patient_id, sp.val[0].provenance.patient_id);
}

TEST(Split, GroupsNeverStraddle)
{
    // two scans per patient; grouping is by patient
    std::vector<SliceSample> s;
    for (int p = 0; p < 7; ++p)
        for (int sc = 0; sc < 2; ++sc)
            for (std::size_t z = 0; z < 2; ++z) {
                SliceSample x;
                x.provenance = {"ds", "p" + std::to_string(p), "p" + std::to_string(p) + "s" + std::to_string(sc), z};
                s.push_back(x);
            }
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto sp = split_grouped(s, 0.8, seed);
        std::set<std::string> tr;
        for (const auto& x : sp.train) tr.insert(x.provenance.patient_id);
        for (const auto& x : sp.val) ASSERT_FALSE(tr.contains(x.provenance.patient_id)) << seed;
        ASSERT_EQ(tr.size(), 6u);  // ceil(0.8 * 7)
        ASSERT_EQ(sp.train.size() + sp.val.size(), s.size());
    }
}

TEST(Split, FallsBackToScanAndRejectsOneGroup)
{
    auto s = disk_set(2, 1, 4, 8);
    EXPECT_THROW(split_grouped(s, 0.8, 1), ValidationError);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i].provenance.patient_id.clear();
        s[i].provenance.scan_id = "scan" + std::to_string(i % 2);
    }
    const auto sp = split_grouped(s, 0.5, 1);
    EXPECT_EQ(sp.train.size(), 2u);
    EXPECT_EQ(sp.val.size(), 2u);
}

TEST(Train, DeterministicAndEpochOne)
{
    const auto s = disk_set(3, 4, 2, 16);
    const auto a = train<float>(s, small_config(3));
    const auto b = train<float>(s, small_config(3));
    EXPECT_EQ(a.params.values, b.params.values);
    EXPECT_EQ(a.log.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);

    const auto one = train<float>(s, small_config(1));
    EXPECT_EQ(one.best_epoch, 1u);
    // the same run stopped after one epoch matches the first epoch of a longer one
    EXPECT_EQ(one.log[0].train_loss, a.log[0].train_loss);
    EXPECT_EQ(one.log[0].val_dice, a.log[0].val_dice);
}

TEST(Train, SelectsBestEpochAndLearns)
{
    const auto s = disk_set(4, 4, 4, 16);
    auto cfg = small_config(30);
    cfg.batch_size = 1;
    const auto r = train<float>(s, s, cfg);
    double best = -1;
    std::size_t at = 0;
    for (const auto& e : r.log)
        if (e.val_dice > best) {
            best = e.val_dice;
            at = e.epoch;
        }
    EXPECT_EQ(r.best_epoch, at);
    EXPECT_EQ(r.best_val_dice, best);
    EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
    const double d = mean_scan_dice(score_by_scan(s, predict(r.params, s, 0.5)));
    EXPECT_EQ(d, best);
    EXPECT_GT(d, 0.5);
}

TEST(Train, Errors)
{
    auto cfg = small_config(1);
    const auto s = disk_set(5, 2, 1, 16);
    EXPECT_THROW(train<float>(s, std::vector<SliceSample>{}, cfg), ValidationError);
    cfg.pos_weight = 1.0;
    EXPECT_THROW(train<float>(s, cfg), ValidationError);
    cfg = small_config(0);
    EXPECT_THROW(train<float>(s, cfg), ValidationError);
}

TEST(Predict, ThresholdMonotone)
{
    const auto p = init_params<float>(topo(SkipKind::nested_dense, 2, 3), 8);
    const auto s = disk_set(6, 2, 2, 16);
    std::vector<std::size_t> prev(s.size(), SIZE_MAX);
    for (double t : {0.0, 0.3, 0.45, 0.5, 0.55, 0.7, 1.0 + 1e-9}) {
        const auto m = predict(p, s, t);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const auto n = static_cast<std::size_t>(std::count(m[i].data.begin(), m[i].data.end(), 1));
            ASSERT_LE(n, prev[i]);
            prev[i] = n;
            if (t > 1.0) {
                ASSERT_EQ(n, 0u);
            }
            if (t == 0.0) {
                ASSERT_EQ(n, m[i].data.size());
            }
        }
    }
}

TEST(Checkpoint, RoundTrip)
{
    msgen::testing::TempDir dir;
    const auto p = init_params<float>(topo(SkipKind::plain_skip, 3, 2), 17);
    CheckpointMeta meta;
    meta.config = small_config(4);
    meta.epoch = 3;
    meta.val_dice = 0.25;
    save_checkpoint(dir.path() / "m.json", p, meta);
    const auto [q, m2] = load_checkpoint(dir.path() / "m.json");
    EXPECT_EQ(q.values, p.values);
    EXPECT_EQ(q.network.topology(), p.network.topology());
    EXPECT_EQ(m2.epoch, 3u);
    EXPECT_EQ(m2.config.epochs, 4u);
    std::filesystem::resize_file(dir.path() / "m.json.bin", 8);
    EXPECT_THROW(load_checkpoint(dir.path() / "m.json"), DataError);
    EXPECT_THROW(load_checkpoint(dir.path() / "missing.json"), DataError);
}

TEST(Config, JsonRoundTripAndValidation)
{
    auto c = small_config(7);
    c.topology.kind = SkipKind::plain_skip;
    const auto back = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_THROW(train_config_from_json({{"split_ratio", 1.0}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"betas", {0.9}}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"topology", {{"kind", "resnet"}}}}), ValidationError);
}

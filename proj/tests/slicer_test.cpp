#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "msgen/rng.hpp"
#include "msgen/slicer.hpp"
#include "test_util.hpp"

using namespace msgen;

namespace {

Image2D random_image(Rng& rng, std::size_t r, std::size_t c)
{
    Image2D img(r, c);
    for (auto& x : img.data) x = static_cast<float>(rng.uniform(0, 10));
    return img;
}

Mask2D random_mask(Rng& rng, std::size_t r, std::size_t c)
{
    Mask2D m(r, c);
    for (auto& x : m.data) x = rng.uniform() < 0.3 ? 1 : 0;
    return m;
}

} // namespace

TEST(ResizeBilinear, ConstantStaysConstant)
{
    for (auto [r, c] : {std::pair<std::size_t, std::size_t>{1, 1}, {3, 7}, {224, 100}, {500, 300}}) {
        const auto out = resize_bilinear(Image2D(r, c, 7.0f));
        ASSERT_EQ(out.rows, 224u);
        ASSERT_EQ(out.cols, 224u);
        for (float x : out.data) ASSERT_EQ(x, 7.0f);
    }
}

TEST(ResizeBilinear, TwoByTwoRamp)
{
    Image2D img(2, 2);
    img.data = {0, 1, 0, 1};
    const auto out = resize_bilinear(img, 4, 4);
    // sample centers (i + 0.5) * 2/4 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
    const std::vector<float> row = {0.0f, 0.25f, 0.75f, 1.0f};
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_FLOAT_EQ(out(r, c), row[c]) << r << "," << c;
}

TEST(ResizeBilinear, BoundedByInputRange)
{
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto img = random_image(rng, 1 + rng.below(40), 1 + rng.below(40));
        const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
        const auto out = resize_bilinear(img, 1 + rng.below(60), 1 + rng.below(60));
        for (float x : out.data) {
            ASSERT_GE(x, *lo - 1e-5f);
            ASSERT_LE(x, *hi + 1e-5f);
        }
    }
}

TEST(ResizeBilinear, IdentityAtTargetSize)
{
    Rng rng(5);
    const auto img = random_image(rng, 224, 224);
    EXPECT_EQ(resize_bilinear(img), img);
    EXPECT_THROW(resize_bilinear(Image2D{}), ValidationError);
}

TEST(ResizeBilinear, DownsampleByTwoAveragesPairs)
{
    // centers land at 0.5, 2.5, ...: exactly the mean of each pixel pair
    Image2D img(1, 8);
    img.data = {0, 2, 4, 6, 8, 10, 12, 14};
    const auto out = resize_bilinear(img, 1, 4);
    EXPECT_EQ(out.data, (std::vector<float>{1, 5, 9, 13}));
}

TEST(ResizeNearest, AllOnesAndBinary)
{
    EXPECT_EQ(resize_nearest(Mask2D(13, 17, 1)), Mask2D(224, 224, 1));
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto out = resize_nearest(random_mask(rng, 1 + rng.below(50), 1 + rng.below(50)));
        for (auto x : out.data) ASSERT_TRUE(x == 0 || x == 1);
    }
}

TEST(ResizeNearest, IdentityAndUpscale)
{
    Rng rng(9);
    const auto m = random_mask(rng, 224, 224);
    EXPECT_EQ(resize_nearest(m), m);
    Mask2D small(2, 2);
    small.data = {1, 0, 0, 1};
    const auto up = resize_nearest(small, 4, 4);
    const std::vector<std::uint8_t> expect = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1};
    EXPECT_EQ(up.data, expect);
}

TEST(ExtractSlices, OneNonzeroPlane)
{
    Volume v({5, 4, 6}, {1, 1, 1});
    LabelVolume m({5, 4, 6}, {1, 1, 1});
    v.provenance = {"ds", "p1", "s1", "FLAIR", ""};
    v.at(2, 1, 3) = 1.5f;
    m.labels[m.index(2, 1, 3)] = 1;
    const auto s = extract_slices(v, m, 1, 8);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].provenance.z_index, 3u);
    EXPECT_EQ(s[0].provenance.scan_id, "s1");
    EXPECT_EQ(s[0].provenance.patient_id, "p1");
    EXPECT_EQ(s[0].provenance.dataset_id, "ds");
    EXPECT_EQ(s[0].image.rows, 8u);
    EXPECT_EQ(s[0].lesion_pixels, static_cast<std::size_t>(std::count(s[0].mask.data.begin(), s[0].mask.data.end(), 1)));
    EXPECT_GT(s[0].lesion_pixels, 0u);
}

TEST(ExtractSlices, AllZeroVolumeIsEmpty)
{
    Volume v({4, 4, 4}, {1, 1, 1});
    LabelVolume m({4, 4, 4}, {1, 1, 1});
    EXPECT_TRUE(extract_slices(v, m).empty());
}

TEST(ExtractSlices, IdentityAtNativeSide)
{
    Rng rng(2);
    Volume v({16, 16, 3}, {1, 1, 1});
    LabelVolume m({16, 16, 3}, {1, 1, 1});
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(0.1, 1));
    for (auto& x : m.labels) x = rng.uniform() < 0.5;
    const auto s = extract_slices(v, m, 1, 16);
    ASSERT_EQ(s.size(), 3u);
    for (const auto& sl : s)
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) {
                ASSERT_EQ(sl.image(y, x), v.at(x, y, sl.provenance.z_index));
                ASSERT_EQ(sl.mask(y, x), m.at(x, y, sl.provenance.z_index));
            }
}

TEST(ExtractSlices, MinBrainVoxelsThreshold)
{
    Volume v({4, 4, 3}, {1, 1, 1});
    LabelVolume m({4, 4, 3}, {1, 1, 1});
    v.at(0, 0, 0) = 1;
    v.at(0, 0, 1) = 1;
    v.at(1, 0, 1) = 1;
    v.at(0, 0, 2) = 1;
    v.at(1, 0, 2) = 1;
    v.at(2, 0, 2) = 1;
    EXPECT_EQ(extract_slices(v, m, 1, 4).size(), 3u);
    const auto two = extract_slices(v, m, 2, 4);
    ASSERT_EQ(two.size(), 2u);
    EXPECT_EQ(two[0].provenance.z_index, 1u);
    EXPECT_EQ(extract_slices(v, m, 4, 4).size(), 0u);
    // 0 behaves as 1: an empty plane is never brain
    EXPECT_EQ(extract_slices(v, m, 0, 4).size(), 3u);
}

TEST(ExtractSlices, DeterministicAndPairChecked)
{
    Rng rng(11);
    Volume v({7, 9, 5}, {1, 1, 1});
    LabelVolume m({7, 9, 5}, {1, 1, 1});
    for (auto& x : v.voxels) x = rng.uniform() < 0.5 ? 0.0f : static_cast<float>(rng.uniform());
    const auto a = extract_slices(v, m, 1, 32), b = extract_slices(v, m, 1, 32);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].mask, b[i].mask);
    }
    LabelVolume wrong({7, 9, 4}, {1, 1, 1});
    EXPECT_THROW(extract_slices(v, wrong), ValidationError);
}

TEST(SliceCache, RoundTrip)
{
    msgen::testing::TempDir dir;
    Rng rng(12);
    Volume v({10, 12, 4}, {1, 1, 1});
    LabelVolume m({10, 12, 4}, {1, 1, 1});
    v.provenance = {"dsA", "pat", "scan7", "FLAIR", ""};
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(0.01, 3));
    for (auto& x : m.labels) x = rng.uniform() < 0.2;
    const auto slices = extract_slices(v, m, 1, 13);
    write_slice_cache(dir / "c.bin", slices);
    const auto back = read_slice_cache(dir / "c.bin");
    ASSERT_EQ(back.size(), slices.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].image, slices[i].image);
        EXPECT_EQ(back[i].mask, slices[i].mask);
        EXPECT_EQ(back[i].provenance.z_index, slices[i].provenance.z_index);
        EXPECT_EQ(back[i].provenance.scan_id, "scan7");
        EXPECT_EQ(back[i].provenance.dataset_id, "dsA");
        EXPECT_EQ(back[i].lesion_pixels, slices[i].lesion_pixels);
    }
    EXPECT_THROW(read_slice_cache(dir / "missing.bin"), DataError);
}

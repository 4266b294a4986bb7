#include "volrep/tokenizer.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>

using namespace volrep::tokens;
using volrep::cohort::VoxelVolume;

namespace {

VoxelVolume ramp(Shape3 s) {
  VoxelVolume v;
  v.shape = s;
  v.data.resize(s.size());
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>((i % 997) / 997.0);
  return v;
}

SubvolumeToken random_token(Shape3 s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  SubvolumeToken t;
  t.shape = s;
  t.voxels.resize(s.size());
  for (auto& x : t.voxels) x = u(rng);
  return t;
}

}  // namespace

TEST(Tokenizer, TilingCounts) {
  EXPECT_EQ(patch_volume(ramp({64, 64, 16}), {}).tokens.size(), 16u);
  const auto padded = patch_volume(ramp({65, 64, 16}), {});
  EXPECT_EQ(padded.tokens.size(), 24u);
  EXPECT_EQ(padded.padded, (Shape3{96, 64, 16}));
  // the pad region is zero
  const auto vol = reassemble(padded);
  for (int i = 65; i < 96; ++i) {
    for (int j = 0; j < 64; ++j) {
      for (int k = 0; k < 16; ++k) ASSERT_EQ(vol.at(i, j, k), 0.0f);
    }
  }
  EXPECT_THROW(patch_volume(ramp({16, 64, 64}), {{32, 32, 4}, PadMode::crop}), TokenizeError);
  EXPECT_EQ(patch_volume(ramp({70, 64, 17}), {{32, 32, 4}, PadMode::crop}).tokens.size(), 16u);
}

TEST(Tokenizer, ReassembleIsExact) {
  const auto v = ramp({65, 40, 9});
  const auto back = reassemble(patch_volume(v, {{32, 32, 4}, PadMode::zero_pad}));
  for (int i = 0; i < back.shape.d0; ++i) {
    for (int j = 0; j < back.shape.d1; ++j) {
      for (int k = 0; k < back.shape.d2; ++k) {
        const float expected = (i < 65 && j < 40 && k < 9) ? v.at(i, j, k) : 0.0f;
        ASSERT_EQ(back.at(i, j, k), expected);
      }
    }
  }
  // tiles are disjoint and cover the grid
  const auto grid = patch_volume(v, {});
  std::set<std::array<int, 3>> seen;
  for (const auto& t : grid.tokens) EXPECT_TRUE(seen.insert(t.grid_pos).second);
  EXPECT_EQ(seen.size(), grid.extents.size());
}

TEST(Tokenizer, BackgroundFilter) {
  SubvolumeToken zero;
  zero.shape = {32, 32, 4};
  zero.voxels.assign(zero.shape.size(), 0.0f);
  auto bright = random_token({32, 32, 4}, 1);
  std::vector<SubvolumeToken> both{zero, bright};
  EXPECT_EQ(filter_background(both, {1e-9, BackgroundStatistic::mean}).size(), 1u);
  EXPECT_EQ(filter_background(both, {1e-9, BackgroundStatistic::max}).size(), 1u);
  EXPECT_EQ(filter_background(both, {0.0, BackgroundStatistic::mean}).size(), 2u);
  EXPECT_THROW(filter_background(both, {1.5, BackgroundStatistic::mean}), TokenizeError);

  // monotone in the threshold
  const auto grid = patch_volume(ramp({64, 64, 16}), {});
  std::size_t previous = grid.tokens.size() + 1;
  for (double th : {0.0, 0.3, 0.45, 0.5, 0.55, 0.9}) {
    const auto kept = filter_background(grid.tokens, {th, BackgroundStatistic::mean});
    EXPECT_LE(kept.size(), previous);
    previous = kept.size();
  }
}

TEST(Tokenizer, LesionVoxelsStayInKeptTokens) {
  volrep::cohort::CohortConfig cfg;
  cfg.n_studies = 12;
  const auto studies = volrep::cohort::generate_studies(cfg, 5);
  // lesions near the skull can reach a mostly-air corner token that the
  // filter drops; that must stay rare
  std::size_t lesion_voxels = 0, dropped = 0;
  for (const auto& st : studies) {
    for (const auto& seq : st.sequences) {
      const auto kept = tokenize_sequence(seq, {}, {});
      std::set<std::array<int, 3>> kept_pos;
      for (const auto& t : kept) kept_pos.insert(t.grid_pos);
      const Shape3 p = native_patch({32, 32, 4}, seq.meta.plane);
      const auto& s = seq.volume.shape;
      for (int i = 0; i < s.d0; ++i) {
        for (int j = 0; j < s.d1; ++j) {
          for (int k = 0; k < s.d2; ++k) {
            if (!seq.lesion_mask[seq.volume.index(i, j, k)]) continue;
            ++lesion_voxels;
            if (!kept_pos.count({i / p.d0, j / p.d1, k / p.d2})) ++dropped;
          }
        }
      }
    }
  }
  EXPECT_GT(lesion_voxels, 0u);
  EXPECT_LE(static_cast<double>(dropped), 0.01 * static_cast<double>(lesion_voxels));
}

TEST(Tokenizer, PermutationsAreAGroupAction) {
  const auto t = random_token({32, 32, 4}, 3);
  EXPECT_EQ(permute_token_axes(t, {1, 2, 3}), t);
  const auto p = permute_token_axes(t, {3, 1, 2});
  EXPECT_EQ(p.shape, (Shape3{4, 32, 32}));
  EXPECT_EQ(p.at(2, 5, 7), t.at(5, 7, 2));
  for (const auto& a : all_axis_orders()) {
    EXPECT_EQ(permute_token_axes(permute_token_axes(t, a), inverse(a)), t);
    for (const auto& b : all_axis_orders()) {
      EXPECT_EQ(permute_token_axes(permute_token_axes(t, a), b), permute_token_axes(t, compose(a, b)));
    }
  }
  EXPECT_THROW(permute_token_axes(t, {1, 1, 2}), TokenizeError);
  EXPECT_THROW(permute_token_axes(t, {0, 1, 2}), TokenizeError);
}

TEST(Tokenizer, CanonicalOrderMovesThinAxisLast) {
  for (const auto& o : all_axis_orders()) {
    const Shape3 s = permute_shape({32, 32, 4}, o);
    EXPECT_EQ(permute_shape(s, canonical_order(s)), (Shape3{32, 32, 4}));
  }
  EXPECT_EQ(canonical_order({32, 4, 32}), (AxisOrder{1, 3, 2}));
  EXPECT_EQ(canonical_order({4, 32, 32}), (AxisOrder{2, 3, 1}));
}

TEST(Tokenizer, BucketsAndSampling) {
  const auto buckets = bucket_shapes({32, 32, 4});
  ASSERT_EQ(buckets.size(), 3u);
  EXPECT_EQ(buckets[0], (Shape3{4, 32, 32}));
  EXPECT_EQ(buckets[1], (Shape3{32, 4, 32}));
  EXPECT_EQ(buckets[2], (Shape3{32, 32, 4}));
  for (const auto& o : all_axis_orders()) EXPECT_NO_THROW(bucket_index(buckets, permute_shape({32, 32, 4}, o)));

  volrep::cohort::CohortConfig cfg;
  cfg.n_studies = 30;
  const auto studies = volrep::cohort::generate_studies(cfg, 9);
  std::vector<volrep::cohort::Sequence> axial, mixed;
  std::set<Plane> planes;
  for (const auto& st : studies) {
    for (const auto& q : st.sequences) {
      if (q.meta.plane == Plane::axial && axial.size() < 3) axial.push_back(q);
      if (!planes.count(q.meta.plane)) {
        planes.insert(q.meta.plane);
        mixed.push_back(q);
      }
    }
  }
  ASSERT_EQ(mixed.size(), 3u);
  const auto ax = bucket_and_sample(axial, {}, {}, 1);
  EXPECT_TRUE(ax.buckets[0].empty());
  EXPECT_TRUE(ax.buckets[1].empty());
  EXPECT_FALSE(ax.buckets[2].empty());

  const auto a = bucket_and_sample(mixed, {}, {}, 42), b = bucket_and_sample(mixed, {}, {}, 42);
  EXPECT_EQ(a.selected_bucket, b.selected_bucket);
  EXPECT_EQ(a.permutation, b.permutation);
  EXPECT_EQ(a.tokens, b.tokens);
  for (const auto& t : a.tokens) EXPECT_EQ(t.shape, permute_shape(buckets[static_cast<std::size_t>(a.selected_bucket)], a.permutation));

  std::map<int, int> freq;
  for (std::uint64_t s = 0; s < 600; ++s) ++freq[bucket_and_sample(mixed, {}, {}, s).selected_bucket];
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(freq[k] / 600.0, 1.0 / 3.0, 0.06) << k;

  volrep::cohort::Sequence blank = mixed[0];
  std::fill(blank.volume.data.begin(), blank.volume.data.end(), 0.0f);
  EXPECT_THROW(bucket_and_sample({blank}, {}, {}, 1), TokenizeError);
  EXPECT_THROW(bucket_and_sample({}, {}, {}, 1), TokenizeError);
}

TEST(Tokenizer, SinusoidalEncoding) {
  const Shape3 ext{2, 2, 4};
  const auto origin = sinusoidal_encode({0, 0, 0}, ext, 48);
  for (std::size_t i = 0; i < origin.size(); ++i) EXPECT_DOUBLE_EQ(origin[i], i % 2 == 0 ? 0.0 : 1.0);
  EXPECT_EQ(sinusoidal_encode({1, 0, 3}, ext, 48), sinusoidal_encode({1, 0, 3}, ext, 48));
  // closed form for one entry: axis 2, pair 1 -> sin(3 / 10000^(2/16))
  EXPECT_DOUBLE_EQ(sinusoidal_encode({1, 0, 3}, ext, 48)[32 + 2], std::sin(3.0 / std::pow(10000.0, 2.0 / 16.0)));
  std::vector<std::vector<double>> all;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 4; ++k) all.push_back(sinusoidal_encode({i, j, k}, ext, 48));
  ASSERT_EQ(all.size(), 16u);
  for (std::size_t a = 0; a < all.size(); ++a) {
    for (std::size_t b = a + 1; b < all.size(); ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < all[a].size(); ++c) d += std::abs(all[a][c] - all[b][c]);
      EXPECT_GT(d, 1e-6);
    }
  }
  EXPECT_THROW(sinusoidal_encode({2, 0, 0}, ext, 48), TokenizeError);
  EXPECT_THROW(sinusoidal_encode({0, 0, 0}, ext, 50), TokenizeError);
}

TEST(Tokenizer, LearnedEncodingInjectiveAtInit) {
  std::mt19937_64 rng(4);
  LearnedPositional lp(48, 4, rng);
  const Shape3 ext{2, 2, 4};
  PositionalEncoding enc{48, PositionalScheme::learned_3d};
  std::set<std::vector<double>> seen;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 4; ++k) {
        const auto v = positional_encode({i, j, k}, ext, enc, &lp);
        EXPECT_EQ(v, positional_encode({i, j, k}, ext, enc, &lp));
        seen.insert(v);
      }
  EXPECT_EQ(seen.size(), 16u);
  EXPECT_THROW(positional_encode({0, 0, 0}, ext, enc), TokenizeError);
}

TEST(Tokenizer, DumpRoundTrip) {
  volrep::cohort::CohortConfig cfg;
  cfg.n_studies = 3;
  const auto studies = volrep::cohort::generate_studies(cfg, 2);
  const auto dump = tokenize_cohort(studies, {}, {});
  ASSERT_FALSE(dump.tokens.empty());
  const auto dir = std::filesystem::temp_directory_path() / "volrep_test_tokens";
  std::filesystem::remove_all(dir);
  write_token_dump(dump, dir);
  const auto back = read_token_dump(dir);
  ASSERT_EQ(back.tokens.size(), dump.tokens.size());
  for (std::size_t i = 0; i < back.tokens.size(); ++i) {
    EXPECT_EQ(back.tokens[i], dump.tokens[i]);
    EXPECT_EQ(back.refs[i].study_id, dump.refs[i].study_id);
    EXPECT_EQ(back.refs[i].extents, dump.refs[i].extents);
  }
  EXPECT_EQ(parse_patch("32,32,4").dims, (Shape3{32, 32, 4}));
  EXPECT_THROW(parse_patch("32,32"), TokenizeError);
}

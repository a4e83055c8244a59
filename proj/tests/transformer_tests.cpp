#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mtnas/finite_diff.hpp"
#include "mtnas/transformer.hpp"

using namespace mtnas;
namespace o = ops;

namespace {

Tensor rand_t(Shape shape, Rng& rng, bool rg = false, double s = 0.3) {
  std::uniform_real_distribution<double> d(-s, s);
  Array a(shape_size(shape));
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = d(rng);
  return Tensor::from(std::move(shape), std::move(a), rg);
}

BlockWeights make_block(int e, int hidden, Rng& rng) {
  BlockWeights w;
  w.qkv_w = rand_t({3 * e, e}, rng, true);
  w.qkv_b = rand_t({3 * e}, rng, true);
  w.proj_w = rand_t({e, e}, rng, true);
  w.proj_b = rand_t({e}, rng, true);
  w.ffn1_w = rand_t({hidden, e}, rng, true);
  w.ffn1_b = rand_t({hidden}, rng, true);
  w.ffn2_w = rand_t({e, hidden}, rng, true);
  w.ffn2_b = rand_t({e}, rng, true);
  w.ln1_g = Tensor::constant({e}, 1.0, true);
  w.ln1_b = Tensor::zeros({e}, true);
  w.ln2_g = Tensor::constant({e}, 1.0, true);
  w.ln2_b = Tensor::zeros({e}, true);
  return w;
}

}  // namespace

TEST_CASE("patch embed shape and divisibility") {
  Rng rng(1);
  Tensor img = rand_t({8, 8, 1}, rng);
  Tensor w = rand_t({5, 16}, rng);
  Tensor b = rand_t({5}, rng);
  Tensor tokens = patch_embed(img, w, b, 4);
  CHECK(tokens.shape() == Shape{2, 2, 5});
  CHECK_THROWS_AS(patch_embed(rand_t({9, 8, 1}, rng), w, b, 4), ShapeError);
}

TEST_CASE("patch embed is a linear map on each patch") {
  Rng rng(2);
  Tensor w = rand_t({3, 16}, rng);
  Tensor b = rand_t({3}, rng);
  Tensor img = rand_t({4, 4, 1}, rng);
  Tensor tokens = patch_embed(img, w, b, 4);
  // Single patch: output = W * flat(img) + b, row-major pixel order.
  for (int ochan = 0; ochan < 3; ++ochan) {
    double expect = b.value()[ochan];
    for (int i = 0; i < 16; ++i) expect += w.value()[ochan * 16 + i] * img.value()[i];
    CHECK(tokens.value()[ochan] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("wsa block shapes, clipping and head divisibility") {
  Rng rng(3);
  BlockWeights w = make_block(4, 8, rng);
  Tensor x = rand_t({4, 4, 4}, rng);
  CHECK(wsa_block(x, w, 2, 2).shape() == Shape{4, 4, 4});
  // Window larger than the side is clipped rather than rejected.
  CHECK(wsa_block(x, w, 2, 8).shape() == Shape{4, 4, 4});
  CHECK_THROWS_AS(wsa_block(x, w, 3, 2), ConfigError);
}

TEST_CASE("window locality: distant pixels do not interact") {
  Rng rng(4);
  BlockWeights w = make_block(2, 4, rng);
  Tensor a = rand_t({4, 4, 2}, rng);
  Tensor out_a = wsa_block(a, w, 1, 2);
  // Perturb a pixel in the bottom-right window; top-left window output
  // must be bit-identical (non-overlapping windows, no cross-talk).
  Array v = a.value();
  v[(3 * 4 + 3) * 2] += 0.5;
  Tensor b = Tensor::from({4, 4, 2}, std::move(v));
  Tensor out_b = wsa_block(b, w, 1, 2);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) {
      for (int c = 0; c < 2; ++c) {
        int i = (y * 4 + x) * 2 + c;
        CHECK(out_a.value()[i] == out_b.value()[i]);
      }
    }
  }
}

TEST_CASE("full wsa block passes finite differences") {
  Rng rng(5);
  BlockWeights w = make_block(4, 8, rng);
  auto run = [&](const Tensor& x) { return o::sum_all(o::mul(wsa_block(x, w, 2, 2), x)); };
  CHECK(finite_diff_check(run, rand_t({4, 4, 4}, rng, true), 1e-5) < 1e-4);

  // Padded-window path (win does not divide the side).
  Tensor x3 = rand_t({3, 3, 4}, rng);
  auto run_w = [&](const Tensor& qkv) {
    BlockWeights w2 = w;
    w2.qkv_w = qkv;
    return o::sum_all(o::mul(wsa_block(x3, w2, 2, 2), x3));
  };
  CHECK(finite_diff_check(run_w, rand_t({12, 4}, rng, true), 1e-5) < 1e-4);

  Tensor x2 = rand_t({2, 2, 4}, rng);
  auto run_ffn = [&](const Tensor& f1) {
    BlockWeights w2 = w;
    w2.ffn1_w = f1;
    return o::sum_all(o::mul(wsa_block(x2, w2, 2, 2), x2));
  };
  CHECK(finite_diff_check(run_ffn, rand_t({8, 4}, rng, true), 1e-5) < 1e-4);
}

TEST_CASE("patch merge and upsample shapes and gradients") {
  Rng rng(6);
  Tensor x = rand_t({4, 4, 3}, rng);
  Tensor wm = rand_t({5, 12}, rng);
  Tensor bm = rand_t({5}, rng);
  CHECK(patch_merge(x, wm, bm).shape() == Shape{2, 2, 5});
  CHECK_THROWS_AS(patch_merge(rand_t({3, 3, 2}, rng), wm, bm), ShapeError);

  Tensor wu = rand_t({2, 3}, rng);
  Tensor bu = rand_t({2}, rng);
  CHECK(upsample(x, wu, bu).shape() == Shape{8, 8, 2});

  CHECK(finite_diff_check(
            [&](const Tensor& t) { return o::sum_all(o::mul(patch_merge(t, wm, bm),
                                                            patch_merge(t, wm, bm))); },
            rand_t({4, 4, 3}, rng, true), 1e-5) < 1e-4);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return o::sum_all(o::mul(upsample(t, wu, bu),
                                                            upsample(t, wu, bu))); },
            rand_t({4, 4, 3}, rng, true), 1e-5) < 1e-4);
}

TEST_CASE("dense head sums projected levels at full resolution") {
  Rng rng(7);
  std::map<int, std::pair<Tensor, Tensor>> proj;
  proj[1] = {rand_t({2, 3}, rng), rand_t({2}, rng)};
  proj[2] = {rand_t({2, 4}, rng), rand_t({2}, rng)};
  Tensor f1 = rand_t({8, 8, 3}, rng);
  Tensor f2 = rand_t({4, 4, 4}, rng);
  Tensor out = dense_head({{1, f1}, {2, f2}}, proj, 16);
  CHECK(out.shape() == Shape{16, 16, 2});

  Tensor only1 = dense_head({{1, f1}}, proj, 16);
  Tensor only2 = dense_head({{2, f2}}, proj, 16);
  for (int i = 0; i < out.size(); ++i) {
    CHECK(out.value()[i] == doctest::Approx(only1.value()[i] + only2.value()[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(dense_head({}, proj, 16), ArgumentError);
  CHECK_THROWS_AS(dense_head({{1, rand_t({3, 3, 3}, rng)}}, proj, 16), ConfigError);
}

TEST_CASE("point head pools globally and classifies") {
  Rng rng(8);
  std::map<int, std::pair<Tensor, Tensor>> proj;
  proj[4] = {rand_t({6, 3}, rng), rand_t({6}, rng)};
  Tensor w2 = rand_t({4, 6}, rng);
  Tensor b2 = rand_t({4}, rng);
  Tensor f = rand_t({2, 2, 3}, rng);
  Tensor out = point_head({{4, f}}, proj, w2, b2);
  CHECK(out.shape() == Shape{1, 4});

  // Spatial permutation invariance under global average pooling.
  Array v = f.value();
  std::swap(v[0], v[3 * 3]);
  std::swap(v[1], v[3 * 3 + 1]);
  std::swap(v[2], v[3 * 3 + 2]);
  Tensor g = Tensor::from({2, 2, 3}, std::move(v));
  Tensor out2 = point_head({{4, g}}, proj, w2, b2);
  for (int i = 0; i < 4; ++i) {
    CHECK(out.value()[i] == doctest::Approx(out2.value()[i]).epsilon(1e-12));
  }
}

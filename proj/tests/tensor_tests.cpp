#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mtnas/finite_diff.hpp"
#include "mtnas/ops.hpp"

using namespace mtnas;
namespace o = ops;

namespace {

using Rng = std::mt19937_64;

Tensor fromv(Shape shape, std::vector<double> v, bool requires_grad = false) {
  return Tensor::from(std::move(shape), v, requires_grad);
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Array a(shape_size(shape));
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = d(rng);
  return Tensor::from(std::move(shape), std::move(a), requires_grad);
}

constexpr double kGradTol = 1e-4;
constexpr double kH = 1e-5;

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t = fromv({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.size() == 6);
  CHECK(t.value()[4] == 5);
  CHECK_THROWS_AS(fromv({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::scalar(std::nan("")), NumericsError);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor::scalar(7.0).item() == 7.0);
}

TEST_CASE("backward basics and state errors") {
  Tensor x = fromv({2}, {3.0, 4.0}, true);
  Tensor loss = o::sum_all(o::mul(x, x));
  backward(loss);
  CHECK(loss.item() == doctest::Approx(25.0));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(8.0));
  CHECK_THROWS_AS(backward(loss), StateError);

  // Gradients accumulate across separate backward calls.
  Tensor loss2 = o::sum_all(x);
  backward(loss2);
  CHECK(x.grad()[0] == doctest::Approx(7.0));

  Tensor vec = fromv({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(vec), ShapeError);
}

TEST_CASE("no-grad guard suppresses graph recording") {
  Tensor x = fromv({2}, {1.0, 2.0}, true);
  autograd::NoGradGuard guard;
  Tensor y = o::scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("non-finite op output raises NumericsError") {
  Tensor x = fromv({1}, {0.0}, true);
  CHECK_THROWS_AS(o::log(x), NumericsError);
}

TEST_CASE("elementwise gradients") {
  Rng rng(7);
  auto sum_of = [](Tensor t) { return o::sum_all(t); };
  Tensor b = random_tensor({3}, rng, false);
  CHECK(finite_diff_check([&](const Tensor& x) { return o::sum_all(o::mul(o::add(x, b), x)); },
                          random_tensor({2, 3}, rng), kH) < kGradTol);
  CHECK(finite_diff_check([&](const Tensor& x) { return o::sum_all(o::sub(o::scale(x, 3.0), x)); },
                          random_tensor({4}, rng), kH) < kGradTol);
  CHECK(finite_diff_check([&](const Tensor& x) { return o::sum_all(o::gelu(x)); },
                          random_tensor({10}, rng, true, -2, 2), kH) < kGradTol);
  CHECK(finite_diff_check([&](const Tensor& x) { return o::sum_all(o::exp(x)); },
                          random_tensor({5}, rng), kH) < kGradTol);
  CHECK(finite_diff_check([&](const Tensor& x) { return o::sum_all(o::log(x)); },
                          random_tensor({5}, rng, true, 0.5, 2.0), kH) < kGradTol);
  (void)sum_of;
}

TEST_CASE("broadcast add gradient reaches the vector") {
  Rng rng(8);
  Tensor a = random_tensor({3, 4}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& b) { return o::sum_all(o::mul(o::add(a, b), o::add(a, b))); },
            random_tensor({4}, rng), kH) < kGradTol);
}

TEST_CASE("matmul and linear gradients") {
  Rng rng(9);
  Tensor b2 = random_tensor({3, 4, 2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::matmul(x, b2)); },
            random_tensor({3, 2, 4}, rng), kH) < kGradTol);
  Tensor m = random_tensor({3, 2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::mul(o::matmul(m, x), o::matmul(m, x))); },
            random_tensor({2, 5}, rng), kH) < kGradTol);

  Tensor xin = random_tensor({4, 3}, rng, false);
  Tensor bias = random_tensor({2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& w) { return o::sum_all(o::gelu(o::linear(xin, w, bias))); },
            random_tensor({2, 3}, rng), kH) < kGradTol);
  CHECK_THROWS_AS(o::matmul(random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)), ShapeError);
}

TEST_CASE("softmax gradient and normalization") {
  Rng rng(10);
  Tensor x = random_tensor({3, 5}, rng, false);
  Tensor s = o::softmax(x, 1);
  for (int r = 0; r < 3; ++r) {
    double total = 0;
    for (int c = 0; c < 5; ++c) total += s.value()[r * 5 + c];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor w = random_tensor({3, 5}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return o::sum_all(o::mul(o::softmax(t, 1), w)); },
            random_tensor({3, 5}, rng), kH) < kGradTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return o::sum_all(o::mul(o::softmax(t, 0), w)); },
            random_tensor({3, 5}, rng), kH) < kGradTol);
}

TEST_CASE("layer_norm gradient") {
  Rng rng(11);
  Tensor g = random_tensor({6}, rng, false, 0.5, 1.5);
  Tensor b = random_tensor({6}, rng, false);
  Tensor w = random_tensor({4, 6}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::mul(o::layer_norm(x, g, b), w)); },
            random_tensor({4, 6}, rng), kH) < kGradTol);
  Tensor xin = random_tensor({4, 6}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& gg) { return o::sum_all(o::mul(o::layer_norm(xin, gg, b), w)); },
            random_tensor({6}, rng), kH) < kGradTol);
}

TEST_CASE("shape op gradients") {
  Rng rng(12);
  Tensor w = random_tensor({2, 3, 4}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) {
              return o::sum_all(o::mul(o::reshape(x, {2, 3, 4}), w));
            },
            random_tensor({24}, rng), kH) < kGradTol);
  CHECK(finite_diff_check(
            [&](const Tensor& x) {
              return o::sum_all(o::mul(o::transpose(x, {2, 0, 1}), w));
            },
            random_tensor({3, 4, 2}, rng), kH) < kGradTol);
  Tensor ws = random_tensor({2, 2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) {
              return o::sum_all(o::mul(o::slice(x, {1, 0}, {2, 2}), ws));
            },
            random_tensor({4, 3}, rng), kH) < kGradTol);
  Tensor other = random_tensor({2, 3}, rng, false);
  Tensor wc = random_tensor({4, 3}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) {
              return o::sum_all(o::mul(o::concat({x, other}, 0), wc));
            },
            random_tensor({2, 3}, rng), kH) < kGradTol);
}

TEST_CASE("transpose round-trips values") {
  Rng rng(13);
  Tensor x = random_tensor({2, 3, 4}, rng, false);
  Tensor y = o::transpose(o::transpose(x, {1, 2, 0}), {2, 0, 1});
  for (int i = 0; i < x.size(); ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("reduction gradients") {
  Rng rng(14);
  Tensor w = random_tensor({3}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::mul(o::sum(x, 1), w)); },
            random_tensor({3, 5}, rng), kH) < kGradTol);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::mean_all(o::mul(x, x)); },
            random_tensor({3, 5}, rng), kH) < kGradTol);
}

TEST_CASE("loss gradients and values") {
  Rng rng(15);
  std::vector<int> targets{1, 0, 2};
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::cross_entropy(x, targets); },
            random_tensor({3, 4}, rng), kH) < kGradTol);
  Tensor target = random_tensor({6}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::l1_loss(x, target); },
            random_tensor({6}, rng, true, 2.0, 3.0), kH) < kGradTol);

  Tensor perfect = fromv({3}, {1.0, 2.0, 3.0});
  CHECK(o::l1_loss(perfect, perfect).item() == 0.0);
  // Uniform logits: CE equals ln(C).
  Tensor logits = Tensor::zeros({2, 4});
  CHECK(o::cross_entropy(logits, {0, 3}).item() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("spatial kernels") {
  Rng rng(16);
  // window_partition/reverse round-trip, both divisible and padded.
  for (int side : {4, 6}) {
    Tensor x = random_tensor({side, side, 3}, rng, false);
    Tensor w = o::window_partition(x, 4);
    Tensor back = o::window_reverse(w, side, side, 4);
    for (int i = 0; i < x.size(); ++i) CHECK(back.value()[i] == x.value()[i]);
  }
  Tensor mask = o::window_pad_mask(6, 6, 4);
  CHECK(mask.defined());
  CHECK(mask.shape() == Shape{4, 16, 16});
  CHECK_FALSE(o::window_pad_mask(8, 8, 4).defined());

  Tensor wgt = random_tensor({4, 4, 2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::mul(o::nearest_upsample_2x(x), wgt)); },
            random_tensor({2, 2, 2}, rng), kH) < kGradTol);
  Tensor wp = random_tensor({2, 2, 2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::mul(o::avgpool_2x(x), wp)); },
            random_tensor({4, 4, 2}, rng), kH) < kGradTol);
  Tensor wg = random_tensor({3}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return o::sum_all(o::mul(o::global_avg_pool(x), wg)); },
            random_tensor({4, 4, 3}, rng), kH) < kGradTol);

  // Nearest upsample then avgpool is the identity.
  Tensor small = random_tensor({3, 3, 2}, rng, false);
  Tensor round = o::avgpool_2x(o::nearest_upsample_2x(small));
  for (int i = 0; i < small.size(); ++i) {
    CHECK(round.value()[i] == doctest::Approx(small.value()[i]).epsilon(1e-12));
  }

  Tensor wwin = random_tensor({4, 4, 2}, rng, false);
  CHECK(finite_diff_check(
            [&](const Tensor& x) {
              Tensor part = o::window_partition(x, 3);  // padded path
              return o::sum_all(o::mul(o::window_reverse(part, 4, 4, 3), wwin));
            },
            random_tensor({4, 4, 2}, rng), kH) < kGradTol);
}

TEST_CASE("finite_diff rejects bad step") {
  CHECK_THROWS_AS(finite_diff_check([](const Tensor& x) { return o::sum_all(x); },
                                    Tensor::zeros({2}, true), 0.0),
                  ArgumentError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "mtnas/ops.hpp"
#include "mtnas/supernet.hpp"
#include "mtnas/tasks.hpp"

using namespace mtnas;
namespace o = ops;

namespace {

std::map<TaskId, HeadShape> two_heads() {
  return {{1, HeadShape{true, 2, 0}}, {2, HeadShape{false, 4, 32}}};
}

Tensor random_image(Rng& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Array a(kImageSide * kImageSide);
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = d(rng);
  return Tensor::from({kImageSide, kImageSide, 1}, std::move(a));
}

// Independent parameter count: total elements of the weights a subnet
// actually carries, walked over the graph components.
long long slice_param_oracle(const Supernet& sn, const MultiTaskGraph& graph,
                             const CellConfig& cfg) {
  SubnetView v = slice(sn, cfg);
  long long total = 0;
  auto add = [&total](const Tensor& t) { total += t.size(); };
  for (const auto& [id, c] : graph.components) {
    switch (c.kind) {
      case ComponentKind::kPatchEmbed:
        add(v.patch_w);
        add(v.patch_b);
        break;
      case ComponentKind::kEncLayer:
      case ComponentKind::kDecLayer:
        for (const BlockWeights& b : v.blocks.at(c.layer)) {
          BlockWeights copy = b;
          for (Tensor* t : copy.tensors()) add(*t);
        }
        break;
      case ComponentKind::kPool:
        add(v.pools.at(c.layer.level).first);
        add(v.pools.at(c.layer.level).second);
        break;
      case ComponentKind::kUp:
        add(v.ups.at(c.layer).first);
        add(v.ups.at(c.layer).second);
        break;
      case ComponentKind::kHead: {
        const SubnetHead& h = v.heads.at(c.task);
        std::vector<LayerId> attach;
        auto it = graph.assignment.find(c.task);
        if (it != graph.assignment.end()) {
          attach = it->second.output_layers();
        } else {
          attach = all_layer_ids();
        }
        for (const LayerId& id2 : attach) {
          add(h.proj.at(id2).first);
          add(h.proj.at(id2).second);
        }
        if (h.w2.defined()) {
          add(h.w2);
          add(h.b2);
        }
        break;
      }
    }
  }
  return total;
}

}  // namespace

TEST_CASE("init shapes and validation") {
  Supernet sn = init_supernet(CellSpace::desk(), SkeletonMode::kSingle, two_heads(), 1);
  CHECK(sn.skeleton_logits.shape() == Shape{10, 2});
  CHECK((sn.skeleton_logits.value() == 0.0).all());
  CHECK(sn.task_order == std::vector<TaskId>{1, 2});
  CHECK(sn.layers.size() == 10);
  CHECK(sn.pools.size() == 3);
  CHECK(sn.ups.size() == 6);
  CHECK_FALSE(sn.parameters().empty());

  Supernet multi = init_supernet(CellSpace::desk(), SkeletonMode::kMulti, two_heads(), 1);
  CHECK(multi.skeleton_logits.shape() == Shape{24, 2});

  CellSpace bad = CellSpace::desk();
  bad.head_choices[0] = {3};  // 3 does not divide 8
  CHECK_THROWS_AS(init_supernet(bad, SkeletonMode::kSingle, two_heads(), 1), ConfigError);
}

TEST_CASE("sliced forward equals standalone copy forward") {
  Supernet sn = init_supernet(CellSpace::desk(), SkeletonMode::kSingle, two_heads(), 2);
  Rng rng(3);
  Tensor image = random_image(rng);
  auto skeletons = enumerate_skeletons(SkeletonMode::kSingle);

  for (int trial = 0; trial < 20; ++trial) {
    CellConfig cfg = sample_cell_config(sn.space, rng, SampleMode::kUniform);
    SubnetView shared = slice(sn, cfg);
    SubnetView standalone = shared.detached();

    auto fa = forward_grid(shared, sn.graph, image);
    auto fb = forward_grid(standalone, sn.graph, image);
    REQUIRE(fa.size() == 10);
    for (const auto& [id, t] : fa) {
      const Tensor& u = fb.at(id);
      REQUIRE(t.shape() == u.shape());
      CHECK((t.value() - u.value()).abs().maxCoeff() <= 1e-12);
    }
    const Skeleton& sk = skeletons[trial % skeletons.size()];
    for (TaskId task : {1, 2}) {
      Tensor oa = run_task_head(shared, task, two_heads()[task], sk, fa);
      Tensor ob = run_task_head(standalone, task, two_heads()[task], sk, fb);
      CHECK((oa.value() - ob.value()).abs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("out-of-slice gradients are exactly zero") {
  Supernet sn = init_supernet(CellSpace::desk(), SkeletonMode::kSingle, two_heads(), 4);
  Rng rng(5);
  CellConfig lo = sample_cell_config(sn.space, rng, SampleMode::kMin);
  SubnetView view = slice(sn, lo);
  Tensor image = random_image(rng);
  auto feats = forward_grid(view, sn.graph, image);

  Tensor loss;
  for (const auto& [id, t] : feats) {
    Tensor s = o::sum_all(o::mul(t, t));
    loss = loss.defined() ? o::add(loss, s) : s;
  }
  Skeleton sk;
  sk.mode = SkeletonMode::kSingle;
  sk.output = LayerId{1, 1};
  loss = o::add(loss, o::sum_all(run_task_head(view, 1, two_heads()[1], sk, feats)));
  backward(loss);

  LayerId l4{4, 4};
  int e = lo.at(l4).embed;
  int e_max = sn.space.max_embed(4);
  const BlockWeights& b0 = sn.layers.at(l4)[0];
  Array g = b0.qkv_w.grad();
  bool out_rows_zero = true, in_touched = false;
  for (int r = 0; r < 3 * e_max; ++r) {
    bool row_in = (r % e_max) < e;
    for (int c = 0; c < e_max; ++c) {
      double v = g[r * e_max + c];
      if (!row_in || c >= e) {
        out_rows_zero = out_rows_zero && v == 0.0;
      } else if (v != 0.0) {
        in_touched = true;
      }
    }
  }
  CHECK(out_rows_zero);
  CHECK(in_touched);

  // Depth beyond the sliced block count is untouched.
  CHECK((sn.layers.at(l4)[1].qkv_w.grad() == 0.0).all());

  // Patch rows beyond the level-1 embed are untouched.
  Array pg = sn.patch_w.grad();
  int e1 = lo.at({1, 1}).embed;
  for (int r = e1; r < sn.space.max_embed(1); ++r) {
    for (int c = 0; c < sn.patch_w.shape()[1]; ++c) CHECK(pg[r * sn.patch_w.shape()[1] + c] == 0.0);
  }
}

TEST_CASE("sandwich sampling order") {
  CellSpace space = CellSpace::desk();
  Rng rng(6);
  auto cfgs = sandwich_sample(space, rng);
  for (const LayerId& id : all_layer_ids()) {
    CHECK(cfgs[0].at(id).embed == space.max_embed(id.level));
    CHECK(cfgs[0].at(id).depth == space.max_depth());
    CHECK(cfgs[1].at(id).embed == space.min_embed(id.level));
  }
  for (const auto& c : cfgs) c.validate(space);
}

TEST_CASE("param formula matches the slicing oracle") {
  Supernet sn = init_supernet(CellSpace::desk(), SkeletonMode::kSingle, two_heads(), 7);
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    CellConfig cfg = sample_cell_config(sn.space, rng, SampleMode::kUniform);
    CHECK(count_params(sn.graph, cfg, sn.space) == slice_param_oracle(sn, sn.graph, cfg));
  }
  // Union graph with fixed attachments.
  Skeleton s1;
  s1.mode = SkeletonMode::kSingle;
  s1.output = LayerId{1, 2};
  Skeleton s2;
  s2.mode = SkeletonMode::kSingle;
  s2.output = LayerId{2, 2};
  MultiTaskGraph g = union_skeletons({{1, s1}, {2, s2}}, two_heads());
  for (int trial = 0; trial < 10; ++trial) {
    CellConfig cfg = sample_cell_config(sn.space, rng, SampleMode::kUniform);
    CHECK(count_params(g, cfg, sn.space) == slice_param_oracle(sn, g, cfg));
  }
}

TEST_CASE("checkpoint round trip") {
  Supernet sn = init_supernet(CellSpace::desk(), SkeletonMode::kSingle, two_heads(), 9);
  sn.step = 42;
  sn.skeleton_logits.value_mut()[3] = 0.7;
  const std::string path = "test_ckpt.bin";
  save_checkpoint(sn, path);
  Supernet back = load_checkpoint(path);
  CHECK(back.step == 42);
  CHECK(back.mode == sn.mode);
  CHECK(back.space.preset == "desk");
  CHECK(back.head_shapes == sn.head_shapes);
  CHECK((back.skeleton_logits.value() == sn.skeleton_logits.value()).all());
  CHECK((back.patch_w.value() == sn.patch_w.value()).all());
  for (const auto& [id, blocks] : sn.layers) {
    for (size_t i = 0; i < blocks.size(); ++i) {
      BlockWeights a = blocks[i], b = back.layers.at(id)[i];
      auto ta = a.tensors(), tb = b.tensors();
      for (size_t k = 0; k < ta.size(); ++k) CHECK((ta[k]->value() == tb[k]->value()).all());
    }
  }
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), PersistenceError);
  std::ofstream bad("bad_ckpt.bin", std::ios::binary);
  bad << "NOTMAGIC garbage";
  bad.close();
  CHECK_THROWS_AS(load_checkpoint("bad_ckpt.bin"), PersistenceError);
  std::remove("bad_ckpt.bin");
}

TEST_CASE("checkpoint bytes are deterministic") {
  auto dump = [](std::uint64_t seed) {
    Supernet sn = init_supernet(CellSpace::desk(), SkeletonMode::kSingle, two_heads(), seed);
    std::string path = "det_ckpt.bin";
    save_checkpoint(sn, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::remove(path.c_str());
    return bytes;
  };
  CHECK(dump(11) == dump(11));
  CHECK(dump(11) != dump(12));
}

TEST_CASE("adamw schedule and decay rules") {
  Tensor mat = Tensor::constant({2, 2}, 1.0, true);
  Tensor vec = Tensor::constant({2}, 1.0, true);
  AdamW::Settings s;
  s.lr = 0.1;
  s.lr_min = 0.001;
  s.weight_decay = 0.5;
  s.warmup_steps = 10;
  s.total_steps = 110;
  AdamW opt({mat, vec}, Tensor(), s);

  CHECK(opt.learning_rate(0) == doctest::Approx(0.1 / 10));
  CHECK(opt.learning_rate(9) == doctest::Approx(0.1));
  CHECK(opt.learning_rate(10) == doctest::Approx(0.1));
  CHECK(opt.learning_rate(110) == doctest::Approx(0.001));
  CHECK(opt.learning_rate(60) > opt.learning_rate(100));

  // Zero gradients: decay shrinks matrices, leaves vectors alone.
  mat.zero_grad();
  vec.zero_grad();
  opt.step(10);
  CHECK(mat.value()[0] < 1.0);
  CHECK(vec.value()[0] == 1.0);
}

TEST_CASE("logits train at their own constant rate") {
  Tensor logits = Tensor::zeros({3, 1}, true);
  AdamW::Settings s;
  s.logit_lr = 0.05;
  s.total_steps = 100;
  AdamW opt({}, logits, s);
  logits.node()->grad_ref()[0] = 1.0;
  opt.step(0);
  // Adam with bias correction moves by ~logit_lr on the first step.
  CHECK(logits.value()[0] == doctest::Approx(-0.05).epsilon(1e-3));
  CHECK(logits.value()[1] == 0.0);
}

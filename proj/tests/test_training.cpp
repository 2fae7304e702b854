#include <filesystem>

#include "helpers.hpp"

using namespace fdnm;
using fdnm::test::max_abs_diff;

namespace {

BackboneConfig micro() {
  BackboneConfig c;
  c.blocks = {{8, 2}, {8, 2}, {8, 2}, {8, 1}};
  c.embed_dim = 8;
  c.parts = 4;
  return c;
}

Dataset micro_data(std::size_t ids, std::uint64_t seed) {
  SynthSpec s;
  s.num_identities = ids;
  s.images_per_identity = 4;
  s.test_images_per_identity = 2;
  s.seed = seed;
  return generate(s);
}

TrainConfig micro_train(std::uint64_t seed) {
  TrainConfig c = TrainConfig::desk();
  c.epochs = 3;
  c.P = 2;
  c.K = 2;
  c.seed = seed;
  c.grad_clip = 5.0;
  c.checkpoint_every = 1;
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fdnm_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

ParamStore scalar_store(double w) {
  ParamStore ps;
  ps.add("w", Tensor::scalar(w, true));
  return ps;
}

void set_grad(ParamStore& ps, double g) {
  Tensor t = ps.at("w");
  t.grad_mut()[0] = g;
}

}  // namespace

TEST(Schedule, PublishedValues) {
  EXPECT_EQ(lr_at(0), 0.01);
  EXPECT_EQ(lr_at(30), 0.01);
  EXPECT_EQ(lr_at(100), 0.001);
}

TEST(Schedule, PiecewiseShape) {
  EXPECT_NEAR(lr_at(5), 0.01 + 0.09 * 0.5, 1e-15);
  EXPECT_EQ(lr_at(10), 0.1);
  EXPECT_EQ(lr_at(19), 0.1);
  EXPECT_EQ(lr_at(20), 0.01);
  EXPECT_EQ(lr_at(79), 0.01);
  EXPECT_EQ(lr_at(80), 0.001);
  EXPECT_EQ(lr_at(120), 0.0001);
  EXPECT_EQ(lr_at(149), 0.0001);
  for (std::size_t e = 1; e < 10; ++e) EXPECT_GT(lr_at(e), lr_at(e - 1));
}

TEST(Schedule, DeskPreset) {
  const TrainConfig d = TrainConfig::desk();
  EXPECT_EQ(d.epochs, 30u);
  EXPECT_EQ(d.milestones, (std::vector<std::size_t>{4, 16, 24}));
  EXPECT_EQ(lr_at(d, 0), 0.01);
  EXPECT_EQ(lr_at(d, 2), 0.1);
  EXPECT_EQ(lr_at(d, 4), 0.01);
  EXPECT_EQ(lr_at(d, 29), 0.0001);
}

TEST(Sgd, SingleStepWithoutMomentum) {
  ParamStore ps = scalar_store(1.0);
  OptimState opt = OptimState::create(ps, 0.0);
  set_grad(ps, 1.0);
  sgd_step(ps, opt, 0.1);
  EXPECT_DOUBLE_EQ(ps.at("w")[0], 0.9);
  EXPECT_FALSE(ps.at("w").has_grad());
}

TEST(Sgd, ZeroGradientKeepsParameters) {
  ParamStore ps = scalar_store(2.5);
  OptimState opt = OptimState::create(ps, 0.9);
  set_grad(ps, 0.0);
  sgd_step(ps, opt, 0.1);
  EXPECT_EQ(ps.at("w")[0], 2.5);
}

TEST(Sgd, MomentumMatchesHandRecurrence) {
  ParamStore ps = scalar_store(1.0);
  OptimState opt = OptimState::create(ps, 0.9);
  const double g1 = 0.3, g2 = -0.7, lr = 0.05;
  set_grad(ps, g1);
  sgd_step(ps, opt, lr);
  set_grad(ps, g2);
  sgd_step(ps, opt, lr);
  const double v1 = g1, w1 = 1.0 - lr * v1;
  const double v2 = 0.9 * v1 + g2, w2 = w1 - lr * v2;
  EXPECT_NEAR(ps.at("w")[0], w2, 1e-12);
  EXPECT_NEAR(opt.velocity.at("w")[0], v2, 1e-12);
}

TEST(Sgd, MissingGradientNamesParameter) {
  ParamStore ps = scalar_store(1.0);
  ps.add("other", Tensor::scalar(0.0, true));
  OptimState opt = OptimState::create(ps, 0.9);
  set_grad(ps, 1.0);
  try {
    sgd_step(ps, opt, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("other"), std::string::npos);
  }
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  ParamStore ps;
  ps.add("a", Tensor({2}, {0.0, 0.0}, true));
  ps.add("b", Tensor::scalar(0.0, true));
  Tensor a = ps.at("a"), b = ps.at("b");
  a.grad_mut()[0] = 3.0;
  a.grad_mut()[1] = 0.0;
  b.grad_mut()[0] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 10.0), 5.0);
  EXPECT_EQ(b.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

TEST(Losses, DecompositionIdentityAndNonNegativeCnm) {
  const Dataset d = micro_data(3, 1);
  TrainConfig cfg = micro_train(1);
  FdnmModel model(micro(), cfg.switches(), 3, 1);
  PkSampler sampler(d.train, 3, 2, 1);
  for (std::size_t s = 0; s < sampler.batches_per_epoch(); ++s) {
    const Batch b = assemble_batch(d.train, sampler.batch_indices(0, s), {}, 1, 0, s);
    const LossTerms t = compute_losses(model.forward(b.images, b.modality, Mode::train), b.labels, b.modality, cfg);
    const double expect = t.id.item() + cfg.weights.lambda1 * t.tri.item() + cfg.weights.lambda2 * t.cnm.item();
    EXPECT_NEAR(t.total.item(), expect, 1e-10);
    EXPECT_GE(t.cnm.item(), 0.0);
  }
}

TEST(Losses, CnmSwitchOffZeroesItsWeight) {
  const Dataset d = micro_data(2, 2);
  TrainConfig cfg = micro_train(2);
  cfg.use_cnm = false;
  FdnmModel model(micro(), cfg.switches(), 2, 2);
  const Batch b = pk_sample(d.train, 2, 2, 2);
  const LossTerms t = compute_losses(model.forward(b.images, b.modality, Mode::train), b.labels, b.modality, cfg);
  EXPECT_EQ(t.lambda2_effective, 0.0);
  EXPECT_NEAR(t.total.item(), t.id.item() + t.tri.item(), 1e-12);
}

TEST(Trainer, AblationsOffEqualBaselineTrace) {
  const Dataset d = micro_data(2, 3);
  TrainConfig off = micro_train(3);
  off.epochs = 1;
  off.use_agp = off.use_anm = off.use_cnm = off.use_local = false;
  TrainConfig base = off;
  base.use_agp = true;
  base.weights.lambda2 = 0.0;
  BackboneConfig plain = micro();
  plain.agp_after = {};
  Trainer a(off, micro(), d), b(base, plain, d);
  for (std::size_t s = 0; s < a.steps_per_epoch(); ++s) {
    const StepLosses la = a.step(0, s, 0.01), lb = b.step(0, s, 0.01);
    EXPECT_EQ(la.total, lb.total);
  }
}

TEST(Trainer, OneEpochOnMicroDataReducesLoss) {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dataset d = micro_data(2, seed);
    const TrainConfig cfg = micro_train(seed);
    Trainer t(cfg, micro(), d);
    const Batch probe = pk_sample(d.train, 2, 2, seed + 100);
    auto probe_loss = [&] {
      NoGradGuard ng;
      return compute_losses(t.model().forward(probe.images, probe.modality, Mode::train), probe.labels, probe.modality,
                            cfg)
          .total.item();
    };
    const double before = probe_loss();
    for (std::size_t s = 0; s < t.steps_per_epoch(); ++s) t.step(0, s, 0.01);
    improved += probe_loss() < before;
  }
  EXPECT_GE(improved, 4);
}

TEST(Trainer, RunsAreBitwiseIdentical) {
  const Dataset d = micro_data(3, 4);
  TrainConfig cfg = micro_train(4);
  cfg.epochs = 2;
  const auto da = fresh_dir("det_a"), db = fresh_dir("det_b");
  train(cfg, micro(), d, {da, std::nullopt, {}});
  train(cfg, micro(), d, {db, std::nullopt, {}});
  EXPECT_EQ(read_file((da / "metrics.csv").string()), read_file((db / "metrics.csv").string()));
  EXPECT_EQ(read_file((da / checkpoint_name(1)).string()), read_file((db / checkpoint_name(1)).string()));
}

TEST(Trainer, ResumeContinuesIdentically) {
  const Dataset d = micro_data(3, 5);
  const TrainConfig cfg = micro_train(5);
  const auto full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
  train(cfg, micro(), d, {full, std::nullopt, {}});
  std::filesystem::create_directories(part);
  std::filesystem::copy_file(full / checkpoint_name(0), part / checkpoint_name(0));
  // metrics.csv of the interrupted run holds only its first epoch.
  const auto rows = read_metrics(full / "metrics.csv");
  write_metrics(part / "metrics.csv", {rows[0]});
  train(cfg, micro(), d, {part, (part / checkpoint_name(0)).string(), {}});
  EXPECT_EQ(read_file((full / "metrics.csv").string()), read_file((part / "metrics.csv").string()));
  EXPECT_EQ(read_file((full / checkpoint_name(2)).string()), read_file((part / checkpoint_name(2)).string()));
}

TEST(Trainer, CheckpointHoldsFullState) {
  const Dataset d = micro_data(2, 6);
  Trainer t(micro_train(6), micro(), d);
  t.run_epoch();
  const auto arrays = decode_fdnm1(t.checkpoint_bytes(0));
  std::size_t params = 0, buffers = 0, velocity = 0;
  for (const auto& a : arrays) {
    params += a.name.rfind("param/", 0) == 0;
    buffers += a.name.rfind("buffer/", 0) == 0;
    velocity += a.name.rfind("velocity/", 0) == 0;
  }
  EXPECT_EQ(params, t.model().params().size());
  EXPECT_EQ(buffers, t.model().buffers().size());
  EXPECT_EQ(velocity, params);
  EXPECT_EQ(arrays.back().name, "meta/epoch");

  FdnmModel fresh(micro(), micro_train(6).switches(), 2, 99);
  const auto path = (fresh_dir("ckpt") += ".fdnm").string();
  write_file(path, t.checkpoint_bytes(0));
  load_model_checkpoint(fresh, path);
  for (const auto& [name, p] : t.model().params()) EXPECT_EQ(max_abs_diff(fresh.params().at(name).values(), p.values()), 0.0);
}

TEST(Trainer, NonFiniteLossAbortsWithContext) {
  const Dataset d = micro_data(2, 7);
  Trainer t(micro_train(7), micro(), d);
  for (const auto& [name, p] : t.model().params()) {
    Tensor h = p;
    std::fill(h.values_mut().begin(), h.values_mut().end(), std::numeric_limits<double>::quiet_NaN());
    break;
  }
  try {
    t.step(0, 0, 0.01);
    FAIL();
  } catch (const NonFiniteLoss& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos);
    EXPECT_NE(msg.find("cnm="), std::string::npos);
  }
}

TEST(Trainer, MetricsCsvLayout) {
  const Dataset d = micro_data(2, 8);
  TrainConfig cfg = micro_train(8);
  cfg.epochs = 1;
  const auto dir = fresh_dir("metrics");
  train(cfg, micro(), d, {dir, std::nullopt, {}});
  const std::string csv = read_file((dir / "metrics.csv").string());
  EXPECT_EQ(csv.rfind("epoch,lr,loss_total,loss_id,loss_tri,loss_cnm,rank1,mAP\n0,0.01,", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_0000.fdnm"));
}

TEST(Sweep, SingleCellEqualsSingleRun) {
  const Dataset d = micro_data(2, 9);
  TrainConfig cfg = micro_train(9);
  cfg.epochs = 1;
  const auto cells = sweep(cfg, micro(), d, {0.5}, {0.2});
  ASSERT_EQ(cells.size(), 1u);
  cfg.eval_every = 0;
  const TrainResult r = train(cfg, micro(), d);
  EXPECT_EQ(cells[0].map, r.final_eval.cmc.map);
  EXPECT_EQ(cells[0].rank1, r.final_eval.cmc.rank(1));
  EXPECT_EQ(sweep_csv(cells).substr(0, 29), "lambda2,margin_cnm,rank1,mAP\n");
  EXPECT_THROW(sweep(cfg, micro(), d, {}, {0.2}), Error);
}

TEST(Sweep, ZeroLambda2RemovesCnmFromTotal) {
  const Dataset d = micro_data(2, 10);
  TrainConfig cfg = micro_train(10);
  cfg.weights.lambda2 = 0.0;
  Trainer t(cfg, micro(), d);
  for (std::size_t s = 0; s < t.steps_per_epoch(); ++s) {
    const StepLosses l = t.step(0, s, 0.01);
    EXPECT_NEAR(l.total, l.id + l.tri, 1e-12);
  }
}

TEST(TrainConfig, ValidationErrors) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.milestones = {20, 20, 120};
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.use_anm = false;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.grad_clip = -1;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.decay_lrs = {1e-2, 0.0, 1e-4};
  EXPECT_THROW(c.validate(), Error);
}

#include <filesystem>
#include <set>

#include "helpers.hpp"

using namespace fdnm;
using fdnm::test::max_abs_diff;
using fdnm::test::rand_tensor;

namespace {

SynthSpec tiny_spec() {
  SynthSpec s;
  s.num_identities = 6;
  s.images_per_identity = 5;
  s.test_images_per_identity = 2;
  s.seed = 3;
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fdnm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Synth, SameSeedIsBitwiseIdentical) {
  const Dataset a = generate(tiny_spec()), b = generate(tiny_spec());
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(max_abs_diff(a.train[i].image.values(), b.train[i].image.values()), 0.0);
    EXPECT_EQ(a.train[i].identity, b.train[i].identity);
  }
}

TEST(Synth, DifferentSeedsDiffer) {
  SynthSpec s = tiny_spec();
  const Dataset a = generate(s);
  s.seed = 4;
  const Dataset b = generate(s);
  EXPECT_GT(max_abs_diff(a.train[0].image.values(), b.train[0].image.values()), 0.0);
}

TEST(Synth, CountsRangeAndCameras) {
  const Dataset d = generate(tiny_spec());
  EXPECT_EQ(d.train.size(), 6u * 2 * 5);
  EXPECT_EQ(d.test.size(), 6u * 2 * 2);
  for (const Sample& s : d.train) {
    EXPECT_EQ(s.image.shape(), (Shape{3, 32, 16}));
    EXPECT_LT(s.identity, 6u);
    EXPECT_EQ(s.camera, s.modality == Modality::visible ? kVisibleCamera : kInfraredCamera);
    for (double v : s.image.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synth, NoiselessImagesAreShiftedCleanRenders) {
  SynthSpec s = tiny_spec();
  s.noise_sigma = 0.0;
  const Dataset d = generate(s);
  const auto sigs = detail::make_signatures(s);
  for (const Sample& smp : d.train) {
    bool found = false;
    for (int dy = -1; dy <= 1 && !found; ++dy)
      for (int dx = -1; dx <= 1 && !found; ++dx) {
        auto ref = detail::render_visible(sigs[smp.identity], s.height, s.width, dy, dx);
        if (smp.modality == Modality::infrared) ref = detail::to_infrared(ref, s.height, s.width, s.ir_brightness, s.ir_blur_radius);
        for (double& v : ref) v = std::clamp(v, 0.0, 1.0);
        found = max_abs_diff(ref, smp.image.values()) == 0.0;
      }
    EXPECT_TRUE(found) << "identity " << smp.identity;
  }
}

TEST(Synth, IdentitiesArePairwiseDistinct) {
  SynthSpec s;
  const auto sigs = detail::make_signatures(s);
  for (std::size_t a = 0; a < sigs.size(); ++a)
    for (std::size_t b = a + 1; b < sigs.size(); ++b)
      EXPECT_GT(max_abs_diff(detail::render_visible(sigs[a], 32, 16, 0, 0), detail::render_visible(sigs[b], 32, 16, 0, 0)),
                0.0);
}

TEST(Synth, InfraredIsGrayAndDarker) {
  SynthSpec s = tiny_spec();
  s.noise_sigma = 0.0;
  const Dataset d = generate(s);
  double vis = 0, ir = 0;
  for (const Sample& smp : d.train) {
    const auto v = smp.image.values();
    if (smp.modality == Modality::infrared) {
      EXPECT_EQ(max_abs_diff(v.subspan(0, 512), v.subspan(512, 512)), 0.0);
      EXPECT_EQ(max_abs_diff(v.subspan(0, 512), v.subspan(1024, 512)), 0.0);
      ir += std::accumulate(v.begin(), v.end(), 0.0);
    } else {
      vis += std::accumulate(v.begin(), v.end(), 0.0);
    }
  }
  EXPECT_LT(ir, 0.8 * vis);
}

TEST(Synth, ZeroSizesAreRejected) {
  SynthSpec s;
  s.num_identities = 0;
  EXPECT_THROW(generate(s), Error);
}

TEST(PkSampler, DefaultBatchComposition) {
  const Dataset d = generate(SynthSpec{});
  PkSampler sampler(d.train, 6, 4, 0);
  EXPECT_EQ(sampler.batch_size(), 48u);
  for (std::size_t step = 0; step < sampler.batches_per_epoch(); ++step) {
    const auto idx = sampler.batch_indices(0, step);
    ASSERT_EQ(idx.size(), 48u);
    std::map<std::size_t, std::array<int, 2>> per;
    for (std::size_t i : idx) ++per[d.train[i].identity][static_cast<std::size_t>(d.train[i].modality)];
    EXPECT_EQ(per.size(), 6u);
    for (const auto& [id, c] : per) {
      EXPECT_EQ(c[0], 4);
      EXPECT_EQ(c[1], 4);
    }
  }
}

TEST(PkSampler, SmallestBatch) {
  const Batch b = pk_sample(generate(tiny_spec()).train, 1, 1, 7);
  ASSERT_EQ(b.labels.size(), 2u);
  EXPECT_EQ(b.labels[0], b.labels[1]);
  EXPECT_EQ(b.modality[0], Modality::visible);
  EXPECT_EQ(b.modality[1], Modality::infrared);
}

TEST(PkSampler, EpochCoversEverySampleWithoutRepeatsWhenSizesDivide) {
  SynthSpec s = tiny_spec();
  s.images_per_identity = 8;
  const Dataset d = generate(s);
  PkSampler sampler(d.train, 3, 4, 1);
  std::multiset<std::size_t> seen;
  for (const auto& b : sampler.epoch_batches(2)) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), d.train.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(PkSampler, EpochCoversEverySampleWithRaggedSizes) {
  const Dataset d = generate(tiny_spec());  // 5 images, K = 2, 6 identities, P = 4
  PkSampler sampler(d.train, 4, 2, 1);
  std::set<std::size_t> seen;
  for (const auto& b : sampler.epoch_batches(0)) {
    EXPECT_EQ(b.size(), 16u);
    seen.insert(b.begin(), b.end());
  }
  EXPECT_EQ(seen.size(), d.train.size());
}

TEST(PkSampler, ReproducibleAndEpochDependent) {
  const Dataset d = generate(tiny_spec());
  PkSampler a(d.train, 2, 2, 9), b(d.train, 2, 2, 9);
  EXPECT_EQ(a.epoch_batches(3), b.epoch_batches(3));
  EXPECT_NE(a.epoch_batches(3), a.epoch_batches(4));
  EXPECT_EQ(a.batch_indices(3, 1), b.epoch_batches(3)[1]);
}

TEST(PkSampler, BatchesSatisfyCenterPreconditions) {
  const Dataset d = generate(tiny_spec());
  PkSampler sampler(d.train, 3, 2, 2);
  for (const auto& idx : sampler.epoch_batches(0)) {
    const Batch b = assemble_batch(d.train, idx, {}, 2, 0, 0);
    const auto ids = batch_classes(b.labels);
    const Tensor e = rand_tensor({b.labels.size(), 2}, 1);
    EXPECT_NO_THROW(compute_centers(e, b.labels, b.modality, Modality::visible, Branch::v1, ids));
    EXPECT_NO_THROW(compute_centers(e, b.labels, b.modality, Modality::infrared, Branch::i1, ids));
  }
}

TEST(PkSampler, InsufficientSamplesAreAnError) {
  const Dataset d = generate(tiny_spec());
  EXPECT_THROW(PkSampler(d.train, 7, 2, 0), Error);
  EXPECT_THROW(PkSampler(d.train, 2, 6, 0), Error);
  EXPECT_THROW(PkSampler(d.train, 0, 2, 0), Error);
}

TEST(Augment, ForcedFlipTwiceIsIdentity) {
  Rng r(1, "a");
  const Sample s{rand_tensor({3, 4, 5}, 2, 0, 1), 0, Modality::visible, 1};
  const Sample once = augment(s, {true, true}, r);
  const Sample twice = augment(once, {true, true}, r);
  EXPECT_GT(max_abs_diff(once.image.values(), s.image.values()), 0.0);
  EXPECT_EQ(max_abs_diff(twice.image.values(), s.image.values()), 0.0);
}

TEST(Augment, SymmetricImageIsUnchanged) {
  const Tensor img({1, 2, 3}, {1, 2, 1, 5, 0, 5});
  EXPECT_EQ(max_abs_diff(hflip(img).values(), img.values()), 0.0);
}

TEST(Augment, FlipMovesPixelsByDefinition) {
  const Tensor img = rand_tensor({3, 4, 5}, 3);
  const Tensor f = hflip(img);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t w = 0; w < 5; ++w) EXPECT_EQ(f[(c * 4 + h) * 5 + (4 - w)], img[(c * 4 + h) * 5 + w]);
}

TEST(Augment, CoinIsRoughlyFair) {
  Rng r(4, "coin");
  const Sample s{rand_tensor({1, 2, 2}, 5), 0, Modality::visible, 1};
  int flips = 0;
  for (int i = 0; i < 2000; ++i) flips += max_abs_diff(augment(s, {}, r).image.values(), s.image.values()) > 0.0;
  EXPECT_NEAR(flips / 2000.0, 0.5, 0.05);
}

TEST(Augment, BatchAugmentationReproducible) {
  const Dataset d = generate(tiny_spec());
  const Batch a = pk_sample(d.train, 2, 2, 5, 1, 2, {}), b = pk_sample(d.train, 2, 2, 5, 1, 2, {});
  EXPECT_EQ(max_abs_diff(a.images.values(), b.images.values()), 0.0);
}

TEST(Pnm, HandWrittenP6) {
  const std::string bytes = std::string("P6\n# comment\n2 2\n255\n") +
                            std::string("\xff\x00\x00\x00\xff\x00\x00\x00\xff\x33\x66\x99", 12);
  const Tensor t = decode_pnm(bytes);
  ASSERT_EQ(t.shape(), (Shape{3, 2, 2}));
  const double expect[] = {1, 0, 0, 0.2, 0, 1, 0, 0.4, 0, 0, 1, 0.6};
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(t[i], expect[i], 1e-15);
  EXPECT_EQ(encode_pnm(t), "P6\n2 2\n255\n" + bytes.substr(bytes.size() - 12));
}

TEST(Pnm, RoundTripOfEightBitImages) {
  Rng r(6, "pnm");
  for (std::size_t c : {1, 3}) {
    std::vector<double> v(c * 5 * 7);
    for (double& x : v) x = static_cast<double>(r.index(256)) / 255.0;
    const Tensor img({c, 5, 7}, v);
    EXPECT_EQ(max_abs_diff(decode_pnm(encode_pnm(img)).values(), img.values()), 0.0);
  }
}

TEST(Pnm, QuantizationRoundsHalfUpAndClamps) {
  EXPECT_EQ(quantize_u8(0.5 / 255.0), 1);
  EXPECT_EQ(quantize_u8(0.49 / 255.0), 0);
  EXPECT_EQ(quantize_u8(-3.0), 0);
  EXPECT_EQ(quantize_u8(7.0), 255);
}

TEST(Pnm, RejectsOtherMaxval) {
  EXPECT_THROW(decode_pnm(std::string("P5\n1 1\n65535\n\x00\x01", 15)), Error);
  EXPECT_THROW(decode_pnm(std::string("P5\n1 1\n15\n\x01", 10)), Error);
}

TEST(Pnm, TruncationReportsByteOffset) {
  try {
    decode_pnm(std::string("P5\n2 2\n255\n\x01\x02", 13));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
  EXPECT_THROW(decode_pnm("P3\n1 1\n255\n"), Error);
  EXPECT_THROW(decode_pnm("P6\nx 1\n255\n"), Error);
}

TEST(Pnm, FileRoundTrip) {
  const auto dir = temp_dir("pnm");
  const Tensor img = rand_tensor({3, 4, 2}, 7, 0, 1);
  save_image(img, (dir / "a.ppm").string());
  EXPECT_LE(max_abs_diff(load_image((dir / "a.ppm").string()).values(), img.values()), 0.5 / 255.0 + 1e-12);
  EXPECT_THROW(load_image((dir / "missing.ppm").string()), Error);
}

TEST(DatasetIo, WriteThenReadKeepsQuantizedSamples) {
  const auto dir = temp_dir("dataset");
  SynthSpec s = tiny_spec();
  s.num_identities = 3;
  const Dataset d = generate(s);
  write_dataset(d, dir);
  std::ifstream f(dir / "manifest.tsv");
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "path\tidentity\tmodality\tcamera");
  const Dataset back = read_dataset(dir);
  ASSERT_EQ(back.train.size(), d.train.size());
  ASSERT_EQ(back.test.size(), d.test.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    EXPECT_EQ(back.train[i].identity, d.train[i].identity);
    EXPECT_EQ(back.train[i].modality, d.train[i].modality);
    EXPECT_EQ(back.train[i].camera, d.train[i].camera);
    EXPECT_LE(max_abs_diff(back.train[i].image.values(), d.train[i].image.values()), 0.5 / 255.0 + 1e-12);
  }
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "lmunet/config_io.hpp"
#include "lmunet/data_io.hpp"
#include "lmunet/ops.hpp"
#include "oracles.hpp"

using namespace lmunet;
using namespace lmunet::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "lmunet_test_data_io";
  fs::create_directories(d);
  return d / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
}

}  // namespace

// ---- tensor files ----------------------------------------------------------------

TEST(TensorFile, RoundTripsEveryDtype) {
  std::mt19937_64 rng(1);
  auto f = oracle::randn<float>({2, 3, 5}, rng);
  auto d = oracle::randn<double>({7}, rng);
  LabelMap u({4, 4});
  for (std::size_t i = 0; i < u.numel(); ++i) u[i] = std::uint16_t(i * 977);
  save_tensor(f, scratch("f.lmt"));
  save_tensor(d, scratch("d.lmt"));
  save_tensor(u, scratch("u.lmt"));
  save_tensor(Tensor<float>::scalar(2.5f), scratch("s.lmt"));
  EXPECT_EQ(load_tensor<float>(scratch("f.lmt")), f);
  EXPECT_EQ(load_tensor<double>(scratch("d.lmt")), d);
  EXPECT_EQ(load_tensor<std::uint16_t>(scratch("u.lmt")), u);
  EXPECT_EQ(load_tensor<float>(scratch("s.lmt")).item(), 2.5f);
  EXPECT_TRUE(std::holds_alternative<LabelMap>(load_tensor_any(scratch("u.lmt"))));
  EXPECT_THROW(load_tensor<double>(scratch("f.lmt")), LoadError);
}

TEST(TensorFile, HeaderCarriesExtents) {
  save_tensor(Tensor<float>({3, 1, 9}), scratch("h.lmt"));
  auto b = slurp(scratch("h.lmt"));
  ASSERT_EQ(b.size(), 4u + 4 + 1 + 1 + 3 * 8 + 27 * 4);
  EXPECT_EQ(b.substr(0, 4), "LMTX");
  EXPECT_EQ(std::uint8_t(b[9]), 3);
  std::uint64_t e2;
  std::memcpy(&e2, b.data() + 10 + 16, 8);
  EXPECT_EQ(e2, 9u);
}

TEST(TensorFile, CorruptionRaisesLoadError) {
  save_tensor(Tensor<float>({4}, 1.0f), scratch("ok.lmt"));
  const auto good = slurp(scratch("ok.lmt"));
  auto expect_load_error = [&](std::string bytes, const std::string& what) {
    spit(scratch("bad.lmt"), bytes);
    try {
      load_tensor_any(scratch("bad.lmt"));
      ADD_FAILURE() << what;
    } catch (const LoadError&) {
    }
  };
  expect_load_error(good.substr(0, good.size() - 3), "truncated payload");
  expect_load_error(good.substr(0, 6), "truncated header");
  expect_load_error("", "empty");
  auto magic = good;
  magic[0] = 'X';
  expect_load_error(magic, "magic");
  auto rank = good;
  rank[9] = 9;
  expect_load_error(rank, "rank > 8");
  auto dtype = good;
  dtype[8] = 42;
  expect_load_error(dtype, "dtype");
  expect_load_error(good + "zz", "trailing");
  EXPECT_THROW(load_tensor_any(scratch("does_not_exist.lmt")), LoadError);
  EXPECT_THROW(save_tensor(Tensor<float>(Shape(9, 1)), scratch("r9.lmt")), DimensionError);
}

// ---- preprocessing ------------------------------------------------------------------

TEST(Znorm, Examples) {
  EXPECT_EQ(znorm(Tensor<float>({1, 3, 3}, 7.0f)), Tensor<float>({1, 3, 3}, 0.0f));
  auto two = znorm(Tensor<double>({2}, std::vector<double>{0, 2}));
  EXPECT_DOUBLE_EQ(two[0], -1);
  EXPECT_DOUBLE_EQ(two[1], 1);
}

TEST(Znorm, NonFiniteInputIsNotMasked) {
  auto x = Tensor<float>({1, 4}, std::vector<float>{1, 2, NAN, 4});
  const auto z = znorm(x);
  for (auto v : z.data()) EXPECT_TRUE(std::isnan(v));
}

TEST(Znorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = oracle::randn<double>({1, oracle::pick(rng, 2, 9), oracle::pick(rng, 2, 9)}, rng, 5.0);
    for (auto& v : x.data()) v += 3;
    auto z = znorm(x);
    double m = 0, s = 0;
    for (auto v : z.data()) m += v;
    m /= double(z.numel());
    for (auto v : z.data()) s += (v - m) * (v - m);
    EXPECT_NEAR(m, 0, 1e-12);
    EXPECT_NEAR(s / double(z.numel()), 1, 1e-9);
  }
}

TEST(Resize, IdentityIsBitwise) {
  std::mt19937_64 rng(3);
  auto x = oracle::randn<float>({2, 5, 7}, rng);
  EXPECT_EQ(resize_image(x, {5, 7}), x);
  auto m = oracle::random_labels({4, 3, 5}, 3, rng);
  EXPECT_EQ(resize_mask(m, {4, 3, 5}), m);
}

TEST(Resize, DoublingMatchesUpsample) {
  std::mt19937_64 rng(4);
  for (auto sp : {Shape{3, 5}, Shape{2, 3, 4}}) {
    Shape s{2};
    s.insert(s.end(), sp.begin(), sp.end());
    auto x = oracle::randn<double>(s, rng);
    Shape target;
    for (auto e : sp) target.push_back(2 * e);
    auto got = resize_image(x, target);
    auto want = ops::upsample2x(x);
    EXPECT_LT(oracle::max_rel_err(got, want, 1e-12), 1e-12);
  }
}

TEST(Resize, MaskLabelsAreClosed) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = oracle::random_labels({oracle::pick(rng, 1, 9), oracle::pick(rng, 1, 9)}, 4, rng);
    std::set<std::uint16_t> before(m.data().begin(), m.data().end());
    auto r = resize_mask(m, {oracle::pick(rng, 1, 20), oracle::pick(rng, 1, 20)});
    for (auto v : r.data()) EXPECT_TRUE(before.count(v));
  }
}

TEST(Resize, Errors) {
  EXPECT_THROW(resize_image(Tensor<float>({1, 4, 4}), {0, 4}), ParameterError);
  EXPECT_THROW(resize_image(Tensor<float>({1, 4, 4}), {4, 4, 4}), DimensionError);
  EXPECT_THROW(resize_mask(LabelMap({4, 4}), {4}), DimensionError);
}

// ---- synthetic data and manifests -------------------------------------------------------

TEST(Synth, PureFunctionOfSeedIndexExtents) {
  auto a = synth_sample(7, 3, {32, 32}), b = synth_sample(7, 3, {32, 32}), c = synth_sample(7, 4, {32, 32});
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(a.image, c.image);
  EXPECT_EQ(a.image.shape(), (Shape{1, 32, 32}));
}

TEST(Synth, LabelsAndTumourContainment) {
  for (std::size_t i = 0; i < 10; ++i) {
    auto s = synth_sample(11, i, {32, 32});
    auto& m = s.mask;
    std::size_t organ = 0;
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 32; ++x) {
        const auto v = m[y * 32 + x];
        ASSERT_LE(v, 2);
        organ += v > 0;
        if (v == 2) {
          // tumours sit inside the organ, so no tumour site is isolated
          bool has_fg_neighbour = false;
          for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
            const long yy = long(y) + dy, xx = long(x) + dx;
            if (yy >= 0 && yy < 32 && xx >= 0 && xx < 32 && m[yy * 32 + xx] > 0) has_fg_neighbour = true;
          }
          EXPECT_TRUE(has_fg_neighbour);
        }
      }
    }
    EXPECT_GT(organ, 0u);
  }
  auto s3 = synth_sample(1, 0, {16, 16, 16});
  EXPECT_EQ(s3.mask.shape(), (Shape{16, 16, 16}));
  EXPECT_THROW(synth_sample(1, 0, {30, 32}), DimensionError);
}

TEST(Synth, GenerateWritesLoadableDataset) {
  auto dir = scratch("synth64");
  fs::remove_all(dir);
  auto m = synth_generate(7, 8, 2, {64, 64}, dir);
  ASSERT_EQ(m.entries.size(), 8u);
  auto reloaded = load_manifest(dir / "manifest.json");
  EXPECT_EQ(reloaded.entries.size(), 8u);
  auto samples = load_dataset(reloaded);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ids.insert(samples[i].id);
    EXPECT_EQ(samples[i].image.shape(), (Shape{1, 64, 64}));
    EXPECT_EQ(samples[i].mask, synth_sample(7, i, {64, 64}).mask);
  }
  EXPECT_EQ(ids.size(), 8u);
}

TEST(Manifest, RoundTripAndValidation) {
  auto dir = scratch("manifest");
  fs::remove_all(dir);
  auto m = synth_generate(2, 3, 2, {16, 16}, dir);
  m.class_names = {"background", "organ", "tumour"};
  m.split = "train";
  save_manifest(m, dir / "m2.json");
  auto r = load_manifest(dir / "m2.json");
  EXPECT_EQ(r.class_names, m.class_names);
  EXPECT_EQ(r.split, "train");
  ASSERT_EQ(r.entries.size(), 3u);
  EXPECT_EQ(r.entries[1].image, m.entries[1].image);

  auto dup = r;
  dup.entries[1].id = dup.entries[0].id;
  EXPECT_THROW(dup.validate(false), DataError);
  auto missing = r;
  missing.entries[0].mask = "nope.lmt";
  EXPECT_NO_THROW(missing.validate(false));
  EXPECT_THROW(missing.validate(true), DataError);
  auto empty = r;
  empty.entries[2].image.clear();
  EXPECT_THROW(empty.validate(false), DataError);

  spit(dir / "broken.json", "{\"version\": 1, \"entries\": [");
  EXPECT_THROW(load_manifest(dir / "broken.json"), DataError);
  spit(dir / "v2.json", "{\"version\": 2, \"rank\": 2, \"num_classes\": 3, \"samples\": []}");
  EXPECT_THROW(load_manifest(dir / "v2.json"), DataError);
}

TEST(Manifest, LoadDatasetChecksLabelsAndExtents) {
  auto dir = scratch("manifest_bad");
  fs::remove_all(dir);
  auto m = synth_generate(3, 3, 2, {16, 16}, dir);
  LabelMap big({16, 16}, 7);
  save_tensor(big, dir / m.entries[0].mask);
  EXPECT_THROW(load_dataset(m), DataError);
  save_tensor(LabelMap({8, 16}, 0), dir / m.entries[0].mask);
  try {
    load_dataset(m);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(m.entries[0].id), std::string::npos);
  }
}

TEST(Split, SizesPartitionAndSeed) {
  DatasetManifest m;
  for (int i = 0; i < 10; ++i) m.entries.push_back({"c" + std::to_string(i), "i", "m"});
  auto s = split(m, {0.7, 0.1, 0.2}, 1);
  EXPECT_EQ(s.train.entries.size(), 7u);
  EXPECT_EQ(s.val.entries.size(), 1u);
  EXPECT_EQ(s.test.entries.size(), 2u);
  std::set<std::string> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& e : part->entries) all.insert(e.id);
  EXPECT_EQ(all.size(), 10u);
  auto again = split(m, {0.7, 0.1, 0.2}, 1), other = split(m, {0.7, 0.1, 0.2}, 2);
  auto ids = [](const DatasetManifest& d) {
    std::vector<std::string> v;
    for (const auto& e : d.entries) v.push_back(e.id);
    return v;
  };
  EXPECT_EQ(ids(again.test), ids(s.test));
  EXPECT_NE(ids(other.train), ids(s.train));
  EXPECT_EQ(s.train.split, "train");

  auto tiny = m;
  tiny.entries.resize(2);
  EXPECT_THROW(split(tiny, {0.7, 0.1, 0.2}, 1), DataError);
  EXPECT_THROW(split(m, {0.7, 0.0, 0.3}, 1), ParameterError);
  for (std::size_t n = 3; n < 30; ++n) {
    auto mm = m;
    mm.entries.clear();
    for (std::size_t i = 0; i < n; ++i) mm.entries.push_back({"c" + std::to_string(i), "i", "m"});
    auto sp = split(mm, {0.7, 0.1, 0.2}, n);
    EXPECT_GE(sp.val.entries.size(), 1u) << n;
    EXPECT_GE(sp.test.entries.size(), 1u) << n;
    EXPECT_EQ(sp.train.entries.size() + sp.val.entries.size() + sp.test.entries.size(), n);
  }
}

// ---- config files -------------------------------------------------------------------

TEST(ConfigIo, RoundTripAndStrictness) {
  auto c = net::NetworkConfig::defaults(2);
  c.base_channels = 12;
  c.ablation.use_adjustment_factors = false;
  EXPECT_EQ(cfgio::network_from_json(cfgio::to_json(c), net::NetworkConfig::defaults(3)), c);
  train::TrainConfig t;
  t.lr0 = 0.5;
  t.seed = 99;
  auto tr = cfgio::train_from_json(cfgio::to_json(t), {});
  EXPECT_EQ(tr.lr0, 0.5);
  EXPECT_EQ(tr.seed, 99u);

  auto partial = cfgio::network_from_json(cfgio::json{{"d_state", 4}}, c);
  EXPECT_EQ(partial.d_state, 4u);
  EXPECT_EQ(partial.base_channels, 12u);

  auto expect_field = [](const cfgio::json& j, const std::string& field) {
    try {
      cfgio::network_from_json(j, net::NetworkConfig::defaults(3));
      ADD_FAILURE() << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  expect_field({{"bogus", 1}}, "bogus");
  expect_field({{"d_state", "four"}}, "d_state");
  expect_field({{"ablation", {{"vssm_replacement", "mlp"}}}}, "ablation.vssm_replacement");
  expect_field({{"ablation", {{"extra", true}}}}, "ablation.extra");

  auto path = scratch("cfg.json");
  cfgio::write_json_file(path, cfgio::to_json(c));
  EXPECT_EQ(cfgio::network_from_json(cfgio::read_json_file(path), {}), c);
  spit(path, "{not json");
  EXPECT_THROW(cfgio::read_json_file(path), ConfigError);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "dhat/data.hpp"
#include "dhat/error.hpp"
#include "dhat/ops.hpp"

using namespace dhat;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() /
             ("dhat_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> idx_header(std::uint32_t magic, std::vector<std::uint32_t> dims) {
  std::vector<unsigned char> out;
  auto put = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
  };
  put(magic);
  for (auto d : dims) put(d);
  return out;
}

}  // namespace

TEST(Idx, HandBuiltPair) {
  auto dir = temp_dir();
  auto img = idx_header(0x803, {2, 2, 2});
  for (unsigned char b : {0, 255, 128, 1, 10, 20, 30, 40}) img.push_back(b);
  auto lab = idx_header(0x801, {2});
  lab.push_back(3);
  lab.push_back(1);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);
  auto ds = load_idx((dir / "img").string(), (dir / "lab").string(), 10);
  EXPECT_EQ(ds.images.shape(), (Shape{2, 1, 2, 2}));
  ASSERT_EQ(ds.labels.size(), 2u);
  EXPECT_EQ(ds.labels[0], 3);
  EXPECT_EQ(ds.images.at(1), 1.0);
  EXPECT_EQ(ds.images.at(0), 0.0);
  EXPECT_DOUBLE_EQ(ds.images.at(2), 128.0 / 255.0);
}

TEST(Idx, ErrorPaths) {
  auto dir = temp_dir();
  auto img = idx_header(0x803, {2, 2, 2});
  for (int i = 0; i < 7; ++i) img.push_back(0);  // one byte short
  auto lab = idx_header(0x801, {2});
  lab.push_back(0);
  lab.push_back(1);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);
  EXPECT_THROW(load_idx((dir / "img").string(), (dir / "lab").string()), FormatError);

  img.push_back(0);
  write_bytes(dir / "img", img);
  EXPECT_NO_THROW(load_idx((dir / "img").string(), (dir / "lab").string()));

  auto bad = img;
  bad[2] = 0x09;
  write_bytes(dir / "bad", bad);
  EXPECT_THROW(load_idx((dir / "bad").string(), (dir / "lab").string()), FormatError);

  auto lab3 = idx_header(0x801, {3});
  for (int i = 0; i < 3; ++i) lab3.push_back(0);
  write_bytes(dir / "lab3", lab3);
  EXPECT_THROW(load_idx((dir / "img").string(), (dir / "lab3").string()), FormatError);
  EXPECT_THROW(load_idx((dir / "missing").string(), (dir / "lab").string()), IoError);
}

TEST(Idx, SaveLoadRoundTrip) {
  auto dir = temp_dir();
  for (int channels : {1, 3}) {
    SynthSpec spec;
    spec.num_classes = 4;
    spec.samples_per_class = 3;
    spec.image_size = 5;
    spec.channels = channels;
    auto ds = synth_dataset(spec);
    save_idx(ds, (dir / "i").string(), (dir / "l").string());
    auto once = load_idx((dir / "i").string(), (dir / "l").string(), 4);
    EXPECT_EQ(once.images.shape(), ds.images.shape());
    EXPECT_EQ(once.labels, ds.labels);
    for (std::size_t i = 0; i < ds.images.numel(); ++i) {
      EXPECT_LE(std::abs(once.images.at(i) - ds.images.at(i)), 0.5 / 255 + 1e-12);
    }
    save_idx(once, (dir / "i2").string(), (dir / "l2").string());
    auto twice = load_idx((dir / "i2").string(), (dir / "l2").string(), 4);
    for (std::size_t i = 0; i < ds.images.numel(); ++i) EXPECT_EQ(twice.images.at(i), once.images.at(i));
  }
}

TEST(Cifar, SingleRecordAndLayout) {
  auto dir = temp_dir();
  std::vector<unsigned char> rec(3073, 0);
  rec[0] = 7;
  rec[1] = 255;         // channel 0, row 0, col 0
  rec[1 + 33] = 51;     // channel 0, row 1, col 1
  rec[1 + 1024] = 102;  // channel 1, row 0, col 0
  write_bytes(dir / "b", rec);
  auto ds = load_cifar_binary({(dir / "b").string()}, 10);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 7);
  EXPECT_EQ(ds.images.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(ds.images.at(0), 1.0);
  EXPECT_DOUBLE_EQ(ds.images.at(33), 0.2);
  EXPECT_DOUBLE_EQ(ds.images.at(1024), 0.4);

  rec.push_back(0);
  write_bytes(dir / "bad", rec);
  EXPECT_THROW(load_cifar_binary({(dir / "bad").string()}, 10), FormatError);
  // The same 3074 bytes form one CIFAR-100 record: coarse byte skipped.
  rec[1] = 42;
  write_bytes(dir / "c100", rec);
  auto c100 = load_cifar_binary({(dir / "c100").string()}, 100);
  EXPECT_EQ(c100.labels[0], 42);
}

TEST(Cifar, TenRecordsReencode) {
  auto dir = temp_dir();
  std::mt19937_64 rng(3);
  std::vector<unsigned char> bytes;
  for (int r = 0; r < 10; ++r) {
    bytes.push_back(static_cast<unsigned char>(r));
    for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<unsigned char>(rng() & 0xff));
  }
  write_bytes(dir / "b", bytes);
  auto ds = load_cifar_binary({(dir / "b").string()}, 10);
  ASSERT_EQ(ds.size(), 10u);
  std::vector<unsigned char> re;
  for (std::size_t r = 0; r < 10; ++r) {
    re.push_back(static_cast<unsigned char>(ds.labels[r]));
    for (std::size_t i = 0; i < 3072; ++i) {
      re.push_back(static_cast<unsigned char>(std::lround(ds.images.at(r * 3072 + i) * 255)));
    }
  }
  EXPECT_EQ(re, bytes);
}

TEST(Synth, ZeroNoiseClassesAreConstant) {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 4;
  spec.sigma = 0;
  auto ds = synth_dataset(spec);
  ds.validate();
  const std::size_t row = ds.images.numel() / ds.size();
  for (std::size_t s = 3; s < ds.size(); ++s) {
    ASSERT_EQ(ds.labels[s], ds.labels[s - 3]);
    for (std::size_t i = 0; i < row; ++i) EXPECT_EQ(ds.images.at(s * row + i), ds.images.at((s - 3) * row + i));
  }
  spec.noise_stream = 5;
  auto other = synth_dataset(spec);
  for (std::size_t i = 0; i < ds.images.numel(); ++i) EXPECT_EQ(other.images.at(i), ds.images.at(i));
}

TEST(Synth, SeedDeterminism) {
  SynthSpec spec;
  spec.sigma = 0.2;
  auto a = synth_dataset(spec), b = synth_dataset(spec);
  EXPECT_EQ(std::vector<Real>(a.images.data().begin(), a.images.data().end()),
            std::vector<Real>(b.images.data().begin(), b.images.data().end()));
  spec.noise_stream = 1;
  auto c = synth_dataset(spec);
  EXPECT_NE(std::vector<Real>(a.images.data().begin(), a.images.data().end()),
            std::vector<Real>(c.images.data().begin(), c.images.data().end()));
}

TEST(Synth, LinearClassifierSeparatesLowNoise) {
  SynthSpec spec;
  spec.num_classes = 10;
  spec.samples_per_class = 30;
  spec.image_size = 8;
  spec.sigma = 0.05;
  auto ds = synth_dataset(spec);
  const std::size_t d = ds.images.numel() / ds.size();
  auto x = ops::flatten(ds.images);
  auto w = Tensor::zeros({10, d}, true), b = Tensor::zeros({10}, true);
  for (int step = 0; step < 300; ++step) {
    w.zero_grad();
    b.zero_grad();
    backward(ops::cross_entropy(ops::linear(x, w, b), ds.labels));
    auto wd = w.mutable_data();
    for (std::size_t i = 0; i < wd.size(); ++i) wd[i] -= 0.5 * w.grad()[i];
    auto bd = b.mutable_data();
    for (std::size_t i = 0; i < bd.size(); ++i) bd[i] -= 0.5 * b.grad()[i];
  }
  NoGradGuard guard;
  auto z = ops::linear(x, w, b);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < 10; ++c) {
      if (z.at(n * 10 + c) > z.at(n * 10 + arg)) arg = c;
    }
    correct += static_cast<int>(arg) == ds.labels[n];
  }
  EXPECT_GE(static_cast<double>(correct) / ds.size(), 0.99);
}

TEST(Batching, EpochOrderIsSeededPermutation) {
  auto a = epoch_order(50, 7, 1), b = epoch_order(50, 7, 1), c = epoch_order(50, 7, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Batching, MakeBatchAndAugment) {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.samples_per_class = 5;
  auto ds = synth_dataset(spec);
  const std::vector<std::size_t> rows = {4, 0, 7};
  auto batch = make_batch(ds, rows);
  EXPECT_EQ(batch.x.dim(0), 3u);
  EXPECT_EQ(batch.y, (std::vector<int>{ds.labels[4], ds.labels[0], ds.labels[7]}));
  EXPECT_EQ(batch.ids, (std::vector<std::uint64_t>{4, 0, 7}));
  std::mt19937_64 rng(1);
  auto aug = augment(batch.x, rng);
  EXPECT_EQ(aug.shape(), batch.x.shape());
  for (Real v : aug.data()) {
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 1);
  }
}

TEST(DatasetValidation, RejectsBadValues) {
  Dataset ds;
  ds.images = Tensor::from({1, 1, 1, 2}, {0.5, 1.5});
  ds.labels = {0};
  ds.num_classes = 2;
  EXPECT_THROW(ds.validate(), FormatError);
  ds.images = Tensor::from({1, 1, 1, 2}, {0.5, 0.5});
  ds.labels = {2};
  EXPECT_THROW(ds.validate(), FormatError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <unistd.h>

#include "throttle/data_io.hpp"
#include "throttle/error.hpp"

using namespace throttle;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("throttle_data_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset pixel_grid(std::size_t count, std::size_t c, std::size_t h, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.images = Tensor({count, c, h, h});
  for (double& v : d.images.values()) v = static_cast<double>(rng.index(256)) / 255.0;
  for (std::size_t i = 0; i < count; ++i) d.labels.push_back(static_cast<int>(rng.index(10)));
  d.classes = 10;
  d.split = "train";
  return d;
}

// Least-squares one-vs-rest linear probe fit on train, scored on test.
double linear_probe(const Dataset& train, const Dataset& test) {
  const std::size_t d = train.images.numel() / train.count() + 1, k = train.classes;
  std::vector<double> ata(d * d, 0.0), atb(d * k, 0.0);
  auto row = [&](const Dataset& s, std::size_t i, std::size_t j) {
    return j + 1 == d ? 1.0 : s.images[i * (d - 1) + j];
  };
  for (std::size_t i = 0; i < train.count(); ++i)
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) ata[a * d + b] += row(train, i, a) * row(train, i, b);
      atb[a * k + train.labels[i]] += row(train, i, a);
    }
  for (std::size_t a = 0; a < d; ++a) ata[a * d + a] += 1e-3;
  // Gauss-Jordan on [ata | atb]
  for (std::size_t c = 0; c < d; ++c) {
    const double piv = ata[c * d + c];
    for (std::size_t j = 0; j < d; ++j) ata[c * d + j] /= piv;
    for (std::size_t j = 0; j < k; ++j) atb[c * k + j] /= piv;
    for (std::size_t r = 0; r < d; ++r) {
      if (r == c) continue;
      const double f = ata[r * d + c];
      for (std::size_t j = 0; j < d; ++j) ata[r * d + j] -= f * ata[c * d + j];
      for (std::size_t j = 0; j < k; ++j) atb[r * k + j] -= f * atb[c * k + j];
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.count(); ++i) {
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0;
      for (std::size_t a = 0; a < d; ++a) s += row(test, i, a) * atb[a * k + j];
      if (s > best_score) best_score = s, best = j;
    }
    correct += static_cast<int>(best) == test.labels[i];
  }
  return static_cast<double>(correct) / test.count();
}

}  // namespace

TEST(Idx, RoundTrip) {
  IdxArray a{0x08, {2, 3}, {1, 2, 3, 4, 5, 6}};
  const fs::path p = scratch("a.idx");
  write_idx(p, a);
  const IdxArray b = read_idx(p);
  EXPECT_EQ(b.type, a.type);
  EXPECT_EQ(b.dims, a.dims);
  EXPECT_EQ(b.data, a.data);
  const Dataset d = pixel_grid(5, 1, 4, 1);
  save_idx(d, scratch("img.idx"), scratch("lbl.idx"));
  const Dataset e = load_idx(scratch("img.idx"), scratch("lbl.idx"));
  EXPECT_EQ(e.labels, d.labels);
  for (std::size_t i = 0; i < d.images.numel(); ++i) EXPECT_NEAR(e.images[i], d.images[i], 1e-15);
}

TEST(Idx, ErrorsReportOffsets) {
  auto message = [](const std::vector<std::uint8_t>& bytes) {
    const fs::path p = scratch("bad.idx");
    write_bytes(p, bytes);
    try {
      read_idx(p);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message({0, 1, 8, 1, 0, 0, 0, 1, 7}).find("byte offset 0"), std::string::npos);
  EXPECT_NE(message({0, 0, 8}).find("byte offset"), std::string::npos);
  EXPECT_NE(message({0, 0, 8, 1, 0, 0, 0, 4, 1, 2}).find("truncated"), std::string::npos);
  EXPECT_NE(message({0, 0, 8, 1, 0, 0, 0, 1, 1, 2}).find("trailing"), std::string::npos);
  EXPECT_THROW(read_idx(scratch("missing.idx")), FormatError);
}

TEST(Cifar, RoundTripAndMissingFiles) {
  Dataset d = pixel_grid(3, 3, 32, 2);
  const fs::path p = scratch("batch.bin");
  write_cifar_file(p, d);
  EXPECT_EQ(fs::file_size(p), 3u * 3073u);
  const Dataset e = load_cifar_file(p, "test");
  EXPECT_EQ(e.labels, d.labels);
  EXPECT_EQ(e.split, "test");
  for (std::size_t i = 0; i < d.images.numel(); ++i) EXPECT_NEAR(e.images[i], d.images[i], 1e-15);
  const fs::path dir = scratch("cifar");
  fs::create_directories(dir);
  write_cifar_file(dir / "data_batch_1.bin", d);
  EXPECT_THROW(load_cifar_binary(dir), FormatError);
  for (const char* f : kCifarFiles) write_cifar_file(dir / f, d);
  const CifarSplits s = load_cifar_binary(dir);
  EXPECT_EQ(s.train.count(), 15u);
  EXPECT_EQ(s.test.count(), 3u);
}

TEST(Synth, DeterministicAndShaped) {
  for (SynthKind k : {SynthKind::kBlobs, SynthKind::kXorGrid, SynthKind::kGlyphs}) {
    const Dataset a = synth_dataset(k, 40, 3, SynthOptions{4, 1, 12, 0.1});
    const Dataset b = synth_dataset(k, 40, 3, SynthOptions{4, 1, 12, 0.1});
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.example_shape(), (Shape{1, 12, 12}));
    EXPECT_NO_THROW(a.validate());
  }
  EXPECT_EQ(parse_synth_kind("xor-grid"), SynthKind::kXorGrid);
  EXPECT_THROW(parse_synth_kind("mnist"), ConfigError);
}

TEST(Synth, BlobsAreLinearlySeparableXorIsNot) {
  const SynthOptions o{4, 1, 8, 0.1};
  const double blobs = linear_probe(synth_dataset(SynthKind::kBlobs, 400, 1, o),
                                    synth_dataset(SynthKind::kBlobs, 400, 2, o));
  EXPECT_GE(blobs, 0.95);
  const double xr = linear_probe(synth_dataset(SynthKind::kXorGrid, 400, 1, o),
                                 synth_dataset(SynthKind::kXorGrid, 400, 2, o));
  EXPECT_LE(xr, 0.6);
}

TEST(Batches, SizesOrderAndCoverage) {
  const Dataset d = pixel_grid(10, 1, 4, 3);
  BatchStream s{&d, 4, false};
  const auto idx = batch_indices(s, 0);
  ASSERT_EQ(idx.size(), 3u);
  EXPECT_EQ(idx[0].size(), 4u);
  EXPECT_EQ(idx[2].size(), 2u);
  std::vector<std::size_t> flat;
  for (const auto& b : idx) flat.insert(flat.end(), b.begin(), b.end());
  std::vector<std::size_t> iota(10);
  std::iota(iota.begin(), iota.end(), 0);
  EXPECT_EQ(flat, iota);
  s.shuffle = true;
  s.seed = 5;
  std::set<std::size_t> seen;
  for (const auto& b : batch_indices(s, 1)) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(batch_indices(s, 1), batch_indices(s, 1));
  EXPECT_NE(batch_indices(s, 1), batch_indices(s, 2));
  const Batch b = make_batch(s, idx[0], 0, 0);
  EXPECT_EQ(b.images, d.gather(idx[0]));
}

TEST(Augment, FlipAndCropPreserveShape) {
  const Dataset d = pixel_grid(6, 3, 8, 4);
  BatchStream s{&d, 6, false, 1, true, 2};
  const auto b = batches(s, 0);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].images.shape(), (Shape{6, 3, 8, 8}));
  EXPECT_EQ(b[0].labels, d.labels);
}

TEST(Normalize, InvertibleAndFit) {
  Dataset d = pixel_grid(20, 3, 4, 5);
  const Dataset orig = d;
  const ChannelNorm fit = ChannelNorm::fit(d);
  normalize_channels(d, fit);
  double mean = 0;
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t p = 0; p < 16; ++p) mean += d.images[i * 48 + p];
  EXPECT_NEAR(mean / 320, 0.0, 1e-12);
  denormalize_channels(d, fit);
  for (std::size_t i = 0; i < d.images.numel(); ++i) EXPECT_NEAR(d.images[i], orig.images[i], 1e-12);
  EXPECT_EQ(ChannelNorm::cifar10().mean.size(), 3u);
  Dataset g = pixel_grid(2, 1, 4, 6);
  EXPECT_THROW(normalize_channels(g, ChannelNorm::cifar10()), std::invalid_argument);
}

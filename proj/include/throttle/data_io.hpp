#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "throttle/rng.hpp"
#include "throttle/tensor.hpp"

namespace throttle {

// Memory-resident image classification split. Images are [count, C, H, W]
// with pixels in [0,1] (unless channel-normalized).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string split;

  std::size_t count() const noexcept { return labels.size(); }
  // [C, H, W]
  Shape example_shape() const;
  // Stacks the selected examples into [n, C, H, W].
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  // Contiguous subset [begin, begin+n).
  Dataset slice(std::size_t begin, std::size_t n) const;
  // Throws FormatError when shapes or labels are inconsistent.
  void validate() const;
};

// Raw IDX container: element type code (0x08 unsigned byte, ...), extents,
// and the element bytes as stored.
struct IdxArray {
  std::uint8_t type = 0x08;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

// Image file (rank 3: count, rows, cols) + label file (rank 1).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes = 10);
// Inverse of load_idx for [count,1,H,W] data whose pixels are multiples of 1/255.
void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

struct CifarSplits {
  Dataset train;
  Dataset test;
};

inline constexpr std::array<const char*, 6> kCifarFiles{
    "data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
    "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"};

// Reads the five training batches and the test batch from `dir`.
CifarSplits load_cifar_binary(const std::filesystem::path& dir);
// One batch file: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar_file(const std::filesystem::path& file, const std::string& split);
void write_cifar_file(const std::filesystem::path& file, const Dataset& data);

enum class SynthKind { kBlobs, kXorGrid, kGlyphs };

struct SynthOptions {
  std::size_t classes = 4;  // blobs only; xor-grid is 2, glyphs 10
  std::size_t channels = 1;
  std::size_t size = 8;     // canvas height = width
  double noise = 0.1;
  std::uint64_t task_seed = 0;  // blobs: class centers (shared by all splits)
};

SynthKind parse_synth_kind(const std::string& name);

// blobs: each class is a Gaussian cluster around a random canvas template.
// xor-grid: label = parity of the signs of two canvas quadrant contrasts.
// glyphs: seven-segment digit shapes 0-9 drawn at random offsets and
// intensities over pixel noise (an MNIST-scale stand-in).
Dataset synth_dataset(SynthKind kind, std::size_t count, std::uint64_t seed, const SynthOptions& options = {});

struct BatchStream {
  const Dataset* data = nullptr;
  std::size_t batch_size = 32;
  bool shuffle = true;
  std::uint64_t seed = 0;
  bool flip = false;           // horizontal flip with probability 0.5
  std::size_t pad_crop = 0;    // zero-pad by this many pixels, random crop back
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

// Example indices of every batch of `epoch`, in order; the permutation is a
// function of (seed, epoch). The last batch may be short.
std::vector<std::vector<std::size_t>> batch_indices(const BatchStream& stream, std::size_t epoch);
// Materializes one batch, applying the stream's augmentation.
Batch make_batch(const BatchStream& stream, std::span<const std::size_t> indices, std::size_t epoch,
                 std::size_t batch_number);
std::vector<Batch> batches(const BatchStream& stream, std::size_t epoch);

// Per-channel affine normalization x' = (x - mean[c]) / stddev[c].
struct ChannelNorm {
  std::vector<double> mean;
  std::vector<double> stddev;

  static ChannelNorm cifar10();
  static ChannelNorm fit(const Dataset& data);
};

void normalize_channels(Dataset& data, const ChannelNorm& norm);
void denormalize_channels(Dataset& data, const ChannelNorm& norm);

}  // namespace throttle

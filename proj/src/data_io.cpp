#include "throttle/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "throttle/error.hpp"

namespace throttle {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path.string() + "'");
}

std::size_t idx_element_size(std::uint8_t type) {
  switch (type) {
    case 0x08:
    case 0x09: return 1;
    case 0x0B: return 2;
    case 0x0C:
    case 0x0D: return 4;
    case 0x0E: return 8;
    default: return 0;
  }
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Seven-segment masks for digits 0-9; bit order a b c d e f g.
constexpr std::array<std::uint8_t, 10> kSegments{0b1111110, 0b0110000, 0b1101101, 0b1111001, 0b0110011,
                                                 0b1011011, 0b1011111, 0b1110000, 0b1111111, 0b1111011};

void draw_rect(double* img, std::size_t size, long r0, long c0, long r1, long c1, double v) {
  for (long r = std::max(0L, r0); r < std::min<long>(static_cast<long>(size), r1); ++r)
    for (long c = std::max(0L, c0); c < std::min<long>(static_cast<long>(size), c1); ++c)
      img[r * static_cast<long>(size) + c] = std::max(img[r * static_cast<long>(size) + c], v);
}

void draw_glyph(double* img, std::size_t size, int digit, Rng& rng) {
  const long h = std::max(5L, std::lround(0.7 * static_cast<double>(size)));
  const long w = std::max(3L, std::lround(0.45 * static_cast<double>(size)));
  const long t = size >= 14 ? 1 + static_cast<long>(rng.index(2)) : 1;
  const long top = static_cast<long>(rng.index(static_cast<std::size_t>(std::max(1L, static_cast<long>(size) - h + 1))));
  const long left = static_cast<long>(rng.index(static_cast<std::size_t>(std::max(1L, static_cast<long>(size) - w + 1))));
  const long mid = top + h / 2;
  const long bottom = top + h;
  const long right = left + w;
  const std::uint8_t mask = kSegments[static_cast<std::size_t>(digit)];
  auto seg = [&](int bit) { return (mask >> (6 - bit)) & 1; };
  auto level = [&] { return rng.uniform(0.5, 1.0); };
  if (seg(0)) draw_rect(img, size, top, left, top + t, right, level());
  if (seg(1)) draw_rect(img, size, top, right - t, mid + 1, right, level());
  if (seg(2)) draw_rect(img, size, mid, right - t, bottom, right, level());
  if (seg(3)) draw_rect(img, size, bottom - t, left, bottom, right, level());
  if (seg(4)) draw_rect(img, size, mid, left, bottom, left + t, level());
  if (seg(5)) draw_rect(img, size, top, left, mid + 1, left + t, level());
  if (seg(6)) draw_rect(img, size, mid - t / 2, left, mid - t / 2 + t, right, level());
}

}  // namespace

Shape Dataset::example_shape() const {
  const Shape& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  Shape s = images.shape();
  const std::size_t stride = shape_numel(example_shape());
  s[0] = indices.size();
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(images.data() + indices[i] * stride, stride, out.data() + i * stride);
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t n) const {
  if (begin + n > count() || n == 0) throw std::invalid_argument("dataset slice out of range");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = begin + i;
  return {gather(idx), gather_labels(idx), classes, split};
}

void Dataset::validate() const {
  if (labels.empty()) throw FormatError("dataset '" + split + "' is empty");
  if (images.rank() != 4 || images.extent(0) != labels.size())
    throw FormatError("dataset '" + split + "': images " + shape_string(images.shape()) + " do not match " +
                      std::to_string(labels.size()) + " labels");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw FormatError("dataset '" + split + "': label " + std::to_string(labels[i]) + " of example " +
                        std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
}

IdxArray read_idx(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const std::string where = "IDX file '" + path.string() + "'";
  if (bytes.size() < 4)
    throw FormatError(where + ": header truncated at byte offset " + std::to_string(bytes.size()) +
                      ", expected at least 4 bytes");
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(where + ": bad magic at byte offset 0");
  IdxArray a;
  a.type = bytes[2];
  const std::size_t elem = idx_element_size(a.type);
  if (elem == 0) throw FormatError(where + ": unknown element type code at byte offset 2");
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError(where + ": zero rank at byte offset 3");
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header)
    throw FormatError(where + ": dimension table truncated at byte offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(header) + " header bytes");
  std::size_t numel = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t o = 4 + 4 * d;
    const std::uint32_t v = (std::uint32_t{bytes[o]} << 24) | (std::uint32_t{bytes[o + 1]} << 16) |
                            (std::uint32_t{bytes[o + 2]} << 8) | std::uint32_t{bytes[o + 3]};
    a.dims.push_back(v);
    numel *= v;
  }
  const std::size_t expected = header + numel * elem;
  if (bytes.size() != expected)
    throw FormatError(where + (bytes.size() < expected ? ": truncated" : ": trailing bytes") +
                      ", expected " + std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()) +
                      " (data starts at byte offset " + std::to_string(header) + ")");
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return a;
}

void write_idx(const fs::path& path, const IdxArray& a) {
  std::vector<std::uint8_t> bytes{0, 0, a.type, static_cast<std::uint8_t>(a.dims.size())};
  for (std::uint32_t d : a.dims)
    for (int shift = 24; shift >= 0; shift -= 8) bytes.push_back(static_cast<std::uint8_t>(d >> shift));
  bytes.insert(bytes.end(), a.data.begin(), a.data.end());
  write_bytes(path, bytes);
}

Dataset load_idx(const fs::path& images, const fs::path& labels, std::size_t classes) {
  const IdxArray img = read_idx(images);
  const IdxArray lab = read_idx(labels);
  if (img.type != 0x08 || img.dims.size() != 3)
    throw FormatError("IDX images '" + images.string() + "' must be unsigned bytes of rank 3");
  if (lab.type != 0x08 || lab.dims.size() != 1)
    throw FormatError("IDX labels '" + labels.string() + "' must be unsigned bytes of rank 1");
  if (img.dims[0] != lab.dims[0])
    throw FormatError("IDX image count " + std::to_string(img.dims[0]) + " differs from label count " +
                      std::to_string(lab.dims[0]));
  Dataset d;
  d.images = Tensor({img.dims[0], 1, img.dims[1], img.dims[2]});
  for (std::size_t i = 0; i < img.data.size(); ++i) d.images[i] = img.data[i] / 255.0;
  d.labels.assign(lab.data.begin(), lab.data.end());
  d.classes = classes;
  d.split = images.stem().string();
  d.validate();
  return d;
}

void save_idx(const Dataset& data, const fs::path& images, const fs::path& labels) {
  if (data.images.rank() != 4 || data.images.extent(1) != 1)
    throw std::invalid_argument("save_idx needs single-channel [N,1,H,W] images");
  IdxArray img{0x08, {static_cast<std::uint32_t>(data.count()), static_cast<std::uint32_t>(data.images.extent(2)),
                      static_cast<std::uint32_t>(data.images.extent(3))}, {}};
  for (double v : data.images.values()) img.data.push_back(to_byte(v));
  IdxArray lab{0x08, {static_cast<std::uint32_t>(data.count())}, {}};
  for (int l : data.labels) lab.data.push_back(static_cast<std::uint8_t>(l));
  write_idx(images, img);
  write_idx(labels, lab);
}

Dataset load_cifar_file(const fs::path& file, const std::string& split) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  const auto bytes = read_bytes(file);
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw FormatError("CIFAR file '" + file.string() + "': length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of " + std::to_string(kRecord) + "; last record starts at byte offset " +
                      std::to_string(bytes.size() / kRecord * kRecord));
  const std::size_t n = bytes.size() / kRecord;
  Dataset d;
  d.images = Tensor({n, 3, 32, 32});
  d.labels.resize(n);
  d.classes = 10;
  d.split = split;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = bytes[i * kRecord];
    if (label >= 10)
      throw FormatError("CIFAR file '" + file.string() + "': label " + std::to_string(label) + " at byte offset " +
                        std::to_string(i * kRecord) + " outside [0,10)");
    d.labels[i] = label;
    for (std::size_t p = 0; p < kRecord - 1; ++p) d.images[i * (kRecord - 1) + p] = bytes[i * kRecord + 1 + p] / 255.0;
  }
  return d;
}

void write_cifar_file(const fs::path& file, const Dataset& data) {
  if (data.example_shape() != Shape{3, 32, 32}) throw std::invalid_argument("CIFAR records are 3x32x32");
  std::vector<std::uint8_t> bytes;
  const std::size_t stride = 3 * 32 * 32;
  for (std::size_t i = 0; i < data.count(); ++i) {
    bytes.push_back(static_cast<std::uint8_t>(data.labels[i]));
    for (std::size_t p = 0; p < stride; ++p) bytes.push_back(to_byte(data.images[i * stride + p]));
  }
  write_bytes(file, bytes);
}

CifarSplits load_cifar_binary(const fs::path& dir) {
  std::vector<std::string> missing;
  for (const char* name : kCifarFiles)
    if (!fs::exists(dir / name)) missing.emplace_back(name);
  if (!missing.empty()) {
    std::string msg = "missing CIFAR-10 files in '" + dir.string() + "':";
    for (const auto& m : missing) msg += " " + m;
    msg += " (expected";
    for (const char* name : kCifarFiles) msg += std::string(" ") + name;
    throw FormatError(msg + ")");
  }
  std::vector<Dataset> parts;
  for (std::size_t i = 0; i < 5; ++i) parts.push_back(load_cifar_file(dir / kCifarFiles[i], "train"));
  std::size_t total = 0;
  for (const auto& p : parts) total += p.count();
  CifarSplits s;
  s.train.images = Tensor({total, 3, 32, 32});
  s.train.classes = 10;
  s.train.split = "train";
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), s.train.images.data() + offset);
    offset += p.images.numel();
    s.train.labels.insert(s.train.labels.end(), p.labels.begin(), p.labels.end());
  }
  s.test = load_cifar_file(dir / kCifarFiles[5], "test");
  return s;
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "blobs") return SynthKind::kBlobs;
  if (name == "xor-grid") return SynthKind::kXorGrid;
  if (name == "glyphs") return SynthKind::kGlyphs;
  throw ConfigError("unknown synthetic dataset kind '" + name + "' (expected blobs, xor-grid or glyphs)");
}

Dataset synth_dataset(SynthKind kind, std::size_t count, std::uint64_t seed, const SynthOptions& o) {
  if (count == 0) throw std::invalid_argument("synthetic dataset needs count > 0");
  if (o.size == 0 || o.channels == 0) throw std::invalid_argument("synthetic canvas must be non-empty");
  Rng rng(derive_seed(seed, "synth"));
  const std::size_t plane = o.size * o.size;
  const std::size_t stride = o.channels * plane;
  Dataset d;
  d.images = Tensor({count, o.channels, o.size, o.size});
  d.labels.resize(count);
  d.split = "synthetic";
  switch (kind) {
    case SynthKind::kBlobs: {
      if (o.classes < 2) throw std::invalid_argument("blobs need at least 2 classes");
      d.classes = o.classes;
      std::vector<std::vector<double>> centers(o.classes, std::vector<double>(stride));
      Rng task(derive_seed(o.task_seed, "blob-centers"));
      for (auto& c : centers)
        for (double& v : c) v = task.uniform(0.2, 0.8);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = rng.index(o.classes);
        d.labels[i] = static_cast<int>(label);
        for (std::size_t p = 0; p < stride; ++p)
          d.images[i * stride + p] = std::clamp(centers[label][p] + o.noise * rng.normal(), 0.0, 1.0);
      }
      break;
    }
    case SynthKind::kXorGrid: {
      d.classes = 2;
      for (std::size_t i = 0; i < count; ++i) {
        double a = rng.uniform(0.15, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        double b = rng.uniform(0.15, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        d.labels[i] = (a > 0) != (b > 0) ? 1 : 0;
        for (std::size_t c = 0; c < o.channels; ++c)
          for (std::size_t r = 0; r < o.size; ++r)
            for (std::size_t col = 0; col < o.size; ++col) {
              const double level = 0.5 + 0.4 * (col < o.size / 2 ? a : b);
              d.images[i * stride + c * plane + r * o.size + col] = std::clamp(level + o.noise * rng.normal(), 0.0, 1.0);
            }
      }
      break;
    }
    case SynthKind::kGlyphs: {
      if (o.size < 7) throw std::invalid_argument("glyph canvas must be at least 7 pixels");
      d.classes = 10;
      std::vector<double> canvas(plane);
      for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(rng.index(10));
        d.labels[i] = label;
        std::fill(canvas.begin(), canvas.end(), 0.0);
        draw_glyph(canvas.data(), o.size, label, rng);
        for (std::size_t c = 0; c < o.channels; ++c)
          for (std::size_t p = 0; p < plane; ++p)
            d.images[i * stride + c * plane + p] = std::clamp(canvas[p] + o.noise * rng.normal(), 0.0, 1.0);
      }
      break;
    }
  }
  return d;
}

std::vector<std::vector<std::size_t>> batch_indices(const BatchStream& stream, std::size_t epoch) {
  if (!stream.data || stream.batch_size == 0) throw std::invalid_argument("batch stream needs data and batch size");
  std::vector<std::size_t> order(stream.data->count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (stream.shuffle) {
    Rng rng(derive_seed(stream.seed, "data", epoch));
    rng.shuffle(order);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += stream.batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + stream.batch_size)));
  return out;
}

Batch make_batch(const BatchStream& stream, std::span<const std::size_t> indices, std::size_t epoch,
                 std::size_t batch_number) {
  Batch b{stream.data->gather(indices), stream.data->gather_labels(indices), {indices.begin(), indices.end()}};
  if (!stream.flip && stream.pad_crop == 0) return b;
  Rng rng(derive_seed(derive_seed(stream.seed, "augment", epoch), "batch", batch_number));
  const std::size_t channels = b.images.extent(1), h = b.images.extent(2), w = b.images.extent(3);
  std::vector<double> scratch(h * w);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const bool flip = stream.flip && rng.bernoulli(0.5);
    const long pad = static_cast<long>(stream.pad_crop);
    const long dy = pad ? static_cast<long>(rng.index(2 * stream.pad_crop + 1)) - pad : 0;
    const long dx = pad ? static_cast<long>(rng.index(2 * stream.pad_crop + 1)) - pad : 0;
    for (std::size_t c = 0; c < channels; ++c) {
      double* img = b.images.data() + (n * channels + c) * h * w;
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) {
          const long sr = static_cast<long>(r) + dy;
          long sc = static_cast<long>(flip ? w - 1 - col : col) + dx;
          const bool inside = sr >= 0 && sr < static_cast<long>(h) && sc >= 0 && sc < static_cast<long>(w);
          scratch[r * w + col] = inside ? img[sr * static_cast<long>(w) + sc] : 0.0;
        }
      std::copy(scratch.begin(), scratch.end(), img);
    }
  }
  return b;
}

std::vector<Batch> batches(const BatchStream& stream, std::size_t epoch) {
  std::vector<Batch> out;
  const auto idx = batch_indices(stream, epoch);
  for (std::size_t b = 0; b < idx.size(); ++b) out.push_back(make_batch(stream, idx[b], epoch, b));
  return out;
}

ChannelNorm ChannelNorm::cifar10() { return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}}; }

ChannelNorm ChannelNorm::fit(const Dataset& data) {
  const std::size_t channels = data.images.extent(1);
  const std::size_t plane = data.images.extent(2) * data.images.extent(3);
  ChannelNorm norm{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  const double n = static_cast<double>(data.count() * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < data.count(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = data.images[(i * channels + c) * plane + p];
        s += v;
        s2 += v * v;
      }
    norm.mean[c] = s / n;
    norm.stddev[c] = std::max(1e-6, std::sqrt(std::max(0.0, s2 / n - norm.mean[c] * norm.mean[c])));
  }
  return norm;
}

void normalize_channels(Dataset& data, const ChannelNorm& norm) {
  const std::size_t channels = data.images.extent(1);
  if (norm.mean.size() != channels || norm.stddev.size() != channels)
    throw std::invalid_argument("channel normalization constants do not match the channel count");
  const std::size_t plane = data.images.extent(2) * data.images.extent(3);
  for (std::size_t i = 0; i < data.count(); ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        double& v = data.images[(i * channels + c) * plane + p];
        v = (v - norm.mean[c]) / norm.stddev[c];
      }
}

void denormalize_channels(Dataset& data, const ChannelNorm& norm) {
  const std::size_t channels = data.images.extent(1);
  if (norm.mean.size() != channels || norm.stddev.size() != channels)
    throw std::invalid_argument("channel normalization constants do not match the channel count");
  const std::size_t plane = data.images.extent(2) * data.images.extent(3);
  for (std::size_t i = 0; i < data.count(); ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        double& v = data.images[(i * channels + c) * plane + p];
        v = v * norm.stddev[c] + norm.mean[c];
      }
}

}  // namespace throttle

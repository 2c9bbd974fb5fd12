#include "throttle/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "throttle/error.hpp"

namespace throttle {

std::size_t ParamStore::add(std::string name, Tensor value) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
  return entries_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamStore::assign(std::span<const NamedTensor> records) {
  if (records.size() != entries_.size())
    throw FormatError("parameter count mismatch: expected " + std::to_string(entries_.size()) +
                      ", got " + std::to_string(records.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].name != entries_[i].name)
      throw FormatError("parameter " + std::to_string(i) + " is '" + records[i].name +
                        "', expected '" + entries_[i].name + "'");
    if (records[i].value.shape() != entries_[i].value.shape())
      throw FormatError("parameter '" + records[i].name + "' has shape " +
                        shape_string(records[i].value.shape()) + ", expected " +
                        shape_string(entries_[i].value.shape()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) entries_[i].value = records[i].value;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    for (std::size_t d : e.value.shape()) mix(&d, sizeof d);
    mix(e.value.data(), e.value.numel() * sizeof(double));
  }
  return h;
}

NodeId ParamBinder::operator()(std::size_t index) {
  auto& slot = leaves_.at(index);
  if (!slot) {
    Tensor value = store_.at(index);
    value.set_requires_grad(trainable_);
    slot = graph_.leaf(std::move(value));
  }
  return *slot;
}

std::vector<Tensor> ParamBinder::collect(const Gradients& grads) const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    const Tensor* g = leaves_[i] ? grads.find(*leaves_[i]) : nullptr;
    out.push_back(g ? *g : Tensor(store_.at(i).shape()));
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'T', 'H', 'R', 'T', 'L', 'C', 'K', 'P'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size())
      throw FormatError(source_ + ": truncated at byte " + std::to_string(pos_) + " reading " + what +
                        " (need " + std::to_string(n) + " bytes, " +
                        std::to_string(bytes_.size() - pos_) + " left)");
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8, "tensor data");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string str(std::size_t n) {
    need(n, "name");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> records) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<std::uint32_t>(r.value.rank()));
    for (std::size_t d : r.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : r.value.values()) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("failed writing '" + path.string() + "'");
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());
  r.need(sizeof kMagic, "magic");
  if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
    throw FormatError(path.string() + ": bad magic at byte 0 (not a checkpoint)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32("record count");
  std::vector<NamedTensor> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor rec;
    rec.name = r.str(r.u32("name length"));
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32("extent");
      if (e == 0) throw FormatError(path.string() + ": zero extent at byte " + std::to_string(r.pos() - 4));
      shape.push_back(e);
    }
    const std::size_t n = shape_numel(shape);
    r.need(n * 8, "tensor data");
    std::vector<double> data(n);
    for (double& v : data) v = r.f64();
    rec.value = Tensor(std::move(shape), std::move(data));
    records.push_back(std::move(rec));
  }
  if (!r.done())
    throw FormatError(path.string() + ": trailing bytes after record " + std::to_string(count) +
                      " at byte " + std::to_string(r.pos()));
  return records;
}

}  // namespace throttle

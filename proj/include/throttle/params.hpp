#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "throttle/graph.hpp"

namespace throttle {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Ordered collection of named trainable tensors (data-path parameters or
// controller parameters).
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const noexcept { return entries_.size(); }
  const Tensor& at(std::size_t i) const { return entries_.at(i).value; }
  Tensor& at(std::size_t i) { return entries_.at(i).value; }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t total_elements() const;

  std::span<const NamedTensor> entries() const noexcept { return entries_; }
  // Replaces values from records; names and shapes must match exactly.
  void assign(std::span<const NamedTensor> records);

  // FNV-1a over names, shapes and value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<NamedTensor> entries_;
};

// Binds parameters into one graph, creating each leaf on first use.
class ParamBinder {
 public:
  ParamBinder(Graph& graph, const ParamStore& store, bool trainable)
      : graph_(graph), store_(store), trainable_(trainable), leaves_(store.size()) {}

  NodeId operator()(std::size_t index);
  Graph& graph() noexcept { return graph_; }
  const ParamStore& store() const noexcept { return store_; }

  // Per-parameter gradients (zero-filled for parameters not reached).
  std::vector<Tensor> collect(const Gradients& grads) const;

 private:
  Graph& graph_;
  const ParamStore& store_;
  bool trainable_;
  std::vector<std::optional<NodeId>> leaves_;
};

// Binary container: magic "THRTLCKP", u32 format version, u32 record
// count, then per record: u32 name length, UTF-8 name bytes, u32 rank,
// rank x u32 extents, numel x f64 values. All integers and floats are
// little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> records);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace throttle

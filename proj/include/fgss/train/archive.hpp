#pragma once

// Binary weight container:
//   "FGSS" | u32 version | u32 count | count × { u32 name_len | name | u32 ndim | ndim × u32 dims | f32 data }
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgss/nn/layers.hpp"

namespace fgss::train {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void add(std::string name, std::vector<std::uint32_t> dims, std::vector<float> data);
  void add(const std::string& name, const nn::Tensor<float>& t);
  const NamedTensor* find(const std::string& name) const;
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  std::vector<std::uint8_t> to_bytes() const;
  static TensorArchive from_bytes(const std::vector<std::uint8_t>& bytes);

  void write(const std::filesystem::path& path) const;
  static TensorArchive read(const std::filesystem::path& path);

 private:
  std::vector<NamedTensor> tensors_;
};

/// Adds every parameter and buffer of `list` under its registered name.
void store(TensorArchive& ar, const nn::ParamList<float>& list);
void store(TensorArchive& ar, const std::vector<nn::BufferRef<float>>& buffers);

/// Copies values back; every registered tensor must be present with the same
/// element count and shape, otherwise ArchiveError names the offender.
void restore(const TensorArchive& ar, nn::ParamList<float>& list);
void restore(const TensorArchive& ar, const std::vector<nn::BufferRef<float>>& buffers);

}  // namespace fgss::train

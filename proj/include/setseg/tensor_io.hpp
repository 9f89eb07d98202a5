#pragma once

#include "setseg/common.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace setseg {

enum class DType { kF32, kF64, kU8 };

const char* dtype_name(DType t);
DType dtype_from_name(const std::string& name);
size_t dtype_size(DType t);

/// One named tensor. Values are kept as raw little-endian bytes so that a
/// read/write round trip is byte-exact for every dtype.
struct Tensor {
  DType dtype = DType::kF64;
  std::vector<int64_t> shape;
  std::vector<std::uint8_t> bytes;

  int64_t count() const;

  static Tensor from_f64(std::vector<int64_t> shape, const double* values);
  static Tensor from_f32(std::vector<int64_t> shape, const double* values);
  static Tensor from_u8(std::vector<int64_t> shape, const std::uint8_t* values);
  static Tensor from_matrix(const Matrix& m, DType dtype = DType::kF64);
  static Tensor scalar(double v);

  /// Values widened to double.
  std::vector<double> to_f64() const;
  /// Reshapes to rows = product of all but the last extent (2-D view).
  Matrix to_matrix() const;
  double to_scalar() const;

  bool operator==(const Tensor&) const = default;
};

/// Single-file tensor store: an 8-byte little-endian header length, a JSON
/// header {name: {dtype, shape, offset}} with offsets relative to the start
/// of the payload, then the concatenated little-endian row-major payload.
class TensorContainer {
 public:
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  /// Throws DataError when absent.
  const Tensor& get(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::vector<std::uint8_t> serialize() const;
  static TensorContainer deserialize(const std::vector<std::uint8_t>& data);

  void save(const std::string& path) const;
  static TensorContainer load(const std::string& path);

 private:
  std::map<std::string, Tensor> tensors_;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace setseg

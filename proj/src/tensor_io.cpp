#include "setseg/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace setseg {

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

const char* dtype_name(DType t) {
  switch (t) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
  }
  return "f64";
}

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::kF32;
  if (name == "f64") return DType::kF64;
  if (name == "u8") return DType::kU8;
  throw DataError("unknown tensor dtype '" + name + "'");
}

size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  return 8;
}

int64_t Tensor::count() const {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

Tensor Tensor::from_f64(std::vector<int64_t> shape, const double* values) {
  Tensor t;
  t.dtype = DType::kF64;
  t.shape = std::move(shape);
  t.bytes.resize(static_cast<size_t>(t.count()) * 8);
  if (!t.bytes.empty()) std::memcpy(t.bytes.data(), values, t.bytes.size());
  return t;
}

Tensor Tensor::from_f32(std::vector<int64_t> shape, const double* values) {
  Tensor t;
  t.dtype = DType::kF32;
  t.shape = std::move(shape);
  const auto n = static_cast<size_t>(t.count());
  t.bytes.resize(n * 4);
  for (size_t i = 0; i < n; ++i) {
    const auto f = static_cast<float>(values[i]);
    std::memcpy(t.bytes.data() + 4 * i, &f, 4);
  }
  return t;
}

Tensor Tensor::from_u8(std::vector<int64_t> shape, const std::uint8_t* values) {
  Tensor t;
  t.dtype = DType::kU8;
  t.shape = std::move(shape);
  t.bytes.assign(values, values + t.count());
  return t;
}

Tensor Tensor::from_matrix(const Matrix& m, DType dtype) {
  std::vector<int64_t> shape{m.rows(), m.cols()};
  if (dtype == DType::kF32) return from_f32(std::move(shape), m.data());
  if (dtype == DType::kU8) {
    std::vector<std::uint8_t> v(static_cast<size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) v[static_cast<size_t>(i)] = static_cast<std::uint8_t>(m.data()[i]);
    return from_u8(std::move(shape), v.data());
  }
  return from_f64(std::move(shape), m.data());
}

Tensor Tensor::scalar(double v) { return from_f64({1}, &v); }

std::vector<double> Tensor::to_f64() const {
  const auto n = static_cast<size_t>(count());
  if (bytes.size() != n * dtype_size(dtype)) throw DataError("tensor byte count does not match its shape");
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    switch (dtype) {
      case DType::kF64: std::memcpy(&out[i], bytes.data() + 8 * i, 8); break;
      case DType::kF32: {
        float f;
        std::memcpy(&f, bytes.data() + 4 * i, 4);
        out[i] = f;
        break;
      }
      case DType::kU8: out[i] = bytes[i]; break;
    }
  }
  return out;
}

Matrix Tensor::to_matrix() const {
  const std::vector<double> v = to_f64();
  Eigen::Index cols = shape.empty() ? 1 : shape.back();
  if (cols == 0) return Matrix(0, 0);
  const Eigen::Index rows = static_cast<Eigen::Index>(v.size()) / cols;
  Matrix m(rows, cols);
  if (!v.empty()) std::memcpy(m.data(), v.data(), v.size() * sizeof(double));
  return m;
}

double Tensor::to_scalar() const {
  const std::vector<double> v = to_f64();
  if (v.size() != 1) throw DataError("expected a scalar tensor");
  return v[0];
}

const Tensor& TensorContainer::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("tensor '" + name + "' missing from container");
  return it->second;
}

std::vector<std::uint8_t> TensorContainer::serialize() const {
  nlohmann::json header = nlohmann::json::object();
  size_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"offset", offset}};
    offset += t.bytes.size();
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(8);
  const auto len = static_cast<std::uint64_t>(text.size());
  std::memcpy(out.data(), &len, 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : tensors_) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

TensorContainer TensorContainer::deserialize(const std::vector<std::uint8_t>& data) {
  if (data.size() < 8) throw DataError("tensor container shorter than its length prefix");
  std::uint64_t len = 0;
  std::memcpy(&len, data.data(), 8);
  if (len > data.size() - 8) throw DataError("tensor container header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.begin() + 8, data.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tensor container header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw DataError("tensor container header must be a JSON object");

  const size_t payload_start = 8 + static_cast<size_t>(len);
  const size_t payload_size = data.size() - payload_start;
  TensorContainer c;
  std::vector<std::pair<size_t, size_t>> extents;
  size_t total = 0;
  try {
    for (const auto& [name, entry] : header.items()) {
      Tensor t;
      t.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
      t.shape = entry.at("shape").get<std::vector<int64_t>>();
      for (int64_t e : t.shape) {
        if (e < 0) throw DataError("tensor '" + name + "' has a negative extent");
      }
      const auto offset = entry.at("offset").get<size_t>();
      const size_t size = static_cast<size_t>(t.count()) * dtype_size(t.dtype);
      if (offset > payload_size || size > payload_size - offset) {
        throw DataError("tensor '" + name + "' extends past the payload");
      }
      t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(payload_start + offset),
                     data.begin() + static_cast<std::ptrdiff_t>(payload_start + offset + size));
      extents.emplace_back(offset, size);
      total += size;
      c.tensors_[name] = std::move(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed tensor container header: ") + e.what());
  }
  std::sort(extents.begin(), extents.end());
  for (size_t i = 1; i < extents.size(); ++i) {
    if (extents[i - 1].first + extents[i - 1].second > extents[i].first) throw DataError("tensor payloads overlap");
  }
  if (total != payload_size) throw DataError("tensor container payload length does not match its header");
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path + "'");
}

void TensorContainer::save(const std::string& path) const { write_file_bytes(path, serialize()); }

TensorContainer TensorContainer::load(const std::string& path) { return deserialize(read_file_bytes(path)); }

}  // namespace setseg

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtask/tensor.hpp"

namespace xtask {

// Tensor file format: one single-line UTF-8 JSON header
//   {"dtype":"f32","shape":[...]}
// terminated by '\n', followed by raw little-endian scalars in row-major
// order. Readers reject payloads whose byte count disagrees with the header.

template <std::floating_point T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

template <std::floating_point T>
void write_tensor_file(const std::filesystem::path& path, const Shape& shape,
                       std::span<const T> data) {
  check(shape_numel(shape) == static_cast<int64_t>(data.size()), ErrorCategory::shape,
        "tensor payload does not match shape " + shape_str(shape));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  nlohmann::json header;
  header["dtype"] = dtype_name<T>();
  header["shape"] = shape;
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  check(out.good(), ErrorCategory::io, "short write: " + path.string());
}

template <std::floating_point T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  write_tensor_file<T>(path, t.shape(), t.data());
}

struct StoredTensor {
  Shape shape;
  std::string dtype;
  std::vector<double> data;  // widened; convert at the call site
};

inline StoredTensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorCategory::io, "cannot open: " + path.string());
  std::string line;
  check(static_cast<bool>(std::getline(in, line)), ErrorCategory::data,
        "missing tensor header: " + path.string());
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  check(!header.is_discarded() && header.contains("dtype") && header.contains("shape"),
        ErrorCategory::data, "malformed tensor header: " + path.string());
  StoredTensor t;
  t.dtype = header["dtype"].get<std::string>();
  t.shape = header["shape"].get<Shape>();
  size_t n = static_cast<size_t>(shape_numel(t.shape));
  size_t elem = 0;
  if (t.dtype == "f32") elem = 4;
  else if (t.dtype == "f64") elem = 8;
  else fail(ErrorCategory::data, "unsupported dtype '" + t.dtype + "' in " + path.string());

  std::vector<char> payload(n * elem);
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  check(static_cast<size_t>(in.gcount()) == payload.size(), ErrorCategory::data,
        "corrupt payload (truncated): " + path.string());
  in.peek();
  check(in.eof(), ErrorCategory::data, "corrupt payload (trailing bytes): " + path.string());

  t.data.resize(n);
  if (t.dtype == "f32") {
    const float* p = reinterpret_cast<const float*>(payload.data());
    for (size_t i = 0; i < n; ++i) t.data[i] = static_cast<double>(p[i]);
  } else {
    const double* p = reinterpret_cast<const double*>(payload.data());
    std::copy_n(p, n, t.data.begin());
  }
  return t;
}

template <std::floating_point T>
Tensor<T> read_tensor_as(const std::filesystem::path& path) {
  StoredTensor s = read_tensor_file(path);
  std::vector<T> d(s.data.size());
  for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(s.data[i]);
  return Tensor<T>::from(s.shape, std::move(d));
}

}  // namespace xtask

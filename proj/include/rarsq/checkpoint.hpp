#pragma once
// Little-endian binary checkpoint primitives. Payload floats are stored as
// 32-bit; a file that is loaded and saved again reproduces itself byte for
// byte, which the reproducibility checks rely on.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rarsq/quantizer.hpp"
#include "rarsq/tensor.hpp"

namespace rarsq::ckpt {

// Malformed or truncated file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Structurally valid file that does not fit what it is loaded against
// (e.g. a policy trained against a different codebook geometry).
struct CompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Writer {
 public:
  explicit Writer(const std::string& path);
  ~Writer();
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void magic(const std::string& tag);  // exactly 5 bytes
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(double v);
  void f32s(const double* x, std::size_t n);
  void str(const std::string& s);  // u32 length + bytes
  // u32 count, then per tensor: name, u32 ndims, dims, f32 payload.
  void tensors(const std::map<std::string, const Tensor*>& table);
  void close();  // flushes; throws on write failure

 private:
  struct Impl;
  Impl* impl_;
};

class Reader {
 public:
  explicit Reader(const std::string& path);
  ~Reader();
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  void expect_magic(const std::string& tag);
  std::uint32_t u32();
  std::uint64_t u64();
  double f32();
  void f32s(double* x, std::size_t n);
  std::string str();
  std::map<std::string, Tensor> tensors();
  bool at_end() const;

 private:
  struct Impl;
  Impl* impl_;
};

// FNV-1a over a byte range; used to assert that frozen weights stay frozen.
std::uint64_t fnv1a(const void* data, std::size_t n);
std::uint64_t file_hash(const std::string& path);

// Codebook stack format: magic "RARQ1", u32 m, K, D, mode, then per depth
// the K x m code vectors, then per depth K counts and K x m sums.
void save_quantizer(const std::string& path, const quant::CodebookStack& s);
quant::CodebookStack load_quantizer(const std::string& path);

}  // namespace rarsq::ckpt

#include "rarsq/checkpoint.hpp"

#include <cstdio>
#include <cstring>

namespace rarsq::ckpt {

namespace {

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t f32_bits(double v) {
  float f = static_cast<float>(v);
  std::uint32_t b;
  std::memcpy(&b, &f, 4);
  return b;
}

double bits_f32(std::uint32_t b) {
  float f;
  std::memcpy(&f, &b, 4);
  return static_cast<double>(f);
}

}  // namespace

struct Writer::Impl {
  std::FILE* fp = nullptr;
  std::string path;
  std::vector<unsigned char> buf;

  void flush() {
    if (!buf.empty()) {
      if (std::fwrite(buf.data(), 1, buf.size(), fp) != buf.size())
        throw FormatError("checkpoint write failed: " + path);
      buf.clear();
    }
  }
};

Writer::Writer(const std::string& path) : impl_(new Impl) {
  impl_->path = path;
  impl_->fp = std::fopen(path.c_str(), "wb");
  if (!impl_->fp) {
    delete impl_;
    throw FormatError("cannot open for writing: " + path);
  }
}

Writer::~Writer() {
  if (impl_->fp) std::fclose(impl_->fp);
  delete impl_;
}

void Writer::magic(const std::string& tag) {
  if (tag.size() != 5) throw std::invalid_argument("magic must be 5 bytes");
  impl_->buf.insert(impl_->buf.end(), tag.begin(), tag.end());
}

void Writer::u32(std::uint32_t v) { put_u32(impl_->buf, v); }

void Writer::u64(std::uint64_t v) {
  put_u32(impl_->buf, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(impl_->buf, static_cast<std::uint32_t>(v >> 32));
}

void Writer::f32(double v) { put_u32(impl_->buf, f32_bits(v)); }

void Writer::f32s(const double* x, std::size_t n) {
  impl_->buf.reserve(impl_->buf.size() + 4 * n);
  for (std::size_t i = 0; i < n; ++i) put_u32(impl_->buf, f32_bits(x[i]));
  if (impl_->buf.size() > (1u << 20)) impl_->flush();
}

void Writer::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  impl_->buf.insert(impl_->buf.end(), s.begin(), s.end());
}

void Writer::tensors(const std::map<std::string, const Tensor*>& table) {
  u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    str(name);
    u32(static_cast<std::uint32_t>(t->shape.size()));
    for (auto d : t->shape) u32(static_cast<std::uint32_t>(d));
    f32s(t->v.data(), t->v.size());
  }
}

void Writer::close() {
  impl_->flush();
  if (std::fclose(impl_->fp) != 0) {
    impl_->fp = nullptr;
    throw FormatError("checkpoint close failed: " + impl_->path);
  }
  impl_->fp = nullptr;
}

struct Reader::Impl {
  std::vector<unsigned char> data;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (pos + n > data.size())
      throw FormatError("truncated checkpoint: " + path);
  }
};

Reader::Reader(const std::string& path) : impl_(new Impl) {
  impl_->path = path;
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) {
    delete impl_;
    throw FormatError("cannot open: " + path);
  }
  std::fseek(fp, 0, SEEK_END);
  long sz = std::ftell(fp);
  std::fseek(fp, 0, SEEK_SET);
  impl_->data.resize(sz < 0 ? 0 : static_cast<std::size_t>(sz));
  if (!impl_->data.empty() &&
      std::fread(impl_->data.data(), 1, impl_->data.size(), fp) !=
          impl_->data.size()) {
    std::fclose(fp);
    delete impl_;
    throw FormatError("read failed: " + path);
  }
  std::fclose(fp);
}

Reader::~Reader() { delete impl_; }

void Reader::expect_magic(const std::string& tag) {
  impl_->need(5);
  if (std::memcmp(impl_->data.data() + impl_->pos, tag.data(), 5) != 0)
    throw FormatError("bad magic in " + impl_->path + ", expected " + tag);
  impl_->pos += 5;
}

std::uint32_t Reader::u32() {
  impl_->need(4);
  const unsigned char* p = impl_->data.data() + impl_->pos;
  impl_->pos += 4;
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t Reader::u64() {
  std::uint64_t lo = u32();
  std::uint64_t hi = u32();
  return lo | (hi << 32);
}

double Reader::f32() { return bits_f32(u32()); }

void Reader::f32s(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = f32();
}

std::string Reader::str() {
  std::uint32_t n = u32();
  impl_->need(n);
  std::string s(reinterpret_cast<const char*>(impl_->data.data() + impl_->pos),
                n);
  impl_->pos += n;
  return s;
}

std::map<std::string, Tensor> Reader::tensors() {
  std::uint32_t count = u32();
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = str();
    std::uint32_t nd = u32();
    Tensor t;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      t.shape.push_back(static_cast<std::int64_t>(u32()));
      numel *= static_cast<std::size_t>(t.shape.back());
    }
    t.v.resize(numel);
    f32s(t.v.data(), numel);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

bool Reader::at_end() const { return impl_->pos == impl_->data.size(); }

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t file_hash(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw FormatError("cannot open for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  unsigned char buf[65536];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, fp)) > 0)
    for (std::size_t i = 0; i < n; ++i) {
      h ^= buf[i];
      h *= 0x100000001b3ull;
    }
  std::fclose(fp);
  return h;
}

void save_quantizer(const std::string& path, const quant::CodebookStack& s) {
  Writer w(path);
  w.magic("RARQ1");
  w.u32(static_cast<std::uint32_t>(s.m));
  w.u32(static_cast<std::uint32_t>(s.K));
  w.u32(static_cast<std::uint32_t>(s.D));
  w.u32(s.mode == quant::GradMode::rotation ? 0u : 1u);
  for (const auto& b : s.books) w.f32s(b.vec.v.data(), b.vec.v.size());
  for (const auto& b : s.books) {
    w.f32s(b.ema_count.data(), b.ema_count.size());
    w.f32s(b.ema_sum.data(), b.ema_sum.size());
  }
  w.close();
}

quant::CodebookStack load_quantizer(const std::string& path) {
  Reader r(path);
  r.expect_magic("RARQ1");
  int m = static_cast<int>(r.u32());
  int K = static_cast<int>(r.u32());
  int D = static_cast<int>(r.u32());
  std::uint32_t mode = r.u32();
  if (mode > 1) throw FormatError("unknown gradient mode in " + path);
  quant::CodebookStack s = quant::CodebookStack::make(
      D, K, m, mode == 0 ? quant::GradMode::rotation : quant::GradMode::ste);
  for (auto& b : s.books) r.f32s(b.vec.v.data(), b.vec.v.size());
  for (auto& b : s.books) {
    r.f32s(b.ema_count.data(), b.ema_count.size());
    r.f32s(b.ema_sum.data(), b.ema_sum.size());
  }
  return s;
}

}  // namespace rarsq::ckpt

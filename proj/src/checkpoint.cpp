#include "crossdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "crossdiff/errors.hpp"

namespace crossdiff {

namespace {

class Writer {
public:
  Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw io_error("cannot open for writing: " + path);
  }
  void bytes(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u32(uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                    static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
    bytes(b, 4);
  }
  void u64(uint64_t v) {
    u32(static_cast<uint32_t>(v));
    u32(static_cast<uint32_t>(v >> 32));
  }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
  void close() {
    out_.close();
    if (!out_) throw io_error("write failed: " + path_);
  }

private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
public:
  Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw io_error("cannot open for reading: " + path);
  }
  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw io_error("truncated file: " + path_);
  }
  uint8_t u8() {
    uint8_t v;
    bytes(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint8_t b[4];
    bytes(b, 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
  }
  uint64_t u64() {
    const uint64_t lo = u32();
    const uint64_t hi = u32();
    return lo | hi << 32;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void magic(const char* expected) {
    char m[4];
    bytes(m, 4);
    if (std::memcmp(m, expected, 4) != 0)
      throw io_error(std::string("bad magic in ") + path_ + " (expected " + expected + ")");
  }
  const std::string& path() const { return path_; }

private:
  std::string path_;
  std::ifstream in_;
};

void write_tensor(Writer& w, const Mat& m, bool transpose) {
  if (transpose) {
    for (int64_t c = 0; c < m.cols; ++c)
      for (int64_t r = 0; r < m.rows; ++r) w.f32(static_cast<float>(m.at(r, c)));
  } else {
    for (double v : m.data) w.f32(static_cast<float>(v));
  }
}

void write_vec(Writer& w, const std::vector<double>& v) {
  for (double x : v) w.f32(static_cast<float>(x));
}

Mat read_tensor(Reader& r, int64_t rows, int64_t cols, bool transpose) {
  Mat m(rows, cols);
  if (transpose) {
    // Stored as cols x rows; read back into feature-major layout.
    for (int64_t c = 0; c < cols; ++c)
      for (int64_t row = 0; row < rows; ++row) m.at(row, c) = r.f32();
  } else {
    for (double& v : m.data) v = r.f32();
  }
  return m;
}

std::vector<double> read_vec(Reader& r, int64_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = r.f32();
  return v;
}

}  // namespace

void save_checkpoint(const CrosscoderModel& model, const std::string& path) {
  Writer w(path);
  w.bytes("XCKP", 4);
  w.u32(1);
  w.u8(static_cast<uint8_t>(model.arch));
  w.u32(static_cast<uint32_t>(model.d_a));
  w.u32(static_cast<uint32_t>(model.d_b));
  w.u32(static_cast<uint32_t>(model.dict_size));
  w.u32(static_cast<uint32_t>(model.k));
  w.u32(static_cast<uint32_t>(model.layout.a_exclusive.end));
  w.u32(static_cast<uint32_t>(model.layout.b_exclusive.end));
  w.u32(static_cast<uint32_t>(model.layout.shared.end));
  if (model.arch == Arch::DSF) {
    w.u32(static_cast<uint32_t>(model.dsf_designated->range.begin));
    w.u32(static_cast<uint32_t>(model.dsf_designated->range.end));
    w.f64(model.dsf_designated->k_multiplier);
  }
  // Encoders are serialized in the logical d x M orientation.
  write_tensor(w, model.w_enc_a, true);
  write_tensor(w, model.w_enc_b, true);
  write_vec(w, model.b_enc);
  write_tensor(w, model.w_dec_a, false);
  write_tensor(w, model.w_dec_b, false);
  write_vec(w, model.b_dec_a);
  write_vec(w, model.b_dec_b);
  w.close();
}

CrosscoderModel load_checkpoint(const std::string& path) {
  Reader r(path);
  r.magic("XCKP");
  const uint32_t version = r.u32();
  if (version != 1) throw io_error("unsupported XCKP version in " + path);
  CrosscoderModel m;
  m.arch = static_cast<Arch>(r.u8());
  m.d_a = r.u32();
  m.d_b = r.u32();
  m.dict_size = r.u32();
  m.k = r.u32();
  const int64_t a_end = r.u32();
  const int64_t b_end = r.u32();
  const int64_t s_end = r.u32();
  m.layout.a_exclusive = {0, a_end};
  m.layout.b_exclusive = {a_end, b_end};
  m.layout.shared = {b_end, s_end};
  m.layout.dict_size = m.dict_size;
  if (s_end != m.dict_size) throw io_error("inconsistent partition boundaries in " + path);
  if (m.arch == Arch::DSF) {
    DsfDesignated d;
    d.range.begin = r.u32();
    d.range.end = r.u32();
    d.k_multiplier = r.f64();
    m.dsf_designated = d;
  }
  m.w_enc_a = read_tensor(r, m.dict_size, m.d_a, true);
  m.w_enc_b = read_tensor(r, m.dict_size, m.d_b, true);
  m.b_enc = read_vec(r, m.dict_size);
  m.w_dec_a = read_tensor(r, m.dict_size, m.d_a, false);
  m.w_dec_b = read_tensor(r, m.dict_size, m.d_b, false);
  m.b_dec_a = read_vec(r, m.d_a);
  m.b_dec_b = read_vec(r, m.d_b);
  m.rebuild_routing();
  return m;
}

void save_stitch(const StitchMap& map, const std::string& path) {
  Writer w(path);
  w.bytes("XSTC", 4);
  w.u32(1);
  w.u32(static_cast<uint32_t>(map.w.cols));  // d_A
  w.u32(static_cast<uint32_t>(map.w.rows));  // d_B
  w.u8(map.has_inverse ? 1 : 0);
  w.f64(map.inversion_weight);
  w.f64(map.fit_mse);
  w.f64(map.fit_mse_inverse);
  write_tensor(w, map.w, false);
  write_vec(w, map.b);
  if (map.has_inverse) {
    write_tensor(w, map.w_inv, false);
    write_vec(w, map.b_inv);
  }
  w.close();
}

StitchMap load_stitch(const std::string& path) {
  Reader r(path);
  r.magic("XSTC");
  const uint32_t version = r.u32();
  if (version != 1) throw io_error("unsupported XSTC version in " + path);
  const int64_t d_a = r.u32();
  const int64_t d_b = r.u32();
  StitchMap map;
  map.has_inverse = r.u8() != 0;
  map.inversion_weight = r.f64();
  map.fit_mse = r.f64();
  map.fit_mse_inverse = r.f64();
  map.w = read_tensor(r, d_b, d_a, false);
  map.b = read_vec(r, d_b);
  if (map.has_inverse) {
    map.w_inv = read_tensor(r, d_a, d_b, false);
    map.b_inv = read_vec(r, d_a);
  }
  return map;
}

void save_activation_dump(const ActivationPairBatch& batch, const std::string& path) {
  Writer w(path);
  w.bytes("XDIF", 4);
  w.u32(1);
  w.u32(static_cast<uint32_t>(batch.x_a.cols));
  w.u32(static_cast<uint32_t>(batch.x_b.cols));
  w.u64(static_cast<uint64_t>(batch.rows()));
  write_tensor(w, batch.x_a, false);
  write_tensor(w, batch.x_b, false);
  w.close();
}

ActivationPairBatch load_activation_dump(const std::string& path) {
  Reader r(path);
  r.magic("XDIF");
  const uint32_t version = r.u32();
  if (version != 1) throw io_error("unsupported XDIF version in " + path);
  const int64_t d_a = r.u32();
  const int64_t d_b = r.u32();
  const int64_t rows = static_cast<int64_t>(r.u64());
  ActivationPairBatch b;
  b.x_a = read_tensor(r, rows, d_a, false);
  b.x_b = read_tensor(r, rows, d_b, false);
  return b;
}

}  // namespace crossdiff

#include "stear/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "stear/error.hpp"

namespace stear {

namespace {

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void tensor(const std::string& name, const std::vector<std::uint64_t>& dims,
              std::span<const double> data) {
    u32(static_cast<std::uint32_t>(name.size()));
    raw(name.data(), name.size());
    u32(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) u64(d);
    for (double x : data) f64(x);
  }

  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      std::ostringstream os;
      os << "file truncated while reading " << what << " (offset " << pos_ << ", need " << n
         << " bytes, have " << bytes_.size() - pos_ << ")";
      fail(ErrorCode::kTruncated, os.str());
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

  struct Tensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
  };

  Tensor tensor() {
    Tensor t;
    const std::uint32_t name_len = u32("tensor name length");
    t.name = str(name_len, "tensor name");
    const std::uint32_t rank = u32("tensor rank");
    if (rank > 8) fail(ErrorCode::kShape, "tensor " + t.name + " has implausible rank");
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.dims.push_back(u64("tensor dims"));
      count *= t.dims.back();
    }
    if (count > (bytes_.size() - pos_) / 8) {
      fail(ErrorCode::kTruncated, "file truncated inside payload of tensor " + t.name);
    }
    t.data.resize(count);
    for (auto& x : t.data) x = f64("tensor payload");
    return t;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void check_magic(Reader& r, const char (&magic)[8]) {
  const std::string got = r.str(8, "magic header");
  if (std::memcmp(got.data(), magic, 8) != 0) {
    fail(ErrorCode::kVersion, "bad magic header '" + got + "', expected '" +
                                  std::string(magic, 8) + "'");
  }
  const std::uint32_t version = r.u32("format version");
  if (version != kFormatVersion) {
    std::ostringstream os;
    os << "unsupported format version " << version << " (expected " << kFormatVersion << ")";
    fail(ErrorCode::kVersion, os.str());
  }
}

// Tensor views of the weights in canonical order.
struct TensorRef {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double>* data;
};

template <typename W>
std::vector<TensorRef> tensor_refs(W& w) {
  const ModelConfig& c = w.config;
  auto mat = [](const std::string& n, auto& m) {
    return TensorRef{n, {m.rows, m.cols}, const_cast<std::vector<double>*>(&m.data)};
  };
  auto vec = [](const std::string& n, auto& v) {
    return TensorRef{n, {v.size()}, const_cast<std::vector<double>*>(&v)};
  };
  std::vector<TensorRef> refs;
  refs.push_back(mat("token_embedding", w.token_embedding));
  refs.push_back(mat("position_embedding", w.position_embedding));
  for (std::size_t l = 1; l <= c.num_layers; ++l) {
    auto& lw = w.layers[l - 1];
    const std::string p = "layers." + std::to_string(l) + ".";
    refs.push_back(vec(p + "ln_self.scale", lw.ln_self_scale));
    refs.push_back(vec(p + "ln_self.shift", lw.ln_self_shift));
    refs.push_back(mat(p + "self.q", lw.self_q));
    refs.push_back(mat(p + "self.k", lw.self_k));
    refs.push_back(mat(p + "self.v", lw.self_v));
    refs.push_back(mat(p + "self.o", lw.self_o));
    refs.push_back(vec(p + "ln_cross.scale", lw.ln_cross_scale));
    refs.push_back(vec(p + "ln_cross.shift", lw.ln_cross_shift));
    refs.push_back(mat(p + "cross.q", lw.cross_q));
    refs.push_back(mat(p + "cross.k", lw.cross_k));
    refs.push_back(mat(p + "cross.v", lw.cross_v));
    refs.push_back(mat(p + "cross.o", lw.cross_o));
    refs.push_back(vec(p + "ln_ffn.scale", lw.ln_ffn_scale));
    refs.push_back(vec(p + "ln_ffn.shift", lw.ln_ffn_shift));
    refs.push_back(mat(p + "ffn.up", lw.ffn_up));
    refs.push_back(mat(p + "ffn.down", lw.ffn_down));
  }
  refs.push_back(mat("visual_proj", w.visual_proj));
  refs.push_back(mat("slot_gain", w.slot_gain));
  refs.push_back(vec("final_norm.scale", w.final_norm_scale));
  refs.push_back(vec("final_norm.shift", w.final_norm_shift));
  refs.push_back(mat("lm_head", w.lm_head));
  return refs;
}

DecoderWeights empty_weights(const ModelConfig& c) {
  const std::size_t d = c.model_dim;
  DecoderWeights w;
  w.config = c;
  w.token_embedding = Mat(c.vocab_size, d);
  w.position_embedding = Mat(c.max_text_len, d);
  w.layers.resize(c.num_layers);
  for (auto& lw : w.layers) {
    for (Vec* v : {&lw.ln_self_scale, &lw.ln_self_shift, &lw.ln_cross_scale, &lw.ln_cross_shift,
                   &lw.ln_ffn_scale, &lw.ln_ffn_shift}) {
      v->assign(d, 0.0);
    }
    for (Mat* m : {&lw.self_q, &lw.self_k, &lw.self_v, &lw.self_o, &lw.cross_q, &lw.cross_k,
                   &lw.cross_v, &lw.cross_o}) {
      *m = Mat(d, d);
    }
    lw.ffn_up = Mat(d, c.ffn_dim);
    lw.ffn_down = Mat(c.ffn_dim, d);
  }
  w.visual_proj = Mat(c.visual_dim, d);
  w.slot_gain = Mat(c.max_frames, d);
  w.final_norm_scale.assign(d, 0.0);
  w.final_norm_shift.assign(d, 0.0);
  w.lm_head = Mat(d, c.vocab_size);
  return w;
}

std::string dims_string(const std::vector<std::uint64_t>& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << "]";
  return os.str();
}

}  // namespace

std::vector<std::string> weight_tensor_names(const ModelConfig& config) {
  DecoderWeights w = empty_weights(config);
  std::vector<std::string> names;
  for (const auto& r : tensor_refs(w)) names.push_back(r.name);
  return names;
}

std::vector<std::uint8_t> serialize_weights(const DecoderWeights& weights) {
  weights.validate();
  const ModelConfig& c = weights.config;
  Writer w;
  w.raw(kWeightsMagic, 8);
  w.u32(kFormatVersion);
  for (std::size_t v : {c.num_layers, c.model_dim, c.num_heads, c.vocab_size, c.ffn_dim,
                        c.max_text_len, c.max_frames, c.visual_dim}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f64(c.eps);
  const auto refs = tensor_refs(weights);
  w.u32(static_cast<std::uint32_t>(refs.size()));
  for (const auto& r : refs) w.tensor(r.name, r.dims, *r.data);
  return w.take();
}

DecoderWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  check_magic(r, kWeightsMagic);
  ModelConfig c;
  c.num_layers = r.u32("config.num_layers");
  c.model_dim = r.u32("config.model_dim");
  c.num_heads = r.u32("config.num_heads");
  c.vocab_size = r.u32("config.vocab_size");
  c.ffn_dim = r.u32("config.ffn_dim");
  c.max_text_len = r.u32("config.max_text_len");
  c.max_frames = r.u32("config.max_frames");
  c.visual_dim = r.u32("config.visual_dim");
  c.eps = r.f64("config.eps");
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kShape, std::string("stored model config invalid: ") + e.what());
  }
  DecoderWeights w = empty_weights(c);
  auto refs = tensor_refs(w);
  const std::uint32_t count = r.u32("tensor count");
  if (count != refs.size()) {
    std::ostringstream os;
    os << "file holds " << count << " tensors, config implies " << refs.size();
    fail(ErrorCode::kShape, os.str());
  }
  for (auto& ref : refs) {
    auto t = r.tensor();
    if (t.name != ref.name) {
      fail(ErrorCode::kShape, "expected tensor '" + ref.name + "', found '" + t.name + "'");
    }
    if (t.dims != ref.dims) {
      fail(ErrorCode::kShape, "tensor " + t.name + " has dims " + dims_string(t.dims) +
                                  ", expected " + dims_string(ref.dims));
    }
    *ref.data = std::move(t.data);
  }
  if (!r.done()) fail(ErrorCode::kShape, "trailing bytes after last tensor");
  return w;
}

std::vector<std::uint8_t> serialize_grids(const std::vector<VisualTokenGrid>& grids) {
  Writer w;
  w.raw(kGridMagic, 8);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(grids.size()));
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& g = grids[i];
    g.validate();
    w.tensor("grid/" + std::to_string(i), {g.positions, g.frames, g.dim}, g.tokens.data);
  }
  return w.take();
}

std::vector<VisualTokenGrid> deserialize_grids(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  check_magic(r, kGridMagic);
  const std::uint32_t count = r.u32("grid count");
  std::vector<VisualTokenGrid> grids;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto t = r.tensor();
    if (t.name != "grid/" + std::to_string(i) || t.dims.size() != 3) {
      fail(ErrorCode::kShape, "unexpected grid tensor '" + t.name + "' " + dims_string(t.dims));
    }
    VisualTokenGrid g(t.dims[0], t.dims[1], t.dims[2]);
    g.tokens.data = std::move(t.data);
    grids.push_back(std::move(g));
  }
  if (!r.done()) fail(ErrorCode::kShape, "trailing bytes after last grid");
  return grids;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::kIo, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot rename onto '" + path.string() + "': " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                    text.size()));
}

void save_weights(const DecoderWeights& weights, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_weights(weights));
}

DecoderWeights load_weights(const std::filesystem::path& path) {
  return deserialize_weights(read_file(path));
}

void save_grids(const std::vector<VisualTokenGrid>& grids, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_grids(grids));
}

std::vector<VisualTokenGrid> load_grids(const std::filesystem::path& path) {
  return deserialize_grids(read_file(path));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

}  // namespace stear

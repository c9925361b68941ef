#include "aesb/modelb.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace aesb {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::B1: return "B1";
    case Variant::B2: return "B2";
    case Variant::B3: return "B3";
    case Variant::B4: return "B4";
  }
  return "B?";
}

Variant parse_variant(std::string_view text) {
  if (text == "B1" || text == "b1") return Variant::B1;
  if (text == "B2" || text == "b2") return Variant::B2;
  if (text == "B3" || text == "b3") return Variant::B3;
  if (text == "B4" || text == "b4") return Variant::B4;
  throw ConfigError("unknown model variant '" + std::string(text) + "' (expected B1..B4)");
}

ModelConfig ModelConfig::for_variant(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.input_resolution = (v == Variant::B1 || v == Variant::B2) ? 227 : 192;
  c.cb3_kernel = (v == Variant::B1 || v == Variant::B3) ? 1 : 3;
  return c;
}

ModelConfig ModelConfig::with_widths(Index cb1, Index cb2, Index cb3, Index fc1) const {
  ModelConfig c = *this;
  c.cb1_channels = cb1;
  c.cb2_channels = cb2;
  c.cb3_channels = cb3;
  c.fc1_width = fc1;
  return c;
}

void ModelConfig::validate() const {
  const auto v = static_cast<std::uint32_t>(variant);
  if (v < 1 || v > 4) throw ConfigError("invalid model variant " + std::to_string(v));
  const Index expected_res = (variant == Variant::B1 || variant == Variant::B2) ? 227 : 192;
  if (input_resolution != expected_res) {
    throw ConfigError(to_string(variant) + " requires input resolution " +
                      std::to_string(expected_res) + ", got " + std::to_string(input_resolution));
  }
  const Index expected_kernel = (variant == Variant::B1 || variant == Variant::B3) ? 1 : 3;
  if (cb3_kernel != expected_kernel) {
    throw ConfigError(to_string(variant) + " requires a " + std::to_string(expected_kernel) +
                      "x" + std::to_string(expected_kernel) + " CB3 kernel");
  }
  if (cb1_channels <= 0 || cb2_channels <= 0 || cb3_channels <= 0 || fc1_width <= 0) {
    throw ConfigError("layer widths must be positive");
  }
  if (pool1 <= 0 || pool2 <= 0 || pool1 > input_resolution || pool2 > after_pool1()) {
    throw ConfigError("pooling windows do not fit the input resolution");
  }
  if (class_count != 8 || score_offset != 2) {
    throw ConfigError("the score domain is fixed at 8 classes (scores 2..9)");
  }
  if (!(bn_epsilon > 0) || !(bn_momentum > 0 && bn_momentum < 1)) {
    throw ConfigError("batchnorm epsilon must be > 0 and momentum in (0,1)");
  }
}

Index trainable_parameter_count(const ModelConfig& config) {
  const auto net = build<float>(config, 0);
  Index total = 0;
  for_each_trainable(net.params, [&](std::string_view, const auto& block) { total += block.size(); });
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'A', 'E', 'S', 'B'};
constexpr std::uint32_t kVersion = 1;

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint: truncated payload");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const Network<float>& net) {
  const ModelConfig& c = net.config;
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kVersion);

  w.u32(static_cast<std::uint32_t>(c.variant));
  for (Index v : {c.input_resolution, c.cb1_channels, c.cb2_channels, c.cb3_channels, c.cb3_kernel,
                  c.pool1, c.pool2, c.fc1_width, c.class_count, c.score_offset}) {
    w.u32(std::uint32_t(v));
  }
  w.f64(c.bn_epsilon);
  w.f64(c.bn_momentum);

  const TrainingMeta& m = net.meta;
  w.f64(m.learning_rate);
  w.f64(m.momentum);
  w.u32(m.batch_size);
  w.u64(m.seed);
  w.u32(m.epochs);
  w.u32(m.rsrl_iteration);

  std::uint32_t blocks = 0;
  for_each_block(net.params, [&](std::string_view, const auto&) { ++blocks; });
  w.u32(blocks);
  for_each_block(net.params, [&](std::string_view name, const auto& block) {
    w.u32(std::uint32_t(name.size()));
    w.raw(name.data(), name.size());
    w.u32(std::uint32_t(block.size()));
    for (Index i = 0; i < block.size(); ++i) w.f32(block.data()[i]);
  });
  return w.take();
}

Network<float> load_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw FormatError("checkpoint: bad magic (expected AESB)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }

  ModelConfig c;
  c.variant = static_cast<Variant>(r.u32());
  for (Index* v : {&c.input_resolution, &c.cb1_channels, &c.cb2_channels, &c.cb3_channels,
                   &c.cb3_kernel, &c.pool1, &c.pool2, &c.fc1_width, &c.class_count,
                   &c.score_offset}) {
    *v = Index(r.u32());
  }
  c.bn_epsilon = r.f64();
  c.bn_momentum = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid config record: ") + e.what());
  }

  TrainingMeta m;
  m.learning_rate = r.f64();
  m.momentum = r.f64();
  m.batch_size = r.u32();
  m.seed = r.u64();
  m.epochs = r.u32();
  m.rsrl_iteration = r.u32();

  Network<float> net = build<float>(c, m.seed);
  net.meta = m;

  std::uint32_t expected_blocks = 0;
  for_each_block(net.params, [&](std::string_view, const auto&) { ++expected_blocks; });
  if (r.u32() != expected_blocks) throw FormatError("checkpoint: unexpected block count");

  for_each_block(net.params, [&](std::string_view name, auto& block) {
    const std::string stored = r.str(r.u32());
    if (stored != name) {
      throw FormatError("checkpoint: expected block '" + std::string(name) + "', found '" +
                        stored + "'");
    }
    const std::uint32_t count = r.u32();
    if (Index(count) != block.size()) {
      throw FormatError("checkpoint: block '" + stored + "' has " + std::to_string(count) +
                        " values, config implies " + std::to_string(block.size()));
    }
    for (Index i = 0; i < block.size(); ++i) block.data()[i] = r.f32();
  });
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after last block");
  return net;
}

void write_checkpoint_file(const Network<float>& net, const std::string& path) {
  const auto bytes = save_checkpoint(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Network<float> read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace aesb

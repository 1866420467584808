#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "eqan/errors.hpp"
#include "eqan/model.hpp"

namespace eqan {

// Layout (little-endian):
//   "EQANCKPT" | u32 version | spec fields | u32 block count
//   per block: u16 name length, name bytes, u32 count, count x f32
//   u64 FNV-1a of every preceding byte
inline constexpr char kCheckpointMagic[8] = {'E', 'Q', 'A', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t k = 0; k < len; ++k) {
    h ^= p[k];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  const std::vector<char>& data() const noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const noexcept { return pos_; }
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint truncated", pos_);
  }

 private:
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<char> serialize_model(const Model<T>& m) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& s = m.spec;
  for (std::uint32_t v : {s.layers, s.channels, s.dim, static_cast<std::uint32_t>(s.mode),
                          static_cast<std::uint32_t>(s.solver), static_cast<std::uint32_t>(s.arch),
                          static_cast<std::uint32_t>(s.unary), static_cast<std::uint32_t>(s.decision_all),
                          static_cast<std::uint32_t>(s.learn_solver), static_cast<std::uint32_t>(s.ste_into_features),
                          s.naive_steps, s.sinkhorn_T, s.decision_T_train, s.decision_T_eval})
    w.put<std::uint32_t>(v);
  w.put<double>(s.gamma);
  w.put<double>(s.sigma_init);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.params.size()));
  for (const auto& p : m.params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.put<std::uint8_t>(p.trainable ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.size()));
    for (T v : p.value) w.put<float>(static_cast<float>(v));
  }
  const auto& d = w.data();
  const std::uint64_t h = fnv1a(d.data(), d.size());
  std::vector<char> out = d;
  out.insert(out.end(), reinterpret_cast<const char*>(&h), reinterpret_cast<const char*>(&h) + sizeof(h));
  return out;
}

inline Model<float> deserialize_model(const std::vector<char>& buf) {
  if (buf.size() < sizeof(kCheckpointMagic) + 4 + 8) throw FormatError("checkpoint truncated", buf.size());
  detail::ByteReader r(buf, buf.size() - 8);
  if (r.str(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
    throw FormatError("checkpoint: bad magic", 0);
  const std::size_t voff = r.offset();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: unsupported version " + std::to_string(version), voff);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a(buf.data(), buf.size() - 8)) throw FormatError("checkpoint: checksum mismatch", buf.size() - 8);
  Model<float> m;
  auto& s = m.spec;
  s.layers = r.get<std::uint32_t>();
  s.channels = r.get<std::uint32_t>();
  s.dim = r.get<std::uint32_t>();
  s.mode = static_cast<Mode>(r.get<std::uint32_t>());
  s.solver = static_cast<SolverKind>(r.get<std::uint32_t>());
  s.arch = static_cast<Architecture>(r.get<std::uint32_t>());
  s.unary = static_cast<UnaryMode>(r.get<std::uint32_t>());
  s.decision_all = r.get<std::uint32_t>() != 0;
  s.learn_solver = r.get<std::uint32_t>() != 0;
  s.ste_into_features = r.get<std::uint32_t>() != 0;
  s.naive_steps = r.get<std::uint32_t>();
  s.sinkhorn_T = r.get<std::uint32_t>();
  s.decision_T_train = r.get<std::uint32_t>();
  s.decision_T_eval = r.get<std::uint32_t>();
  s.gamma = r.get<double>();
  s.sigma_init = r.get<double>();
  const auto blocks = r.get<std::uint32_t>();
  for (std::uint32_t b = 0; b < blocks; ++b) {
    ParamBlock<float> p;
    p.name = r.str(r.get<std::uint16_t>());
    p.trainable = r.get<std::uint8_t>() != 0;
    const auto count = r.get<std::uint32_t>();
    r.need(static_cast<std::size_t>(count) * 4);
    p.value.resize(count);
    for (auto& v : p.value) v = r.get<float>();
    m.params.push_back(std::move(p));
  }
  if (r.offset() != buf.size() - 8) throw FormatError("checkpoint: trailing bytes", r.offset());
  const std::size_t spec_off = sizeof(kCheckpointMagic) + 4;
  if (static_cast<std::uint32_t>(s.mode) > 2 || static_cast<std::uint32_t>(s.solver) > 2 ||
      static_cast<std::uint32_t>(s.arch) > 1 || static_cast<std::uint32_t>(s.unary) > 1)
    throw FormatError("checkpoint: enum field out of range", spec_off);
  Model<float> layout;
  try {
    layout = init_model<float>(s, 0);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: invalid model spec: ") + e.what(), spec_off);
  }
  if (layout.params.size() != m.params.size()) throw FormatError("checkpoint: block count does not match spec", spec_off);
  for (std::size_t b = 0; b < m.params.size(); ++b)
    if (layout.params[b].name != m.params[b].name || layout.params[b].value.size() != m.params[b].value.size())
      throw FormatError("checkpoint: block '" + m.params[b].name + "' does not match spec layout", spec_off);
  return m;
}

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  const auto bytes = serialize_model(m);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open checkpoint for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("failed writing checkpoint: " + path);
  }
  nlohmann::json side = {{"format_version", kCheckpointVersion}, {"spec", to_json(m.spec)}};
  for (const auto& p : m.params) side["blocks"].push_back({{"name", p.name}, {"count", p.value.size()}});
  std::ofstream j(path + ".json", std::ios::trunc);
  j << side.dump(2) << '\n';
}

inline Model<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(buf);
}

}  // namespace eqan

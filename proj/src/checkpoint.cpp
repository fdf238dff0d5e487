#include "capsnet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "capsnet/types.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes raw little-endian scalars");

namespace capsnet {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'N', 'E', 'T', '1'};

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u16(std::string& out, uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); }
void put_i64(std::string& out, int64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

// Cursor over the whole file image; every read is bounds-checked so a
// truncated or corrupted file fails before any model state is touched.
struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw FormatError("checkpoint " + path + ": truncated at offset " + std::to_string(pos) +
                        " reading " + what);
    }
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v;
    std::memcpy(&v, buf.data() + pos, 2);
    pos += 2;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(buf[pos++]);
  }
  int64_t i64(const char* what) {
    need(8, what);
    int64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, CapsNet<T>& net) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));

  std::string cfg_json = net.cfg.to_json();
  if (cfg_json.size() > UINT32_MAX) throw FormatError("checkpoint config too large");
  put_u32(out, static_cast<uint32_t>(cfg_json.size()));
  out += cfg_json;

  auto params = net.parameters();
  put_u32(out, static_cast<uint32_t>(params.size()));
  for (auto& p : params) {
    if (p.name.size() > UINT16_MAX) throw FormatError("parameter name too long: " + p.name);
    put_u16(out, static_cast<uint16_t>(p.name.size()));
    out += p.name;
    const auto& dims = p.tensor.shape();
    out.push_back(static_cast<char>(dims.size()));
    for (int64_t d : dims) put_i64(out, d);
    const T* src = p.tensor.data();
    for (int64_t i = 0; i < p.tensor.numel(); ++i) {
      float f = static_cast<float>(src[i]);
      out.append(reinterpret_cast<const char*>(&f), 4);
    }
  }

  std::ofstream fs(path, std::ios::binary | std::ios::trunc);
  if (!fs) throw InputError("cannot open for writing: " + path);
  fs.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!fs) throw InputError("write failed: " + path);
}

template <typename T>
CapsNet<T> load_checkpoint(const std::string& path) {
  std::ifstream fs(path, std::ios::binary);
  if (!fs) throw InputError("cannot open: " + path);
  std::ostringstream ss;
  ss << fs.rdbuf();
  std::string buf = ss.str();

  Reader r{buf, 0, path};
  std::string magic = r.bytes(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint " + path + ": bad magic (not a checkpoint file)");
  }

  uint32_t cfg_len = r.u32("config length");
  std::string cfg_json = r.bytes(cfg_len, "config JSON");
  ModelConfig cfg = ModelConfig::from_json(cfg_json);

  // Parse every record before constructing the model: a corrupted file must
  // not yield a partially filled network.
  uint32_t n_params = r.u32("parameter count");
  struct Record {
    std::string name;
    std::vector<int64_t> dims;
    size_t data_pos;
    int64_t numel;
  };
  std::vector<Record> records;
  records.reserve(n_params);
  std::unordered_set<std::string> seen;
  for (uint32_t k = 0; k < n_params; ++k) {
    uint16_t name_len = r.u16("parameter name length");
    std::string name = r.bytes(name_len, "parameter name");
    if (!seen.insert(name).second) {
      throw FormatError("checkpoint " + path + ": duplicate parameter '" + name + "'");
    }
    uint8_t rank = r.u8("parameter rank");
    std::vector<int64_t> dims(rank);
    int64_t numel = 1;
    for (uint8_t a = 0; a < rank; ++a) {
      dims[a] = r.i64("parameter dim");
      if (dims[a] <= 0) {
        throw FormatError("checkpoint " + path + ": parameter '" + name + "' has non-positive dim");
      }
      numel *= dims[a];
    }
    size_t data_pos = r.pos;
    r.need(static_cast<size_t>(numel) * 4, "parameter data");
    r.pos += static_cast<size_t>(numel) * 4;
    records.push_back({std::move(name), std::move(dims), data_pos, numel});
  }
  if (r.pos != buf.size()) {
    throw FormatError("checkpoint " + path + ": " + std::to_string(buf.size() - r.pos) +
                      " trailing bytes");
  }

  CapsNet<T> net = CapsNet<T>::init(cfg, 0);
  auto params = net.parameters();
  std::unordered_map<std::string, Tensor<T>*> by_name;
  for (auto& p : params) by_name[p.name] = &p.tensor;

  std::unordered_set<std::string> filled;
  for (const auto& rec : records) {
    auto it = by_name.find(rec.name);
    if (it == by_name.end()) {
      throw FormatError("checkpoint " + path + ": unknown parameter '" + rec.name + "'");
    }
    Tensor<T>& t = *it->second;
    if (t.shape() != rec.dims) {
      throw FormatError("checkpoint " + path + ": parameter '" + rec.name + "': expected shape " +
                        shape_str(t.shape()) + " got " + shape_str(rec.dims));
    }
    T* dst = t.data();
    const char* src = buf.data() + rec.data_pos;
    for (int64_t i = 0; i < rec.numel; ++i) {
      float f;
      std::memcpy(&f, src + i * 4, 4);
      dst[i] = static_cast<T>(f);
    }
    filled.insert(rec.name);
  }
  for (auto& p : params) {
    if (!filled.count(p.name)) {
      throw FormatError("checkpoint " + path + ": missing parameter '" + p.name + "'");
    }
  }
  return net;
}

#define INSTANTIATE_CHECKPOINT(T)                                    \
  template void save_checkpoint<T>(const std::string&, CapsNet<T>&); \
  template CapsNet<T> load_checkpoint<T>(const std::string&);

INSTANTIATE_CHECKPOINT(float)
INSTANTIATE_CHECKPOINT(double)

}  // namespace capsnet

#include "traice3d/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace traice3d {

static_assert(std::endian::native == std::endian::little, "TR3D I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'R', '3', 'D'};

template <class T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  const char* at(std::size_t p) const { return bytes_.data() + p; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("truncated TR3D checkpoint");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, Checkpoint::kVersion);
  const std::string meta = ckpt.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (Index e : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    put<std::uint64_t>(out, offset);
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
  }
  for (const auto& entry : ckpt.tensors) {
    const Tensor& t = entry.second;
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string(kMagic, 4)) throw std::runtime_error("not a TR3D checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    throw std::runtime_error("unsupported TR3D version " + std::to_string(version));
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint64_t>();
  ckpt.metadata = nlohmann::json::parse(r.take(static_cast<std::size_t>(meta_len)));
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> index;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.take(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    e.offset = r.get<std::uint64_t>();
    index.push_back(std::move(e));
  }
  const std::size_t payload = r.pos();
  for (auto& e : index) {
    const Index n = shape_numel(e.shape);
    const std::size_t begin = payload + e.offset;
    if (begin + static_cast<std::size_t>(n) * sizeof(float) > r.size())
      throw std::runtime_error("TR3D payload truncated for tensor " + e.name);
    std::vector<float> values(static_cast<std::size_t>(n));
    std::memcpy(values.data(), r.at(begin), values.size() * sizeof(float));
    ckpt.tensors.emplace_back(e.name, Tensor(e.shape, std::move(values)));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const NamedTensors& named, nlohmann::json metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  for (const auto& nt : named) ckpt.tensors.emplace_back(nt.name, nt.tensor.detach());
  return ckpt;
}

void load_into(const Checkpoint& ckpt, NamedTensors& named) {
  for (auto& nt : named) {
    const Tensor* src = ckpt.find(nt.name);
    if (!src) throw std::runtime_error("checkpoint is missing tensor " + nt.name);
    if (src->shape() != nt.tensor.shape())
      throw ShapeError("tensor " + nt.name + " has shape " + shape_string(src->shape()) +
                       " in checkpoint but " + shape_string(nt.tensor.shape()) + " in model");
    std::copy(src->values().begin(), src->values().end(), nt.tensor.values().begin());
  }
}

}  // namespace traice3d

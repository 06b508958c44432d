#include "fgss/train/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace fgss::train {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'G', 'S', 'S'};
// Far above any real tensor, low enough to reject garbage before allocating.
constexpr std::uint32_t kMaxNameLen = 4096;
constexpr std::uint32_t kMaxDims = 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (buf.size() - pos < n) throw ArchiveError("tensor archive truncated at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
};

std::vector<std::uint32_t> dims_of(const nn::Tensor<float>& t) {
  const auto& s = t.shape();
  return {static_cast<std::uint32_t>(s[0]), static_cast<std::uint32_t>(s[1]), static_cast<std::uint32_t>(s[2]),
          static_cast<std::uint32_t>(s[3])};
}

void copy_into(const NamedTensor* nt, const std::string& name, nn::Tensor<float>& t) {
  if (!nt) throw ArchiveError("archive is missing tensor '" + name + "'");
  if (nt->dims != dims_of(t)) {
    throw ArchiveError("tensor '" + name + "' has shape mismatch: archive vs model " + nn::shape_string(t.shape()));
  }
  std::copy(nt->data.begin(), nt->data.end(), t.data());
}

}  // namespace

void TensorArchive::add(std::string name, std::vector<std::uint32_t> dims, std::vector<float> data) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  if (n != data.size()) throw ArchiveError("tensor '" + name + "': dims do not match data length");
  if (dims.size() > kMaxDims) throw ArchiveError("tensor '" + name + "': too many dimensions");
  if (find(name)) throw ArchiveError("duplicate tensor name '" + name + "'");
  tensors_.push_back({std::move(name), std::move(dims), std::move(data)});
}

void TensorArchive::add(const std::string& name, const nn::Tensor<float>& t) { add(name, dims_of(t), t.vec()); }

const NamedTensor* TensorArchive::find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> TensorArchive::to_bytes() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), p, p + t.data.size() * sizeof(float));
  }
  return out;
}

TensorArchive TensorArchive::from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ArchiveError("not a tensor archive (bad magic)");
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw ArchiveError("unsupported archive version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  TensorArchive ar;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    if (len > kMaxNameLen) throw ArchiveError("tensor name too long");
    r.need(len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
    r.pos += len;
    const std::uint32_t ndim = r.u32();
    if (ndim > kMaxDims) throw ArchiveError("tensor '" + name + "' has too many dimensions");
    std::vector<std::uint32_t> dims(ndim);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.u32();
      n *= d;
    }
    if (n > (bytes.size() - r.pos) / sizeof(float)) throw ArchiveError("tensor '" + name + "' truncated");
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + r.pos, n * sizeof(float));
    r.pos += n * sizeof(float);
    ar.add(std::move(name), std::move(dims), std::move(data));
  }
  if (r.pos != bytes.size()) throw ArchiveError("trailing bytes after last tensor");
  return ar;
}

void TensorArchive::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = to_bytes();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ArchiveError("cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ArchiveError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

void store(TensorArchive& ar, const nn::ParamList<float>& list) {
  for (const auto& p : list.params) ar.add(p.name, p.param->value);
  for (const auto& b : list.buffers) ar.add(b.name, *b.tensor);
}

void store(TensorArchive& ar, const std::vector<nn::BufferRef<float>>& buffers) {
  for (const auto& b : buffers) ar.add(b.name, *b.tensor);
}

void restore(const TensorArchive& ar, nn::ParamList<float>& list) {
  for (auto& p : list.params) copy_into(ar.find(p.name), p.name, p.param->value);
  for (auto& b : list.buffers) copy_into(ar.find(b.name), b.name, *b.tensor);
}

void restore(const TensorArchive& ar, const std::vector<nn::BufferRef<float>>& buffers) {
  for (const auto& b : buffers) copy_into(ar.find(b.name), b.name, *b.tensor);
}

}  // namespace fgss::train

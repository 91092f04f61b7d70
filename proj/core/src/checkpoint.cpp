// SPDX-License-Identifier: Apache-2.0
#include "dmtl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>
#include <set>

#include "dmtl/io.hpp"

namespace dmtl::ckpt {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor archive assumes a little-endian host");

constexpr char kMagic[8] = {'D', 'M', 'T', 'L', 'T', 'E', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("tensor archive is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensors(const std::vector<NamedTensor>& entries) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.shape()) put<std::int64_t>(out, d);
    const auto v = e.value.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw Error("not a tensor archive (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw Error("unsupported tensor archive version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw Error("tensor archive entry '" + e.name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::int64_t>();
      if (dim < 0 || dim > (std::int64_t{1} << 31)) throw Error("tensor archive entry '" + e.name + "' has a bad dim");
      shape.push_back(static_cast<int>(dim));
    }
    e.value = Tensor(shape);
    r.raw(e.value.values().data(), e.value.numel() * sizeof(double));
    out.push_back(std::move(e));
  }
  if (!r.done()) throw Error("tensor archive has trailing bytes");
  return out;
}

void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  io::write_file_atomic(path, encode_tensors(entries));
}

std::vector<NamedTensor> read_tensors(const std::filesystem::path& path) {
  try {
    return decode_tensors(io::read_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::vector<NamedTensor> registry_state(const nn::ParameterRegistry& reg, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& p : reg.parameters()) out.push_back({prefix + p.name, p.var.value()});
  for (const auto& b : reg.buffers()) out.push_back({prefix + b.name, b.var.value()});
  return out;
}

void load_registry_state(nn::ParameterRegistry& reg, const std::vector<NamedTensor>& entries,
                         const std::string& prefix) {
  std::map<std::string, const Tensor*> byname;
  for (const auto& e : entries)
    if (e.name.compare(0, prefix.size(), prefix) == 0) byname[e.name.substr(prefix.size())] = &e.value;
  std::vector<std::string> problems;
  std::set<std::string> used;
  auto assign = [&](const nn::NamedVar& nv) {
    auto it = byname.find(nv.name);
    if (it == byname.end()) {
      problems.push_back("missing " + prefix + nv.name);
      return;
    }
    used.insert(nv.name);
    if (it->second->shape() != nv.var.shape()) {
      problems.push_back("shape of " + prefix + nv.name + " is " + to_string(it->second->shape()) + ", expected " +
                         to_string(nv.var.shape()));
      return;
    }
  };
  for (const auto& p : reg.parameters()) assign(p);
  for (const auto& b : reg.buffers()) assign(b);
  for (const auto& [name, _] : byname)
    if (!used.count(name)) problems.push_back("unexpected " + prefix + name);
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (std::size_t i = 0; i < problems.size() && i < 10; ++i) msg += "\n  " + problems[i];
    if (problems.size() > 10) msg += "\n  ... " + std::to_string(problems.size() - 10) + " more";
    throw Error(msg);
  }
  for (const auto* list : {&reg.parameters(), &reg.buffers()})
    for (const auto& nv : *list) {
      ag::Var v = nv.var;
      v.mutable_value() = *byname.at(nv.name);
    }
}

}  // namespace dmtl::ckpt

#include "himtm/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "himtm/errors.hpp"

namespace himtm {

namespace {

constexpr char kMagic[8] = {'H', 'I', 'M', 'T', 'M', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    if (n > (std::uint64_t{1} << 32)) fail("implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw DataError("checkpoint " + path_ + ": " + why);
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Checkpoint make_checkpoint(const ParameterStore& store, std::string kind, std::string config_echo,
                           std::string rng_state) {
  Checkpoint ckpt{std::move(kind), std::move(config_echo), std::move(rng_state), {}};
  for (const auto& nt : store.all()) {
    auto d = nt.tensor.data();
    ckpt.tensors.push_back({nt.name, nt.tensor.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    put_string(os, ckpt.kind);
    put_string(os, ckpt.config_echo);
    put_string(os, ckpt.rng_state);
    put<std::uint64_t>(os, ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
      put_string(os, t.name);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    os.flush();
    if (!os) throw DataError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  Reader r(in, path);
  char magic[sizeof(kMagic)];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.kind = r.get_string();
  ckpt.config_echo = r.get_string();
  ckpt.rng_state = r.get_string();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.get_string();
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) r.fail("tensor '" + t.name + "' has implausible rank");
    for (std::uint32_t k = 0; k < ndim; ++k) t.shape.push_back(r.get<std::uint64_t>());
    t.data.resize(numel(t.shape));
    r.read(reinterpret_cast<char*>(t.data.data()), t.data.size() * sizeof(double));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

std::size_t restore_checkpoint(const Checkpoint& ckpt, ParameterStore& store,
                               const std::string& prefix) {
  std::size_t restored = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    if (!store.contains(t.name)) {
      throw ConfigError("checkpoint tensor '" + t.name + "' has no counterpart in the model");
    }
    Tensor dst = store.find(t.name);
    if (dst.shape() != t.shape) {
      throw ConfigError("checkpoint tensor '" + t.name + "' has shape " + to_string(t.shape) +
                        " but the model expects " + to_string(dst.shape()));
    }
    auto out = dst.mutable_data();
    std::copy(t.data.begin(), t.data.end(), out.begin());
    ++restored;
  }
  return restored;
}

}  // namespace himtm

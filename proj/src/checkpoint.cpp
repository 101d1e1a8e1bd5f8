#include "plm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace plm {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'B', 'K'};

template <typename T>
void put(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  U bits = std::bit_cast<U>(value);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(U));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_ + ": truncated checkpoint");
  }

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    unsigned char bytes[sizeof(U)];
    read(reinterpret_cast<char*>(bytes), sizeof(U));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
    return std::bit_cast<T>(bits);
  }

  const std::string& path() const { return path_; }

 private:
  std::istream& in_;
  std::string path_;
};

template <typename Scalar>
void write_data(std::ostream& out, const Tensor<Scalar>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  } else {
    for (Index i = 0; i < t.size(); ++i) put(out, t[i]);
  }
}

template <typename Scalar>
Tensor<Scalar> read_data(Reader& in, Shape shape) {
  Tensor<Scalar> t(std::move(shape));
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
  } else {
    for (Index i = 0; i < t.size(); ++i) t[i] = in.template get<Scalar>();
  }
  return t;
}

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

}  // namespace

template <typename Scalar>
void Checkpoint::add(const std::string& name, const Tensor<Scalar>& t) {
  if (find(name) != nullptr) throw FormatError("duplicate tensor name \"" + name + "\" in checkpoint");
  entries.push_back({name, t});
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::set<std::string> names;
  for (const auto& e : ckpt.entries) {
    if (!names.insert(e.name).second) throw FormatError("duplicate tensor name \"" + e.name + "\" in checkpoint");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  put(out, Checkpoint::kVersion);
  put(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    std::visit(
        [&](const auto& t) {
          using S = typename std::decay_t<decltype(t)>::Array::Scalar;
          put(out, static_cast<std::uint8_t>(std::is_same_v<S, float> ? 0 : 1));
          put(out, static_cast<std::uint32_t>(t.rank()));
          for (Index d : t.shape()) put(out, static_cast<std::uint64_t>(d));
          write_data(out, t);
        },
        e.tensor);
  }
  out.flush();
  if (!out) throw std::runtime_error("write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open " + path + " for reading");
  Reader in(file, path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint32_t>();
    if (len > (1u << 16)) throw FormatError(path + ": implausible name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto dtype = in.get<std::uint8_t>();
    if (dtype > 1) throw FormatError(path + ": unknown dtype tag " + std::to_string(dtype) + " for " + name);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 16) throw FormatError(path + ": implausible rank for " + name);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<Index>(in.get<std::uint64_t>()));
    if (dtype == 0) {
      ckpt.add(name, read_data<float>(in, std::move(shape)));
    } else {
      ckpt.add(name, read_data<double>(in, std::move(shape)));
    }
  }
  return ckpt;
}

template <typename Scalar>
Checkpoint snapshot(const ParamList<Scalar>& params) {
  Checkpoint ckpt;
  for (const auto& p : params) ckpt.add(p.name(), p.value());
  return ckpt;
}

template <typename Scalar>
void restore(const ParamList<Scalar>& params, const Checkpoint& ckpt) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.entries) by_name[e.name] = &e;
  std::vector<std::string> missing, extra;
  std::set<std::string> used;
  for (const auto& p : params) {
    auto it = by_name.find(p.name());
    if (it == by_name.end()) {
      missing.push_back(p.name());
    } else {
      used.insert(p.name());
    }
  }
  for (const auto& e : ckpt.entries) {
    if (!used.count(e.name)) extra.push_back(e.name);
  }
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "checkpoint does not match the model";
    if (!missing.empty()) msg += "; missing: " + join(missing);
    if (!extra.empty()) msg += "; unexpected: " + join(extra);
    throw CheckpointMismatch(msg);
  }
  for (auto p : params) {
    const auto* entry = by_name.at(p.name());
    const auto* t = std::get_if<Tensor<Scalar>>(&entry->tensor);
    if (t == nullptr) throw CheckpointMismatch(p.name() + ": stored with a different dtype");
    if (t->shape() != p.shape()) {
      throw CheckpointMismatch(p.name() + ": stored shape " + to_string(t->shape()) + ", model expects " +
                               to_string(p.shape()));
    }
    p.mutable_value() = *t;
  }
}

std::vector<std::string> differing_entries(const Checkpoint& a, const Checkpoint& b) {
  std::vector<std::string> out;
  for (const auto& e : a.entries) {
    const auto* other = b.find(e.name);
    if (other == nullptr || e.tensor.index() != other->tensor.index()) {
      out.push_back(e.name);
      continue;
    }
    const bool same = std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          const auto& u = std::get<T>(other->tensor);
          return t.shape() == u.shape() &&
                 std::memcmp(t.data(), u.data(), static_cast<std::size_t>(t.size()) * sizeof(*t.data())) == 0;
        },
        e.tensor);
    if (!same) out.push_back(e.name);
  }
  for (const auto& e : b.entries) {
    if (a.find(e.name) == nullptr) out.push_back(e.name);
  }
  return out;
}

template void Checkpoint::add(const std::string&, const Tensor<float>&);
template void Checkpoint::add(const std::string&, const Tensor<double>&);
template Checkpoint snapshot(const ParamList<float>&);
template Checkpoint snapshot(const ParamList<double>&);
template void restore(const ParamList<float>&, const Checkpoint&);
template void restore(const ParamList<double>&, const Checkpoint&);

}  // namespace plm

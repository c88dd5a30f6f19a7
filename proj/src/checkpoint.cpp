#include "salt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace salt {

namespace {

constexpr char kMagic[8] = {'S', 'A', 'L', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) put<std::uint64_t>(os, d);
  put_bytes(os, t.data.data(), t.data.size() * sizeof(double));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error(std::string("checkpoint truncated reading ") + what);
  return v;
}

std::string get_string(std::istream& is, const char* what) {
  auto n = get<std::uint32_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error(std::string("checkpoint truncated reading ") + what);
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const LmModel& model, const std::string& meta,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
  model.config.validate();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    put_bytes(os, kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);

    const LmConfig& c = model.config;
    put<std::uint64_t>(os, c.vocab_size);
    put<std::uint64_t>(os, c.max_len);
    put<std::uint64_t>(os, c.d_model);
    put<std::uint64_t>(os, c.n_layers);
    put<std::uint64_t>(os, c.n_heads);
    put<std::uint64_t>(os, c.d_ff);
    put<double>(os, c.prob_floor);
    put<double>(os, c.init_std);
    put<std::uint32_t>(os, c.bos_id);
    put_string(os, meta);

    for (std::size_t i = 0; i < model.params.size(); ++i)
      put_tensor(os, model.param_names[i], model.params[i]);
    for (const auto& [name, t] : extra) put_tensor(os, name, t);
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path + " is not a checkpoint file");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  LmConfig c;
  c.vocab_size = get<std::uint64_t>(is, "config");
  c.max_len = get<std::uint64_t>(is, "config");
  c.d_model = get<std::uint64_t>(is, "config");
  c.n_layers = get<std::uint64_t>(is, "config");
  c.n_heads = get<std::uint64_t>(is, "config");
  c.d_ff = get<std::uint64_t>(is, "config");
  c.prob_floor = get<double>(is, "config");
  c.init_std = get<double>(is, "config");
  c.bos_id = get<std::uint32_t>(is, "config");
  c.validate();

  LoadedCheckpoint out;
  out.meta = get_string(is, "meta");
  out.model.config = c;
  auto shapes = param_shapes(c);
  out.model.param_names.reserve(shapes.size());
  out.model.params.resize(shapes.size());
  std::vector<bool> seen(shapes.size(), false);
  for (auto& [name, shape] : shapes) out.model.param_names.push_back(name);

  while (true) {
    is.peek();
    if (is.eof()) break;
    std::string name = get_string(is, "tensor name");
    const auto rank = get<std::uint32_t>(is, "tensor rank");
    Tensor t;
    t.shape.resize(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape[d] = get<std::uint64_t>(is, "tensor dims");
      numel *= t.shape[d];
    }
    t.data.resize(numel);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint truncated reading tensor " + name);

    bool matched = false;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (shapes[i].first != name) continue;
      if (shapes[i].second != t.shape)
        throw std::runtime_error("checkpoint tensor " + name + " has shape " + t.shape_str());
      out.model.params[i] = std::move(t);
      seen[i] = true;
      matched = true;
      break;
    }
    if (!matched) out.extra.emplace_back(std::move(name), std::move(t));
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw std::runtime_error("checkpoint is missing parameter " + shapes[i].first);
  return out;
}

}  // namespace salt

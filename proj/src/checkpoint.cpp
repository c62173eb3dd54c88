#include "krrmix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace krrmix::model {

namespace {

constexpr const char* kMagic = "krrmix-checkpoint 1";

template <typename U>
void put_le(std::string& out, U bits) {
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
}

template <typename U>
U get_le(const unsigned char* p) {
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(p[b]) << (8 * b);
  return bits;
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

struct Entry {
  std::string shape;
  std::size_t offset = 0;
  std::size_t width = 0;
};

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     ModelWeights<T>& weights) {
  std::ostringstream manifest;
  std::string blob;
  std::size_t count = 0;
  std::ostringstream lines;
  weights.for_each([&](const std::string& name, Tensor<T>& t) {
    lines << name << ' ' << shape_token(t.shape()) << ' ' << blob.size() << ' ' << sizeof(T)
          << '\n';
    for (T v : t.data()) {
      if constexpr (sizeof(T) == 4) {
        put_le(blob, std::bit_cast<std::uint32_t>(v));
      } else {
        put_le(blob, std::bit_cast<std::uint64_t>(v));
      }
    }
    ++count;
  });
  manifest << kMagic << '\n'
           << "config_digest " << std::hex << std::setw(16) << std::setfill('0') << cfg.digest()
           << std::dec << '\n'
           << "params " << count << '\n'
           << lines.str() << "end\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  const std::string head = manifest.str();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

template <typename T>
ModelWeights<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw CheckpointError("bad magic");
  std::string key, digest;
  std::getline(in, line);
  std::istringstream(line) >> key >> digest;
  std::ostringstream expect;
  expect << std::hex << std::setw(16) << std::setfill('0') << cfg.digest();
  if (key != "config_digest" || digest != expect.str()) {
    throw CheckpointError("config digest mismatch: file " + digest + ", expected " +
                          expect.str());
  }
  std::size_t count = 0;
  std::getline(in, line);
  std::istringstream(line) >> key >> count;
  std::map<std::string, Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    std::getline(in, line);
    std::istringstream ls(line);
    std::string name;
    Entry e;
    ls >> name >> e.shape >> e.offset >> e.width;
    if (!ls || (e.width != 4 && e.width != 8)) throw CheckpointError("bad manifest line: " + line);
    entries[name] = e;
  }
  if (!std::getline(in, line) || line != "end") throw CheckpointError("missing manifest end");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

  ModelWeights<T> weights = init_weights<T>(cfg);
  std::size_t seen = 0;
  weights.for_each([&](const std::string& name, Tensor<T>& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("missing tensor " + name);
    const Entry& e = it->second;
    if (e.shape != shape_token(t.shape())) {
      throw CheckpointError("shape mismatch for " + name + ": " + e.shape);
    }
    if (e.offset + t.size() * e.width > blob.size()) throw CheckpointError("truncated blob");
    for (std::size_t j = 0; j < t.size(); ++j) {
      const unsigned char* p = bytes + e.offset + j * e.width;
      t[j] = e.width == 4 ? static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                          : static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(p)));
    }
    ++seen;
  });
  if (seen != entries.size()) throw CheckpointError("checkpoint has unexpected tensors");
  return weights;
}

template void save_checkpoint(const std::filesystem::path&, const ModelConfig&,
                              ModelWeights<float>&);
template void save_checkpoint(const std::filesystem::path&, const ModelConfig&,
                              ModelWeights<double>&);
template ModelWeights<float> load_checkpoint(const std::filesystem::path&, const ModelConfig&);
template ModelWeights<double> load_checkpoint(const std::filesystem::path&, const ModelConfig&);

}  // namespace krrmix::model

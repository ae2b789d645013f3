#include "prenet/checkpoint.hpp"

#include "json.hpp"

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace prenet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'R', 'E', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

std::uint64_t fnv1a(const unsigned char* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const fs::path& path) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint " + path.string() + " is truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void index_group(json& index, const std::map<std::string, StoredTensor>& group, const std::string& name,
                 std::uint64_t& offset) {
  for (const auto& [key, t] : group) {
    index.push_back({{"name", key}, {"group", name}, {"shape", t.shape}, {"dtype", t.dtype},
                     {"offset", offset}, {"nbytes", t.bytes.size()}});
    offset += t.bytes.size();
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  json index = json::array();
  std::uint64_t payload_size = 0;
  index_group(index, ck.model, "model", payload_size);
  index_group(index, ck.optim, "optim", payload_size);

  std::string payload;
  payload.reserve(std::size_t(payload_size));
  for (const auto* group : {&ck.model, &ck.optim})
    for (const auto& [key, t] : *group) payload.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());

  const json header = {
      {"schema_version", ck.schema_version},
      {"epoch", ck.epoch},
      {"num_classes", ck.num_classes},
      {"rng_state", ck.rng_state},
      {"best_val", ck.best_val},
      {"best_epoch", ck.best_epoch},
      {"config", ck.config_json.empty() ? json::object() : json::parse(ck.config_json)},
      {"class_names", ck.class_names},
      {"tensors", index},
      {"payload_bytes", payload_size},
      {"payload_fnv1a", fnv1a(reinterpret_cast<const unsigned char*>(payload.data()), payload.size())},
  };
  const std::string text = header.dump();

  std::string blob(kMagic, sizeof(kMagic));
  put(blob, kFormatVersion);
  put(blob, std::uint64_t(text.size()));
  blob += text;
  blob += payload;

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out.flush()) throw std::runtime_error("cannot write checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string blob = ss.str();

  if (blob.size() < sizeof(kMagic) || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint " + path.string() + " is not a checkpoint archive");
  std::size_t pos = sizeof(kMagic);
  const auto format = get<std::uint32_t>(blob, pos, path);
  if (format != kFormatVersion)
    throw std::runtime_error("checkpoint " + path.string() + " has unsupported format " + std::to_string(format));
  const auto header_len = get<std::uint64_t>(blob, pos, path);
  if (header_len > blob.size() - pos) throw std::runtime_error("checkpoint " + path.string() + " is truncated");

  json header;
  try {
    header = json::parse(blob.substr(pos, std::size_t(header_len)));
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + " has a corrupt header: " + e.what());
  }
  pos += std::size_t(header_len);

  Checkpoint ck;
  try {
    ck.schema_version = header.at("schema_version").get<int>();
    if (ck.schema_version != kCheckpointSchemaVersion)
      throw std::runtime_error("checkpoint " + path.string() + " has schema_version " + std::to_string(ck.schema_version) +
                               ", expected " + std::to_string(kCheckpointSchemaVersion));
    ck.epoch = header.at("epoch").get<int>();
    ck.num_classes = header.at("num_classes").get<int>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.best_val = header.at("best_val").get<double>();
    ck.best_epoch = header.at("best_epoch").get<int>();
    ck.config_json = header.at("config").dump();
    ck.class_names = header.at("class_names").get<std::vector<std::string>>();

    const auto payload_size = header.at("payload_bytes").get<std::uint64_t>();
    if (blob.size() - pos < payload_size) throw std::runtime_error("checkpoint " + path.string() + " is truncated");
    if (blob.size() - pos > payload_size) throw std::runtime_error("checkpoint " + path.string() + " has trailing bytes");
    const auto* payload = reinterpret_cast<const unsigned char*>(blob.data() + pos);
    if (fnv1a(payload, std::size_t(payload_size)) != header.at("payload_fnv1a").get<std::uint64_t>())
      throw std::runtime_error("checkpoint " + path.string() + " is corrupt (payload checksum mismatch)");

    for (const auto& t : header.at("tensors")) {
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("nbytes").get<std::uint64_t>();
      if (offset + nbytes > payload_size) throw std::runtime_error("checkpoint " + path.string() + " has a bad tensor index");
      StoredTensor s{t.at("shape").get<Shape>(), t.at("dtype").get<std::string>(),
                     std::vector<unsigned char>(payload + offset, payload + offset + nbytes)};
      const auto group = t.at("group").get<std::string>();
      auto& target = group == "model" ? ck.model : group == "optim" ? ck.optim
                     : throw std::runtime_error("checkpoint " + path.string() + " has unknown tensor group " + group);
      target.emplace(t.at("name").get<std::string>(), std::move(s));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + " has a malformed header: " + e.what());
  }
  return ck;
}

std::optional<fs::path> resolve_pretrained(const std::string& reference) {
  if (reference.empty()) return std::nullopt;
  if (fs::is_regular_file(reference)) return fs::path(reference);
  if (const char* cache = std::getenv("PRENET_CACHE")) {
    const fs::path candidate = fs::path(cache) / reference;
    if (fs::is_regular_file(candidate)) return candidate;
  }
  throw std::runtime_error("pretrained weights " + reference + " not found (also checked $PRENET_CACHE)");
}

}  // namespace prenet

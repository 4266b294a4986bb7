#include "volrep/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace volrep::io {

static_assert(std::endian::native == std::endian::little, "volrep file formats assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'V', 'O', 'L', 'R', 'E', 'P', 'C', 'K'};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed: " + path.string());
  return buf;
}

void write_f32(const std::filesystem::path& path, std::span<const float> data) {
  write_bytes(path, {reinterpret_cast<const unsigned char*>(data.data()), data.size_bytes()});
}

std::vector<float> read_f32(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() % sizeof(float) != 0) throw IoError("truncated float32 file: " + path.string());
  std::vector<float> out(bytes.size() / sizeof(float));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void save_archive(const std::filesystem::path& path, const json& meta, const nn::ParamList& params) {
  json header;
  header["meta"] = meta;
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    const auto count = static_cast<std::uint64_t>(p.var.value().size());
    table.push_back({{"name", p.name}, {"rows", p.var.rows()}, {"cols", p.var.cols()}, {"offset", offset}});
    offset += count;
  }
  header["tensors"] = table;
  const std::string h = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kArchiveVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t hlen = h.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.var.value().data()),
              static_cast<std::streamsize>(p.var.value().size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  constexpr std::size_t fixed = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a volrep archive: " + path.string());
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
  if (version != kArchiveVersion) {
    throw IoError("unsupported archive version " + std::to_string(version) + " in " + path.string());
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + sizeof(kMagic) + sizeof(version), sizeof(hlen));
  if (fixed + hlen > bytes.size()) throw IoError("truncated archive header: " + path.string());
  const json header = json::parse(std::string(bytes.begin() + fixed, bytes.begin() + static_cast<long>(fixed + hlen)));
  const std::size_t payload = fixed + hlen;

  Archive ar;
  ar.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<ad::Index>();
    const auto cols = t.at("cols").get<ad::Index>();
    const auto off = t.at("offset").get<std::uint64_t>();
    const std::size_t begin = payload + off * sizeof(double);
    const std::size_t len = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (begin + len > bytes.size()) throw IoError("truncated archive payload: " + path.string());
    nn::Matrix m(rows, cols);
    std::memcpy(m.data(), bytes.data() + begin, len);
    ar.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return ar;
}

void assign_params(const Archive& archive, const nn::ParamList& params) {
  for (const auto& p : params) {
    auto it = archive.tensors.find(p.name);
    if (it == archive.tensors.end()) throw IoError("archive is missing tensor " + p.name);
    if (it->second.rows() != p.var.rows() || it->second.cols() != p.var.cols()) {
      throw IoError("shape mismatch for tensor " + p.name);
    }
    auto v = p.var;
    v.mutable_value() = it->second;
  }
}

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (value.size() >= 2 && value.front() == '[' && value.back() == ']') value = value.substr(1, value.size() - 2);
    cfg.values_[key] = value;
  }
  return cfg;
}

KvConfig KvConfig::load(const std::filesystem::path& path) { return parse(read_text(path)); }

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KvConfig::get(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw IoError("config key '" + key + "' is not a number: " + it->second);
  }
}

long KvConfig::get(const std::string& key, long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stol(it->second);
  } catch (const std::exception&) {
    throw IoError("config key '" + key + "' is not an integer: " + it->second);
  }
}

int KvConfig::get(const std::string& key, int fallback) const {
  return static_cast<int>(get(key, static_cast<long>(fallback)));
}

std::vector<double> KvConfig::get_list(const std::string& key, const std::vector<double>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  std::stringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw IoError("config key '" + key + "' has a non-numeric element: " + item);
    }
  }
  return out;
}

}  // namespace volrep::io

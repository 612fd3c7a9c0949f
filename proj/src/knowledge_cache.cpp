#include "transagent/knowledge_cache.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <set>

#include "transagent/errors.hpp"

namespace transagent {

std::string to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::feature_stack: return "feature_stack";
    case PayloadKind::class_features: return "class_features";
    case PayloadKind::score_vector: return "score_vector";
    case PayloadKind::attention_map: return "attention_map";
    case PayloadKind::parameter: return "parameter";
  }
  return "unknown";
}

std::string to_string(CacheIssue::Kind k) {
  switch (k) {
    case CacheIssue::Kind::corruption: return "corruption";
    case CacheIssue::Kind::stale: return "stale";
    case CacheIssue::Kind::shape_drift: return "shape_drift";
    case CacheIssue::Kind::missing: return "missing";
    case CacheIssue::Kind::unknown_agent: return "unknown_agent";
    case CacheIssue::Kind::modality_mismatch: return "modality_mismatch";
  }
  return "unknown";
}

std::string RecordKey::str() const {
  std::string s;
  for (const std::string* part : {&agent_id, &dataset_id, &split, &key}) {
    s += *part;
    s += '\x1f';
  }
  return s;
}

void KnowledgeCacheRecord::validate() const {
  std::uint64_t product = 1;
  for (std::uint32_t d : shape) product *= d;
  if (shape.empty() || product != values.size()) {
    throw InvalidInput("record " + id.key + ": shape product " + std::to_string(product) + " != value count " +
                       std::to_string(values.size()));
  }
}

Matrix KnowledgeCacheRecord::as_matrix() const {
  validate();
  const Eigen::Index rows = shape.size() == 1 ? 1 : static_cast<Eigen::Index>(shape[0]);
  const Eigen::Index cols = static_cast<Eigen::Index>(values.size()) / std::max<Eigen::Index>(rows, 1);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = values[static_cast<std::size_t>(i * cols + j)];
  }
  return m;
}

KnowledgeCacheRecord make_record(RecordKey id, PayloadKind kind, const Matrix& values, DType dtype,
                                 std::uint64_t agent_fingerprint) {
  KnowledgeCacheRecord r;
  r.id = std::move(id);
  r.kind = kind;
  r.dtype = dtype;
  r.agent_fingerprint = agent_fingerprint;
  r.shape = {static_cast<std::uint32_t>(values.rows()), static_cast<std::uint32_t>(values.cols())};
  r.values.reserve(static_cast<std::size_t>(values.size()));
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) r.values.push_back(values(i, j));
  }
  return r;
}

namespace {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  std::vector<unsigned char>& bytes() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
  }
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + at_), len);
    at_ += len;
    return s;
  }
  void expect_magic() {
    need(4);
    if (std::memcmp(p_ + at_, kCacheMagic, 4) != 0) throw CorruptionError("cache: bad magic bytes");
    at_ += 4;
  }

 private:
  void need(std::size_t k) const {
    if (at_ + k > n_) throw CorruptionError("cache: truncated manifest");
  }
  std::uint64_t get(int k) {
    need(static_cast<std::size_t>(k));
    std::uint64_t v = 0;
    for (int i = 0; i < k; ++i) v |= static_cast<std::uint64_t>(p_[at_ + static_cast<std::size_t>(i)]) << (8 * i);
    at_ += static_cast<std::size_t>(k);
    return v;
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t at_ = 0;
};

std::uint32_t crc_of(const unsigned char* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; payloads here are far below 4 GiB.
  c = crc32(c, p, static_cast<uInt>(n));
  return static_cast<std::uint32_t>(c);
}

constexpr std::size_t kFooterSize = 8 + 4 + 4;

std::vector<unsigned char> encode_payload(const KnowledgeCacheRecord& r) {
  ByteWriter w;
  for (double v : r.values) {
    if (r.dtype == DType::f32) {
      w.f32(static_cast<float>(v));
    } else {
      w.f64(v);
    }
  }
  return std::move(w.bytes());
}

}  // namespace

void write_cache(const std::string& path, std::span<const KnowledgeCacheRecord> records,
                 std::uint64_t seed_fingerprint, const std::map<std::string, std::string>& metadata) {
  std::set<std::string> seen;
  for (const KnowledgeCacheRecord& r : records) {
    r.validate();
    if (r.shape.size() > 255) throw InvalidInput("record " + r.id.key + ": too many dimensions");
    if (!seen.insert(r.id.str()).second) {
      throw InvalidInput("write_cache: duplicate key (" + r.id.agent_id + ", " + r.id.dataset_id + ", " +
                         r.id.split + ", " + r.id.key + ")");
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");

  ByteWriter manifest;
  manifest.raw(kCacheMagic, 4);
  manifest.u16(kCacheVersion);
  manifest.u64(seed_fingerprint);
  manifest.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    manifest.str(k);
    manifest.str(v);
  }
  manifest.u32(static_cast<std::uint32_t>(records.size()));

  std::uint64_t offset = 0;
  for (const KnowledgeCacheRecord& r : records) {
    const std::vector<unsigned char> payload = encode_payload(r);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    manifest.str(r.id.agent_id);
    manifest.str(r.id.dataset_id);
    manifest.str(r.id.split);
    manifest.str(r.id.key);
    manifest.u8(static_cast<std::uint8_t>(r.kind));
    manifest.u8(static_cast<std::uint8_t>(r.dtype));
    manifest.u64(r.agent_fingerprint);
    manifest.u8(static_cast<std::uint8_t>(r.shape.size()));
    for (std::uint32_t d : r.shape) manifest.u32(d);
    manifest.u64(offset);
    manifest.u64(payload.size());
    manifest.u32(crc_of(payload.data(), payload.size()));
    offset += payload.size();
  }

  std::vector<unsigned char>& mbytes = manifest.bytes();
  ByteWriter footer;
  footer.u64(offset);
  footer.u32(crc_of(mbytes.data(), mbytes.size()));
  footer.raw(kCacheMagic, 4);
  out.write(reinterpret_cast<const char*>(mbytes.data()), static_cast<std::streamsize>(mbytes.size()));
  out.write(reinterpret_cast<const char*>(footer.bytes().data()), static_cast<std::streamsize>(kFooterSize));
  if (!out) throw Error("write failed for " + path);
}

CacheReader::CacheReader(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_, std::ios::binary | std::ios::ate);
  if (!in) throw MissingInput("cache file not found: " + path_);
  const std::streamoff size = in.tellg();
  if (size < static_cast<std::streamoff>(kFooterSize)) throw CorruptionError("cache: file too small for a footer");
  std::vector<unsigned char> footer(kFooterSize);
  in.seekg(size - static_cast<std::streamoff>(kFooterSize));
  in.read(reinterpret_cast<char*>(footer.data()), static_cast<std::streamsize>(kFooterSize));
  ByteReader fr(footer.data(), footer.size());
  const std::uint64_t manifest_offset = fr.u64();
  const std::uint32_t manifest_crc = fr.u32();
  fr.expect_magic();
  const std::streamoff manifest_len = size - static_cast<std::streamoff>(kFooterSize) -
                                      static_cast<std::streamoff>(manifest_offset);
  if (manifest_len < 0 || static_cast<std::streamoff>(manifest_offset) > size) {
    throw CorruptionError("cache: manifest offset outside the file");
  }
  std::vector<unsigned char> mbytes(static_cast<std::size_t>(manifest_len));
  in.seekg(static_cast<std::streamoff>(manifest_offset));
  in.read(reinterpret_cast<char*>(mbytes.data()), manifest_len);
  if (!in) throw CorruptionError("cache: cannot read manifest");
  if (crc_of(mbytes.data(), mbytes.size()) != manifest_crc) throw CorruptionError("cache: manifest checksum mismatch");

  ByteReader r(mbytes.data(), mbytes.size());
  r.expect_magic();
  manifest_.version = r.u16();
  if (manifest_.version != kCacheVersion) {
    throw CorruptionError("cache: unsupported format version " + std::to_string(manifest_.version));
  }
  manifest_.seed_fingerprint = r.u64();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    manifest_.metadata[k] = r.str();
  }
  const std::uint32_t n_rec = r.u32();
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < n_rec; ++i) {
    ManifestEntry e;
    e.id.agent_id = r.str();
    e.id.dataset_id = r.str();
    e.id.split = r.str();
    e.id.key = r.str();
    e.kind = static_cast<PayloadKind>(r.u8());
    e.dtype = static_cast<DType>(r.u8());
    e.agent_fingerprint = r.u64();
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t d = 0; d < ndim; ++d) e.shape.push_back(r.u32());
    e.offset = r.u64();
    e.length = r.u64();
    e.crc = r.u32();
    if (e.offset != expected_offset || e.offset + e.length > manifest_offset) {
      throw CorruptionError("cache: overlapping or out-of-range record " + e.id.key);
    }
    expected_offset = e.offset + e.length;
    index_.emplace(e.id.str(), manifest_.entries.size());
    manifest_.entries.push_back(std::move(e));
  }
}

bool CacheReader::payload_ok(const ManifestEntry& e) const {
  std::ifstream in(path_, std::ios::binary);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(e.length));
  in.seekg(static_cast<std::streamoff>(e.offset));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return static_cast<bool>(in) && crc_of(bytes.data(), bytes.size()) == e.crc;
}

KnowledgeCacheRecord CacheReader::read(const RecordKey& key) const {
  auto it = index_.find(key.str());
  if (it == index_.end()) {
    throw LookupError("cache: no record (" + key.agent_id + ", " + key.dataset_id + ", " + key.split + ", " +
                      key.key + ")");
  }
  const ManifestEntry& e = manifest_.entries[it->second];
  std::ifstream in(path_, std::ios::binary);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(e.length));
  in.seekg(static_cast<std::streamoff>(e.offset));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw CorruptionError("cache: cannot read payload of " + e.id.key);
  if (crc_of(bytes.data(), bytes.size()) != e.crc) throw CorruptionError("cache: checksum mismatch for " + e.id.key);

  KnowledgeCacheRecord rec;
  rec.id = e.id;
  rec.kind = e.kind;
  rec.dtype = e.dtype;
  rec.shape = e.shape;
  rec.agent_fingerprint = e.agent_fingerprint;
  const std::size_t width = e.dtype == DType::f32 ? 4 : 8;
  if (bytes.size() % width != 0) throw CorruptionError("cache: payload length not a multiple of the value width");
  ByteReader r(bytes.data(), bytes.size());
  rec.values.reserve(bytes.size() / width);
  for (std::size_t i = 0; i < bytes.size() / width; ++i) {
    rec.values.push_back(e.dtype == DType::f32 ? static_cast<double>(r.f32()) : r.f64());
  }
  try {
    rec.validate();
  } catch (const InvalidInput& err) {
    throw CorruptionError(std::string("cache: ") + err.what());
  }
  return rec;
}

KnowledgeCacheRecord read_cache(const std::string& path, const RecordKey& key) { return CacheReader(path).read(key); }

PayloadKind payload_kind_for(AgentModality m) {
  switch (m) {
    case AgentModality::vision: return PayloadKind::feature_stack;
    case AgentModality::language: return PayloadKind::class_features;
    case AgentModality::t2i: return PayloadKind::attention_map;
    case AgentModality::i2t: return PayloadKind::score_vector;
  }
  return PayloadKind::feature_stack;
}

std::size_t ValidationReport::count(CacheIssue::Kind k) const {
  std::size_t n = 0;
  for (const CacheIssue& i : issues) n += i.kind == k ? 1 : 0;
  return n;
}

ValidationReport validate_cache(const std::string& path, const AgentRegistry& registry,
                                const std::optional<CacheCoverage>& coverage) {
  ValidationReport report;
  std::optional<CacheReader> reader;
  try {
    reader.emplace(path);
  } catch (const Error& e) {
    report.issues.push_back({CacheIssue::Kind::corruption, path, e.what()});
    return report;
  }

  auto add = [&](CacheIssue::Kind k, const ManifestEntry& e, std::string msg) {
    report.issues.push_back({k, e.id.agent_id + "/" + e.id.split + "/" + e.id.key, std::move(msg)});
  };

  for (const ManifestEntry& e : reader->manifest().entries) {
    if (!reader->payload_ok(e)) add(CacheIssue::Kind::corruption, e, "payload checksum mismatch");
    if (e.id.agent_id.empty()) continue;
    if (!registry.contains(e.id.agent_id)) {
      add(CacheIssue::Kind::unknown_agent, e, "agent not in registry");
      continue;
    }
    const AgentDescriptor& a = registry.find(e.id.agent_id);
    if (e.agent_fingerprint != a.fingerprint()) add(CacheIssue::Kind::stale, e, "agent fingerprint changed");
    if (e.kind != payload_kind_for(a.modality)) {
      add(CacheIssue::Kind::modality_mismatch, e,
          to_string(e.kind) + " record for a " + to_string(a.modality) + " agent");
      continue;
    }
    const std::uint32_t last = e.shape.empty() ? 0 : e.shape.back();
    const std::size_t n_cls = coverage ? coverage->class_ids.size() : 0;
    bool drift = false;
    switch (a.modality) {
      case AgentModality::vision:
        drift = e.shape.size() != 2 || e.shape[0] != static_cast<std::uint32_t>(a.layer_count) ||
                last != static_cast<std::uint32_t>(a.feature_width);
        break;
      case AgentModality::language:
        drift = last != static_cast<std::uint32_t>(a.feature_width);
        break;
      case AgentModality::t2i:
        drift = e.shape.size() != 2 || (a.tokens > 0 && last != static_cast<std::uint32_t>(a.tokens)) ||
                (n_cls > 0 && e.shape[0] != n_cls);
        break;
      case AgentModality::i2t:
        drift = n_cls > 0 && last != n_cls;
        break;
    }
    if (drift) add(CacheIssue::Kind::shape_drift, e, "shape disagrees with the registry");
  }

  if (coverage) {
    for (const AgentDescriptor& a : registry.agents()) {
      std::vector<std::string> keys;
      if (a.modality == AgentModality::language) {
        for (int c : coverage->class_ids) keys.push_back(std::to_string(c));
      } else {
        keys = coverage->sample_ids;
      }
      for (const std::string& k : keys) {
        const RecordKey key{a.agent_id, coverage->dataset_id, coverage->split, k};
        if (!reader->contains(key)) {
          report.issues.push_back({CacheIssue::Kind::missing, a.agent_id + "/" + coverage->split + "/" + k,
                                   "no record for this agent and key"});
        }
      }
    }
  }
  return report;
}

}  // namespace transagent

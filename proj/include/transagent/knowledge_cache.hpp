#pragma once

// Single-file container for offline agent knowledge and parameter snapshots.
//
// Layout (all integers little-endian):
//   payload blobs, back to back
//   manifest:
//     "TAKC" u16 version u64 seed_fingerprint
//     u32 n_meta  { str key, str value } * n_meta
//     u32 n_rec   { str agent_id, str dataset_id, str split, str key,
//                   u8 kind, u8 dtype, u64 agent_fingerprint,
//                   u8 ndim, u32 dim * ndim, u64 offset, u64 length, u32 crc32 } * n_rec
//   footer: u64 manifest_offset, u32 manifest_crc32, "TAKC"
// where str = u32 byte length + bytes. Payloads are binary32 (dtype 0) or
// binary64 (dtype 1).

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "transagent/agent_hub.hpp"

namespace transagent {

inline constexpr char kCacheMagic[4] = {'T', 'A', 'K', 'C'};
inline constexpr std::uint16_t kCacheVersion = 1;

enum class PayloadKind : std::uint8_t {
  feature_stack = 0,
  class_features = 1,
  score_vector = 2,
  attention_map = 3,
  parameter = 4,
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string to_string(PayloadKind k);

struct RecordKey {
  std::string agent_id;  // empty for parameter snapshots of the student
  std::string dataset_id;
  std::string split;
  std::string key;  // sample id, class id or parameter name

  std::string str() const;
  auto operator<=>(const RecordKey&) const = default;
};

struct KnowledgeCacheRecord {
  RecordKey id;
  PayloadKind kind = PayloadKind::feature_stack;
  DType dtype = DType::f32;
  std::vector<std::uint32_t> shape;
  std::vector<double> values;
  std::uint64_t agent_fingerprint = 0;

  /// Throws InvalidInput when the shape product differs from the value count.
  void validate() const;
  Matrix as_matrix() const;  // 1-D payloads become a single row
};

KnowledgeCacheRecord make_record(RecordKey id, PayloadKind kind, const Matrix& values, DType dtype = DType::f32,
                                 std::uint64_t agent_fingerprint = 0);

struct ManifestEntry {
  RecordKey id;
  PayloadKind kind = PayloadKind::feature_stack;
  DType dtype = DType::f32;
  std::uint64_t agent_fingerprint = 0;
  std::vector<std::uint32_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t crc = 0;
};

struct CacheManifest {
  std::uint16_t version = kCacheVersion;
  std::uint64_t seed_fingerprint = 0;
  std::map<std::string, std::string> metadata;
  std::vector<ManifestEntry> entries;
};

/// Writes all records to `path`. Duplicate keys are rejected before anything is written.
void write_cache(const std::string& path, std::span<const KnowledgeCacheRecord> records,
                 std::uint64_t seed_fingerprint = 0, const std::map<std::string, std::string>& metadata = {});

class CacheReader {
 public:
  /// Loads and checks the manifest; throws CorruptionError on a bad footer or checksum.
  explicit CacheReader(std::string path);

  const CacheManifest& manifest() const { return manifest_; }
  bool contains(const RecordKey& key) const { return index_.count(key.str()) != 0; }
  /// Throws LookupError for a missing key, CorruptionError for a payload checksum failure.
  KnowledgeCacheRecord read(const RecordKey& key) const;
  /// Checks one payload without decoding it.
  bool payload_ok(const ManifestEntry& entry) const;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  CacheManifest manifest_;
  std::unordered_map<std::string, std::size_t> index_;
};

KnowledgeCacheRecord read_cache(const std::string& path, const RecordKey& key);

struct CacheCoverage {
  std::string dataset_id;
  std::string split;
  std::vector<std::string> sample_ids;
  std::vector<int> class_ids;
};

struct CacheIssue {
  enum class Kind { corruption, stale, shape_drift, missing, unknown_agent, modality_mismatch };
  Kind kind;
  std::string key;
  std::string message;
};

std::string to_string(CacheIssue::Kind k);

struct ValidationReport {
  std::vector<CacheIssue> issues;
  bool ok() const { return issues.empty(); }
  std::size_t count(CacheIssue::Kind k) const;
};

/// Report-only: never throws for content problems (an unreadable manifest is
/// reported as one corruption issue).
ValidationReport validate_cache(const std::string& path, const AgentRegistry& registry,
                                const std::optional<CacheCoverage>& coverage = std::nullopt);

/// Payload kind an agent of the given modality writes.
PayloadKind payload_kind_for(AgentModality m);

}  // namespace transagent

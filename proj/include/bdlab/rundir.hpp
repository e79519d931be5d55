#pragma once

// Run directories: one exclusive writer, every produced file inventoried with
// its SHA-256 in manifest.json.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace bdlab {

inline constexpr const char* kArtifactVersion = "bdlab 0.1.0";

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;  // relative to the run directory
  std::string sha256;
  std::uintmax_t bytes = 0;
};

class RunDir {
 public:
  /// `out` must be absent or an empty directory. An empty `out` picks
  /// <root>/<command>-<UTC timestamp> with root = $BDLAB_OUT_ROOT or "runs".
  /// Takes an exclusive lock file (IoError if another process holds it).
  RunDir(const std::string& command, const std::filesystem::path& out, const nlohmann::json& config,
         const std::string& default_root = "");
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }

  void write_text(const std::string& name, std::string_view text);
  void write_json(const std::string& name, const nlohmann::json& j);
  /// Records a file that was written directly under the run directory.
  void add(const std::string& name);
  void set_seed(const std::string& name, std::uint64_t seed);

  /// Writes manifest.json and releases the lock.
  void finish();

 private:
  void write_manifest();

  std::filesystem::path path_;
  std::string command_;
  nlohmann::json config_;
  std::string config_hash_;
  nlohmann::json seeds_ = nlohmann::json::object();
  std::string started_;
  std::vector<ManifestEntry> files_;
  int lock_fd_ = -1;
  bool finished_ = false;
};

/// Canonical serialization used for config hashes and written reports.
std::string canonical_json(const nlohmann::json& j);

struct VerifyResult {
  bool ok = true;
  std::vector<std::string> problems;
};

/// Re-hashes every inventoried file of a finished run directory.
VerifyResult verify_run(const std::filesystem::path& dir);

std::string utc_timestamp();

}  // namespace bdlab

#include "bdlab/rundir.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "bdlab/error.hpp"

namespace bdlab {

namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read " + path.string());
  }
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

std::string canonical_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

RunDir::RunDir(const std::string& command, const fs::path& out, const nlohmann::json& config,
               const std::string& default_root)
    : command_(command), config_(config) {
  if (out.empty()) {
    std::string root = default_root;
    if (root.empty()) {
      const char* env = std::getenv("BDLAB_OUT_ROOT");
      root = env != nullptr && *env != '\0' ? env : "runs";
    }
    // Reruns never overwrite: a taken name gets a numeric suffix.
    const std::string base = command + "-" + utc_timestamp();
    path_ = fs::path(root) / base;
    for (int i = 1; fs::exists(path_); ++i) {
      path_ = fs::path(root) / (base + "-" + std::to_string(i));
    }
  } else {
    path_ = out;
    if (fs::exists(path_) && (!fs::is_directory(path_) || !fs::is_empty(path_))) {
      throw IoError("output directory " + path_.string() +
                    " already exists and is not empty; run directories are append-only");
    }
  }
  std::error_code ec;
  fs::create_directories(path_, ec);
  if (ec) {
    throw IoError("cannot create " + path_.string() + ": " + ec.message());
  }
  const fs::path lock = path_ / ".lock";
  lock_fd_ = ::open(lock.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (lock_fd_ < 0 || ::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    if (lock_fd_ >= 0) {
      ::close(lock_fd_);
      lock_fd_ = -1;
    }
    throw IoError("run directory " + path_.string() + " is locked by another process");
  }
  config_hash_ = sha256_hex(canonical_json(config_));
  started_ = utc_timestamp();
  write_json("config.json", config_);
}

RunDir::~RunDir() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
    std::error_code ec;
    fs::remove(path_ / ".lock", ec);
  }
}

void RunDir::write_text(const std::string& name, std::string_view text) {
  const fs::path p = path_ / name;
  if (p.has_parent_path()) {
    fs::create_directories(p.parent_path());
  }
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) {
    throw IoError("cannot write " + p.string());
  }
  out.close();
  add(name);
}

void RunDir::write_json(const std::string& name, const nlohmann::json& j) { write_text(name, canonical_json(j)); }

void RunDir::add(const std::string& name) {
  const fs::path p = path_ / name;
  ManifestEntry e{name, sha256_file(p), fs::file_size(p)};
  for (auto& f : files_) {
    if (f.path == name) {
      f = e;
      return;
    }
  }
  files_.push_back(std::move(e));
}

void RunDir::set_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }

void RunDir::write_manifest() {
  nlohmann::json j;
  j["command"] = command_;
  j["artifact_version"] = kArtifactVersion;
  j["config_sha256"] = config_hash_;
  j["seeds"] = seeds_;
  j["started"] = started_;
  j["finished"] = utc_timestamp();
  j["files"] = nlohmann::json::array();
  for (const auto& f : files_) {
    j["files"].push_back({{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  }
  std::ofstream out(path_ / "manifest.json", std::ios::trunc);
  out << canonical_json(j);
  if (!out) {
    throw IoError("cannot write manifest in " + path_.string());
  }
}

void RunDir::finish() {
  if (finished_) {
    return;
  }
  write_manifest();
  finished_ = true;
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
    lock_fd_ = -1;
    std::error_code ec;
    fs::remove(path_ / ".lock", ec);
  }
}

VerifyResult verify_run(const fs::path& dir) {
  VerifyResult r;
  const fs::path manifest = dir / "manifest.json";
  std::ifstream in(manifest);
  if (!in) {
    r.ok = false;
    r.problems.push_back("missing manifest.json");
    return r;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    r.ok = false;
    r.problems.push_back(std::string("unreadable manifest: ") + e.what());
    return r;
  }
  for (const auto& f : j.value("files", nlohmann::json::array())) {
    const std::string name = f.value("path", "");
    const fs::path p = dir / name;
    if (!fs::exists(p)) {
      r.problems.push_back("missing " + name);
      continue;
    }
    if (sha256_file(p) != f.value("sha256", "")) {
      r.problems.push_back("hash mismatch for " + name);
    }
  }
  if (j.contains("config_sha256") && fs::exists(dir / "config.json")) {
    std::ifstream cin(dir / "config.json");
    const auto config = nlohmann::json::parse(cin, nullptr, false);
    if (config.is_discarded() || sha256_hex(canonical_json(config)) != j["config_sha256"].get<std::string>()) {
      r.problems.push_back("config hash mismatch");
    }
  }
  r.ok = r.problems.empty();
  return r;
}

}  // namespace bdlab

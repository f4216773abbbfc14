#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace agro::io {

// Ordered key=value text file, one pair per line. Keys are written sorted so
// the bytes depend only on content.
class Manifest {
 public:
  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  void set(const std::string& key, const char* value) { entries_[key] = value; }
  void set(const std::string& key, std::uint64_t value) { entries_[key] = std::to_string(value); }
  void set(const std::string& key, double value);
  void set_list(const std::string& key, std::span<const std::size_t> values);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  // Throws ConfigError naming the key when absent or unparsable.
  const std::string& get(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::vector<std::size_t> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const noexcept { return entries_; }

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);

 private:
  std::map<std::string, std::string> entries_;
};

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// Flat little-endian IEEE-754 binary64 arrays.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path);

// Lowercase hex SHA-256 of the file contents.
std::string sha256_file(const std::filesystem::path& path);

// Throws MissingInputError listing every absent path.
void require_exists(std::span<const std::filesystem::path> paths);
void require_exists(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace agro::io

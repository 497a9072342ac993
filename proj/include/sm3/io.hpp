#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sm3/tensor.hpp"

namespace sm3::io {

using json = nlohmann::json;

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames over `path`.
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Parses JSON, mapping parse failures to FormatError.
json parse_json(const std::string& text, const std::string& what);

/// One tensor inside a float32 blob; offset and count are in floats.
struct BlobEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
};

/// Accumulates matrices as little-endian IEEE-754 float32.
class BlobWriter {
 public:
  void add(const std::string& name, const Matrix& m);
  void add(const std::string& name, const IndexMatrix& m);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  const std::vector<BlobEntry>& entries() const { return entries_; }
  json manifest_entries() const;

 private:
  void push(float v);

  std::vector<std::uint8_t> bytes_;
  std::vector<BlobEntry> entries_;
  std::size_t floats_ = 0;
};

std::vector<BlobEntry> parse_entries(const json& tensors, std::size_t blob_floats);

/// Reads a rank-2 entry. FormatError when it runs past the blob.
Matrix read_matrix(std::span<const std::uint8_t> blob, const BlobEntry& entry);

/// Writes "<stem>.json" manifest beside "<stem>.bin": the manifest gains a
/// "blob" object {file, bytes, sha256} and a "tensors" directory.
void save_manifest_and_blob(const std::filesystem::path& manifest_path, json manifest, const BlobWriter& blob);

struct LoadedBlob {
  json manifest;
  std::vector<std::uint8_t> blob;
  std::vector<BlobEntry> entries;
};

/// Validates format tag, version, blob size and SHA-256 before returning.
LoadedBlob load_manifest_and_blob(const std::filesystem::path& manifest_path, const std::string& format,
                                  int version);

const BlobEntry& find_entry(const std::vector<BlobEntry>& entries, const std::string& name);

}  // namespace sm3::io

#include "sm3/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "sm3/errors.hpp"

namespace sm3::io {

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < length; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_bytes(path)); }

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": malformed JSON (" + e.what() + ")");
  }
}

void BlobWriter::push(float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xffu));
}

void BlobWriter::add(const std::string& name, const Matrix& m) {
  entries_.push_back({name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, floats_});
  for (Eigen::Index i = 0; i < m.size(); ++i) push(static_cast<float>(m.data()[i]));
  floats_ += static_cast<std::size_t>(m.size());
}

void BlobWriter::add(const std::string& name, const IndexMatrix& m) {
  add(name, Matrix(m.cast<double>()));
}

json BlobWriter::manifest_entries() const {
  json out = json::array();
  for (const BlobEntry& e : entries_) out.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
  return out;
}

std::vector<BlobEntry> parse_entries(const json& tensors, std::size_t blob_floats) {
  if (!tensors.is_array()) throw FormatError("manifest 'tensors' must be an array");
  std::vector<BlobEntry> out;
  for (const json& t : tensors) {
    try {
      BlobEntry e{t.at("name").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>(),
                  t.at("offset").get<std::size_t>()};
      std::size_t count = 1;
      for (std::size_t d : e.shape) count *= d;
      if (e.shape.size() != 2 || e.offset + count > blob_floats) {
        throw FormatError("tensor '" + e.name + "' does not fit the blob");
      }
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw FormatError(std::string("bad tensor entry: ") + ex.what());
    }
  }
  return out;
}

Matrix read_matrix(std::span<const std::uint8_t> blob, const BlobEntry& entry) {
  const auto rows = static_cast<Eigen::Index>(entry.shape.at(0));
  const auto cols = static_cast<Eigen::Index>(entry.shape.at(1));
  const std::size_t count = static_cast<std::size_t>(rows * cols);
  if ((entry.offset + count) * 4 > blob.size()) throw FormatError("tensor '" + entry.name + "' runs past the blob");
  Matrix m(rows, cols);
  const std::uint8_t* p = blob.data() + entry.offset * 4;
  for (std::size_t i = 0; i < count; ++i, p += 4) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    m.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return m;
}

void save_manifest_and_blob(const std::filesystem::path& manifest_path, json manifest, const BlobWriter& blob) {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  manifest["blob"] = {{"file", blob_path.filename().string()},
                      {"bytes", blob.bytes().size()},
                      {"sha256", sha256_hex(blob.bytes())}};
  manifest["tensors"] = blob.manifest_entries();
  write_bytes(blob_path, blob.bytes());
  write_text(manifest_path, manifest.dump(2) + "\n");
}

LoadedBlob load_manifest_and_blob(const std::filesystem::path& manifest_path, const std::string& format,
                                  int version) {
  if (!std::filesystem::exists(manifest_path)) throw IoError("missing artifact " + manifest_path.string());
  LoadedBlob out;
  out.manifest = parse_json(read_text(manifest_path), manifest_path.string());
  const json& m = out.manifest;
  if (!m.is_object() || m.value("format", "") != format) {
    throw FormatError(manifest_path.string() + " is not a " + format + " manifest");
  }
  if (!m.contains("version") || !m["version"].is_number_integer()) throw FormatError("manifest has no version");
  if (m["version"].get<int>() != version) {
    throw VersionError(manifest_path.string() + ": version " + std::to_string(m["version"].get<int>()) +
                       ", expected " + std::to_string(version));
  }
  std::string file;
  std::string digest;
  std::size_t bytes = 0;
  try {
    file = m.at("blob").at("file").get<std::string>();
    digest = m.at("blob").at("sha256").get<std::string>();
    bytes = m.at("blob").at("bytes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest blob record: ") + e.what());
  }
  std::filesystem::path blob_path = manifest_path.parent_path() / file;
  if (!std::filesystem::exists(blob_path)) throw IoError("missing blob " + blob_path.string());
  out.blob = read_bytes(blob_path);
  if (sha256_hex(out.blob) != digest) throw ChecksumError(blob_path.string() + ": SHA-256 mismatch");
  if (out.blob.size() != bytes || bytes % 4 != 0) throw FormatError(blob_path.string() + ": unexpected blob size");
  out.entries = parse_entries(m.contains("tensors") ? m["tensors"] : json(), bytes / 4);
  return out;
}

const BlobEntry& find_entry(const std::vector<BlobEntry>& entries, const std::string& name) {
  for (const BlobEntry& e : entries) {
    if (e.name == name) return e;
  }
  throw FormatError("manifest has no tensor named '" + name + "'");
}

}  // namespace sm3::io

#include "musegen/artifact_io.hpp"

#include <cstring>
#include <fstream>

#include "musegen/errors.hpp"

namespace musegen {

namespace {

void put_bytes(std::vector<unsigned char>& out, const void* p, size_t n) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename T>
void put_pod(std::vector<unsigned char>& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

}  // namespace

ArtifactWriter::ArtifactWriter(std::string type6, uint32_t version)
    : magic_("MG" + std::move(type6)), version_(version) {
  if (magic_.size() != 8) throw ValidationError("artifact type code must be 6 chars");
}

void ArtifactWriter::add_f64(const std::string& name, const Eigen::MatrixXd& m) {
  Field f;
  f.name = name;
  f.dtype = 0;
  f.rows = static_cast<uint64_t>(m.rows());
  f.cols = static_cast<uint64_t>(m.cols());
  f.data.resize(sizeof(double) * m.size());
  // Row-major on disk so dumps are frame-ordered.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  std::memcpy(f.data.data(), rm.data(), f.data.size());
  fields_.push_back(std::move(f));
}

void ArtifactWriter::add_f64(const std::string& name, const Eigen::VectorXd& v) {
  add_f64(name, Eigen::MatrixXd(v));
}

void ArtifactWriter::add_scalar(const std::string& name, double v) {
  Eigen::MatrixXd m(1, 1);
  m(0, 0) = v;
  add_f64(name, m);
}

void ArtifactWriter::add_i32(const std::string& name, const Eigen::MatrixXi& m) {
  Field f;
  f.name = name;
  f.dtype = 1;
  f.rows = static_cast<uint64_t>(m.rows());
  f.cols = static_cast<uint64_t>(m.cols());
  f.data.resize(sizeof(int32_t) * m.size());
  Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm =
      m.cast<int32_t>();
  std::memcpy(f.data.data(), rm.data(), f.data.size());
  fields_.push_back(std::move(f));
}

void ArtifactWriter::add_u64(const std::string& name, uint64_t v) {
  Field f;
  f.name = name;
  f.dtype = 2;
  f.rows = 1;
  f.cols = 1;
  put_pod(f.data, v);
  fields_.push_back(std::move(f));
}

void ArtifactWriter::add_string(const std::string& name, const std::string& s) {
  Field f;
  f.name = name;
  f.dtype = 3;
  f.rows = s.size();
  f.cols = 1;
  f.data.assign(s.begin(), s.end());
  fields_.push_back(std::move(f));
}

void ArtifactWriter::save(const std::filesystem::path& path) const {
  std::vector<unsigned char> out;
  put_bytes(out, magic_.data(), 8);
  put_pod(out, version_);
  put_pod(out, static_cast<uint32_t>(fields_.size()));
  for (const auto& f : fields_) {
    put_pod(out, static_cast<uint16_t>(f.name.size()));
    put_bytes(out, f.name.data(), f.name.size());
    put_pod(out, f.dtype);
    put_pod(out, f.rows);
    put_pod(out, f.cols);
    put_pod(out, static_cast<uint64_t>(f.data.size()));
    put_bytes(out, f.data.data(), f.data.size());
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for write: " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()),
             static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("short write: " + path.string());
}

ArtifactReader::ArtifactReader(const std::filesystem::path& path, const std::string& type6,
                               uint32_t expected_version)
    : path_(path.string()) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw MissingArtifactError("missing artifact: " + path_);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(file)),
                                 std::istreambuf_iterator<char>());
  const std::string magic = "MG" + type6;
  if (raw.size() < 16 || std::memcmp(raw.data(), magic.data(), 8) != 0)
    throw FormatError("bad magic in " + path_ + " (expected " + magic + ")");
  uint32_t version, count;
  std::memcpy(&version, raw.data() + 8, 4);
  std::memcpy(&count, raw.data() + 12, 4);
  if (version != expected_version)
    throw FormatError("unsupported version " + std::to_string(version) + " in " + path_);
  size_t pos = 16;
  auto need = [&](size_t n) {
    if (pos + n > raw.size()) throw FormatError("truncated artifact: " + path_);
  };
  for (uint32_t i = 0; i < count; ++i) {
    need(2);
    uint16_t name_len;
    std::memcpy(&name_len, raw.data() + pos, 2);
    pos += 2;
    need(name_len);
    std::string name(reinterpret_cast<const char*>(raw.data() + pos), name_len);
    pos += name_len;
    need(1 + 8 + 8 + 8);
    Field f;
    f.dtype = raw[pos];
    pos += 1;
    std::memcpy(&f.rows, raw.data() + pos, 8);
    pos += 8;
    std::memcpy(&f.cols, raw.data() + pos, 8);
    pos += 8;
    uint64_t bytes;
    std::memcpy(&bytes, raw.data() + pos, 8);
    pos += 8;
    need(bytes);
    f.data.assign(raw.begin() + static_cast<long>(pos),
                  raw.begin() + static_cast<long>(pos + bytes));
    pos += bytes;
    fields_.emplace(std::move(name), std::move(f));
  }
}

bool ArtifactReader::has(const std::string& name) const { return fields_.count(name) > 0; }

const ArtifactReader::Field& ArtifactReader::get(const std::string& name, uint8_t dtype) const {
  auto it = fields_.find(name);
  if (it == fields_.end()) throw FormatError("missing field '" + name + "' in " + path_);
  if (it->second.dtype != dtype) throw FormatError("wrong dtype for '" + name + "' in " + path_);
  return it->second;
}

Eigen::MatrixXd ArtifactReader::f64(const std::string& name) const {
  const Field& f = get(name, 0);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(
      static_cast<long>(f.rows), static_cast<long>(f.cols));
  if (f.data.size() != sizeof(double) * f.rows * f.cols)
    throw FormatError("size mismatch for '" + name + "' in " + path_);
  std::memcpy(rm.data(), f.data.data(), f.data.size());
  return rm;
}

Eigen::VectorXd ArtifactReader::f64_vector(const std::string& name) const {
  Eigen::MatrixXd m = f64(name);
  if (m.cols() != 1) throw FormatError("field '" + name + "' is not a vector in " + path_);
  return m.col(0);
}

double ArtifactReader::scalar(const std::string& name) const {
  Eigen::MatrixXd m = f64(name);
  if (m.size() != 1) throw FormatError("field '" + name + "' is not a scalar in " + path_);
  return m(0, 0);
}

Eigen::MatrixXi ArtifactReader::i32(const std::string& name) const {
  const Field& f = get(name, 1);
  Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(
      static_cast<long>(f.rows), static_cast<long>(f.cols));
  if (f.data.size() != sizeof(int32_t) * f.rows * f.cols)
    throw FormatError("size mismatch for '" + name + "' in " + path_);
  std::memcpy(rm.data(), f.data.data(), f.data.size());
  return rm.cast<int>();
}

uint64_t ArtifactReader::u64(const std::string& name) const {
  const Field& f = get(name, 2);
  if (f.data.size() != 8) throw FormatError("bad u64 field '" + name + "' in " + path_);
  uint64_t v;
  std::memcpy(&v, f.data.data(), 8);
  return v;
}

std::string ArtifactReader::str(const std::string& name) const {
  const Field& f = get(name, 3);
  return std::string(f.data.begin(), f.data.end());
}

}  // namespace musegen

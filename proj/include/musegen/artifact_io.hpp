#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace musegen {

// Binary artifact container: 8-byte magic ("MG" + 6-char type code), u32
// version, u32 field count, then named fields. Arrays are dimensioned and
// little-endian: f64 matrices, i32 matrices, strings. Loads reject wrong
// magic or version with FormatError.
class ArtifactWriter {
 public:
  ArtifactWriter(std::string type6, uint32_t version);

  void add_f64(const std::string& name, const Eigen::MatrixXd& m);
  void add_f64(const std::string& name, const Eigen::VectorXd& v);
  void add_scalar(const std::string& name, double v);
  void add_i32(const std::string& name, const Eigen::MatrixXi& m);
  void add_u64(const std::string& name, uint64_t v);
  void add_string(const std::string& name, const std::string& s);

  void save(const std::filesystem::path& path) const;

 private:
  struct Field {
    std::string name;
    uint8_t dtype;  // 0 f64, 1 i32, 2 u64, 3 string
    uint64_t rows = 0, cols = 0;
    std::vector<unsigned char> data;
  };
  std::string magic_;
  uint32_t version_;
  std::vector<Field> fields_;
};

class ArtifactReader {
 public:
  // Throws MissingArtifactError if absent, FormatError on bad magic/version.
  ArtifactReader(const std::filesystem::path& path, const std::string& type6,
                 uint32_t expected_version);

  bool has(const std::string& name) const;
  Eigen::MatrixXd f64(const std::string& name) const;
  Eigen::VectorXd f64_vector(const std::string& name) const;
  double scalar(const std::string& name) const;
  Eigen::MatrixXi i32(const std::string& name) const;
  uint64_t u64(const std::string& name) const;
  std::string str(const std::string& name) const;

 private:
  struct Field {
    uint8_t dtype;
    uint64_t rows, cols;
    std::vector<unsigned char> data;
  };
  const Field& get(const std::string& name, uint8_t dtype) const;
  std::string path_;
  std::map<std::string, Field> fields_;
};

}  // namespace musegen

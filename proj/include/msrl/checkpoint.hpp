#pragma once

// Named-tensor checkpoint files.
//
//   msrl-checkpoint v1
//   tensor <name> <rows> <cols>
//   <rows*cols values, row-major, %.17g, space separated>
//   ...
//
// %.17g round-trips every finite double exactly.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "msrl/error.hpp"

namespace msrl {

inline constexpr const char* kCheckpointHeader = "msrl-checkpoint v1";

using TensorMap = std::map<std::string, Eigen::MatrixXd>;

class CheckpointWriter {
 public:
  CheckpointWriter() { os_ << kCheckpointHeader << '\n'; }

  template <typename Derived>
  void add(const std::string& name, const Eigen::MatrixBase<Derived>& m) {
    os_ << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    char buf[32];
    bool first = true;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(m(r, c)));
        if (!first) os_ << ' ';
        os_ << buf;
        first = false;
      }
    }
    os_ << '\n';
  }

  // Any parameter struct exposing visit(self, f).
  template <typename Params>
  void add_all(const std::string& prefix, const Params& p) {
    Params::visit(p, [&](const char* name, const auto& t) { add(prefix + name, t); });
  }

  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

inline TensorMap parse_checkpoint(std::istream& in, const std::string& origin) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointHeader) {
    throw IoError(origin + ": not a checkpoint (bad header)");
  }
  TensorMap out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream hs(line);
    std::string tag, name;
    Eigen::Index rows = 0, cols = 0;
    if (!(hs >> tag >> name >> rows >> cols) || tag != "tensor" || rows < 0 || cols < 0) {
      throw IoError(origin + ": malformed tensor header '" + line + "'");
    }
    std::string values;
    if (!std::getline(in, values)) throw IoError(origin + ": truncated tensor " + name);
    Eigen::MatrixXd m(rows, cols);
    const char* p = values.c_str();
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        char* end = nullptr;
        m(r, c) = std::strtod(p, &end);
        if (end == p) throw IoError(origin + ": short value list for " + name);
        p = end;
      }
    }
    out.emplace(name, std::move(m));
  }
  return out;
}

inline TensorMap read_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return parse_checkpoint(in, path);
}

template <typename Derived>
void load_tensor(const TensorMap& tensors, const std::string& name, Eigen::MatrixBase<Derived>& dst) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint is missing tensor " + name);
  const auto& m = it->second;
  if constexpr (Derived::ColsAtCompileTime == 1) {
    if (m.cols() != 1) throw DimensionError("tensor " + name + " is not a column vector");
    dst.derived().resize(m.rows());
  } else {
    dst.derived().resize(m.rows(), m.cols());
  }
  dst = m;
}

template <typename Params>
Params load_params(const TensorMap& tensors, const std::string& prefix) {
  Params p;
  Params::visit(p, [&](const char* name, auto& t) { load_tensor(tensors, prefix + name, t); });
  return p;
}

}  // namespace msrl

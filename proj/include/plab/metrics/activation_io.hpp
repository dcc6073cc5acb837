#pragma once

// Matrix dump: <path> holds rows*cols f64 values (row-major, little-endian),
// <path>.json holds {"n", "D", "depth", "run_id"}.

#include <fstream>
#include <string>

#include "json.hpp"
#include "plab/core/error.hpp"
#include "plab/metrics/repmetrics.hpp"

namespace plab {

inline void write_activation_matrix(const ActivationMatrix& a, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(a.values.data.data()),
           static_cast<std::streamsize>(a.values.data.size() * sizeof(double)));
  if (!os) throw IoError("failed writing '" + path + "'");
  std::ofstream js(path + ".json");
  if (!js) throw IoError("cannot write sidecar for '" + path + "'");
  js << nlohmann::json{{"n", a.values.rows}, {"D", a.values.cols}, {"depth", a.depth}, {"run_id", a.run_id}}.dump(2)
     << '\n';
}

inline ActivationMatrix read_activation_matrix(const std::string& path) {
  std::ifstream js(path + ".json");
  if (!js) throw IoError("missing sidecar '" + path + ".json'");
  const nlohmann::json meta = nlohmann::json::parse(js);
  ActivationMatrix a;
  const auto n = meta.at("n").get<std::size_t>();
  const auto d = meta.at("D").get<std::size_t>();
  a.depth = meta.value("depth", 0.0);
  a.run_id = meta.value("run_id", std::string{});
  a.values = Matrix(n, d);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  is.read(reinterpret_cast<char*>(a.values.data.data()), static_cast<std::streamsize>(n * d * sizeof(double)));
  if (!is) throw IoError("'" + path + "' is shorter than its sidecar says");
  return a;
}

}  // namespace plab

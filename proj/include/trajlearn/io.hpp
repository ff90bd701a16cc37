#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajlearn/generators.hpp"
#include "trajlearn/util.hpp"

namespace trajlearn {
namespace io {

using nlohmann::json;

// Batch CSV layout: '#'-prefixed metadata lines (m, T, n, p, descriptor,
// seed), then a header row, then one row per (trajectory, step) in row-major
// order: i, t, x_1..x_n [, y_1..y_p]. Numerics carry 17 significant digits so
// the round trip is bit-exact.
inline void write_batch_csv(std::ostream& os, const TrajectoryBatch& batch,
                            const LabeledBatch* labels = nullptr) {
  int p = labels ? labels->p : 0;
  os << "# m=" << batch.m << "\n";
  os << "# T=" << batch.T << "\n";
  os << "# n=" << batch.n << "\n";
  os << "# p=" << p << "\n";
  os << "# descriptor=" << batch.descriptor.dump() << "\n";
  os << "# seed=" << batch.seed << "\n";
  os << "i,t";
  for (int c = 1; c <= batch.n; ++c) os << ",x_" << c;
  for (int c = 1; c <= p; ++c) os << ",y_" << c;
  os << "\n";
  for (int i = 0; i < batch.m; ++i) {
    for (int t = 0; t < batch.T; ++t) {
      os << i << "," << t;
      for (int c = 0; c < batch.n; ++c) os << "," << fmt_double(batch.x[i](t, c));
      for (int c = 0; c < p; ++c) os << "," << fmt_double(labels->y[i](t, c));
      os << "\n";
    }
  }
}

inline void write_batch_csv(std::ostream& os, const LabeledBatch& labeled) {
  write_batch_csv(os, labeled.batch, &labeled);
}

struct BatchCsv {
  TrajectoryBatch batch;
  std::vector<Eigen::MatrixXd> y;  // empty when p == 0
  int p = 0;
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline BatchCsv read_batch_csv(std::istream& is) {
  BatchCsv out;
  int m = -1, T = -1, n = -1, p = 0;
  std::string line;
  bool header_seen = false;
  std::vector<std::vector<std::string>> data;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string body = line.substr(1);
      auto eq = body.find('=');
      if (eq == std::string::npos) continue;
      std::string key = body.substr(0, eq);
      key.erase(0, key.find_first_not_of(' '));
      std::string val = body.substr(eq + 1);
      if (key == "m") m = std::stoi(val);
      else if (key == "T") T = std::stoi(val);
      else if (key == "n") n = std::stoi(val);
      else if (key == "p") p = std::stoi(val);
      else if (key == "descriptor") out.batch.descriptor = json::parse(val);
      else if (key == "seed") out.batch.seed = std::stoull(val);
      continue;
    }
    if (!header_seen) {
      header_seen = true;  // column names are fixed by the writer
      continue;
    }
    data.push_back(detail::split_csv(line));
  }
  if (m < 1 || T < 1 || n < 1)
    throw std::invalid_argument("batch csv: missing or invalid m/T/n metadata");
  if (static_cast<int>(data.size()) != m * T)
    throw std::invalid_argument("batch csv: row count does not match m*T");
  out.batch.m = m;
  out.batch.T = T;
  out.batch.n = n;
  out.p = p;
  out.batch.x.assign(m, Eigen::MatrixXd(T, n));
  if (p > 0) out.y.assign(m, Eigen::MatrixXd(T, p));
  for (const auto& cells : data) {
    if (static_cast<int>(cells.size()) != 2 + n + p)
      throw std::invalid_argument("batch csv: wrong column count");
    int i = std::stoi(cells[0]);
    int t = std::stoi(cells[1]);
    if (i < 0 || i >= m || t < 0 || t >= T)
      throw std::invalid_argument("batch csv: row index out of range");
    for (int c = 0; c < n; ++c) out.batch.x[i](t, c) = std::stod(cells[2 + c]);
    for (int c = 0; c < p; ++c) out.y[i](t, c) = std::stod(cells[2 + n + c]);
  }
  return out;
}

}  // namespace io
}  // namespace trajlearn

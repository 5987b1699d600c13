#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "otmkit/chains.hpp"
#include "otmkit/core.hpp"

namespace otmkit::io {

using json = nlohmann::json;

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// FNV-1a digest of the raw bytes; stable across platforms for report
// provenance.
inline std::string digest(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Matrix matrix_from_json(const json& rows, const char* what) {
  if (!rows.is_array() || rows.empty())
    throw InputError(std::string(what) + " must be a non-empty array of rows");
  std::size_t cols = 0;
  for (const auto& row : rows) {
    if (!row.is_array()) throw InputError(std::string(what) + " rows must be arrays");
    if (cols == 0) cols = row.size();
    if (row.size() != cols)
      throw LabelDimensionMismatch(std::string(what) + " rows have ragged lengths");
  }
  Matrix m(rows.size(), cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rows[i][j].get<double>();
  return m;
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

// Chain file: {"kernel": [[...]], "initial": [...], "labels": [[...]]?}
// Row sums within 1e-9 of 1 are accepted (and renormalized by validation).
inline MarkovChain read_chain_json(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(path + ": " + e.what());
  }
  if (!doc.contains("kernel") || !doc.contains("initial"))
    throw InputError(path + ": chain file needs \"kernel\" and \"initial\"");
  Matrix kernel = matrix_from_json(doc["kernel"], "kernel");
  json init = doc["initial"];
  if (!init.is_array()) throw InputError(path + ": initial must be an array");
  Vector initial(init.size());
  for (std::size_t i = 0; i < init.size(); ++i) initial(i) = init[i].get<double>();
  std::optional<Matrix> labels;
  if (doc.contains("labels") && !doc["labels"].is_null())
    labels = matrix_from_json(doc["labels"], "labels");
  return validate_chain(std::move(kernel), std::move(initial), std::move(labels));
}

inline void write_chain_json(const MarkovChain& chain, const std::string& path) {
  json doc;
  doc["kernel"] = matrix_to_json(chain.kernel);
  doc["initial"] = vector_to_json(chain.initial);
  if (chain.labels) doc["labels"] = matrix_to_json(*chain.labels);
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << doc.dump(2) << "\n";
}

// Graph file: TSV edge list "src<TAB>dst<TAB>weight?", one edge per line,
// '#' comments allowed. Node count is 1 + max endpoint unless labels say more.
inline LabeledGraph read_graph_tsv(const std::string& path,
                                   const std::string& labels_path = "") {
  std::istringstream in(read_file(path));
  LabeledGraph g;
  std::string line;
  int max_node = -1;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    LabeledGraph::Edge e;
    if (!(ls >> e.src >> e.dst))
      throw InputError(path + ":" + std::to_string(lineno) + ": expected src<TAB>dst");
    if (!(ls >> e.weight)) e.weight = 1.0;
    g.edges.push_back(e);
    max_node = std::max({max_node, e.src, e.dst});
  }
  g.node_count = max_node + 1;
  if (!labels_path.empty()) {
    json doc = json::parse(read_file(labels_path));
    if (!doc.contains("labels")) throw InputError(labels_path + ": needs \"labels\"");
    g.labels = matrix_from_json(doc["labels"], "labels");
    g.node_count = std::max(g.node_count, static_cast<int>(g.labels->rows()));
  }
  if (g.node_count <= 0) throw InputError(path + ": no edges or labels found");
  validate_graph(g);
  return g;
}

// Cost file: CSV matrix, one row per line.
inline Matrix read_cost_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) row.push_back(std::stod(field));
    if (!rows.empty() && row.size() != rows.front().size())
      throw InputError(path + ": ragged CSV rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(path + ": empty cost file");
  Matrix c(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) c(i, j) = rows[i][j];
  return c;
}

// Horizon file: JSON array of probabilities.
inline std::vector<double> read_probability_array(const std::string& path) {
  json doc = json::parse(read_file(path));
  if (!doc.is_array()) throw InputError(path + ": expected a JSON array");
  std::vector<double> probs;
  for (const auto& v : doc) probs.push_back(v.get<double>());
  return probs;
}

}  // namespace otmkit::io

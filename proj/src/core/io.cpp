#include "pllforge/core/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "pllforge/core/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pllforge {

static_assert(std::endian::native == std::endian::little,
              "signals.f32 is defined little-endian; big-endian hosts are unsupported");

std::string read_text_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& file, const std::string& content) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << content;
}

static std::string join_indices(const std::set<int>& s) {
  std::string out;
  for (int j : s) {
    if (!out.empty()) out += ';';
    out += std::to_string(j);
  }
  return out;
}

static std::set<int> parse_indices(const std::string& field) {
  std::set<int> out;
  if (trim(field).empty()) return out;
  for (const auto& tok : split(field, ';')) out.insert(int(parse_long(tok)));
  return out;
}

uint64_t TransitionMatrix::checksum() const {
  return fnv1a_bytes(t.d.data(), t.d.size() * sizeof(double));
}

void save_dataset(const PartialDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);

  json files = {{"signals", "signals.f32"},
                {"labels", "labels.csv"},
                {"candidates", "candidates.csv"},
                {"splits", "splits.csv"}};
  if (fs::exists(dir / "features.csv")) files["features"] = "features.csv";

  json manifest = {{"n", ds.records.size()},
                   {"C", ds.label_space.num_classes},
                   {"leads", ds.leads},
                   {"length", ds.length},
                   {"class_names", ds.label_space.class_names},
                   {"superclass_of", ds.label_space.superclass_of},
                   {"files", files}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  {
    std::ofstream out(dir / "signals.f32", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write signals.f32");
    std::vector<float> row;
    for (const auto& rec : ds.records) {
      row.resize(rec.signal.d.size());
      for (size_t i = 0; i < row.size(); i++) row[i] = float(rec.signal.d[i]);
      out.write(reinterpret_cast<const char*>(row.data()),
                std::streamsize(row.size() * sizeof(float)));
    }
  }

  std::ostringstream labels, candidates, splits;
  for (const auto& rec : ds.records) {
    labels << rec.instance_id << ',' << join_indices(rec.ground_truth) << '\n';
    candidates << rec.instance_id << ',' << join_indices(rec.candidate) << ','
               << (rec.ambiguous_flag ? 1 : 0) << '\n';
    splits << rec.instance_id << ',' << split_name(rec.split) << '\n';
  }
  write_text_file(dir / "labels.csv", labels.str());
  write_text_file(dir / "candidates.csv", candidates.str());
  write_text_file(dir / "splits.csv", splits.str());
}

PartialDataset load_dataset(const fs::path& dir) {
  json manifest = json::parse(read_text_file(dir / "manifest.json"));

  PartialDataset ds;
  ds.label_space.num_classes = manifest.at("C").get<int>();
  ds.label_space.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  if (manifest.contains("superclass_of"))
    ds.label_space.superclass_of =
        manifest.at("superclass_of").get<std::map<std::string, std::string>>();
  ds.leads = manifest.at("leads").get<int>();
  ds.length = manifest.at("length").get<int>();
  size_t n = manifest.at("n").get<size_t>();

  std::istringstream labels(read_text_file(dir / "labels.csv"));
  std::string line;
  ds.records.reserve(n);
  while (std::getline(labels, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != 2) throw std::runtime_error("labels.csv: bad row: " + line);
    SignalRecord rec;
    rec.instance_id = fields[0];
    rec.ground_truth = parse_indices(fields[1]);
    rec.candidate = rec.ground_truth;
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.size() != n)
    throw std::runtime_error("manifest n does not match labels.csv row count");

  std::unordered_map<std::string, size_t> by_id;
  for (size_t i = 0; i < ds.records.size(); i++) by_id[ds.records[i].instance_id] = i;

  std::istringstream candidates(read_text_file(dir / "candidates.csv"));
  while (std::getline(candidates, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != 3) throw std::runtime_error("candidates.csv: bad row: " + line);
    auto it = by_id.find(fields[0]);
    if (it == by_id.end()) throw std::runtime_error("candidates.csv: unknown id " + fields[0]);
    ds.records[it->second].candidate = parse_indices(fields[1]);
    ds.records[it->second].ambiguous_flag = parse_long(fields[2]) != 0;
  }

  std::istringstream splits(read_text_file(dir / "splits.csv"));
  while (std::getline(splits, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != 2) throw std::runtime_error("splits.csv: bad row: " + line);
    auto it = by_id.find(fields[0]);
    if (it == by_id.end()) throw std::runtime_error("splits.csv: unknown id " + fields[0]);
    const std::string tag = trim(fields[1]);
    if (tag != "train" && tag != "test")
      throw std::runtime_error("splits.csv: bad split tag " + tag);
    ds.records[it->second].split = tag == "train" ? Split::Train : Split::Test;
  }

  std::ifstream sig(dir / "signals.f32", std::ios::binary);
  if (!sig) throw std::runtime_error("cannot open signals.f32");
  const size_t per = size_t(ds.leads) * ds.length;
  std::vector<float> buf(per);
  for (auto& rec : ds.records) {
    sig.read(reinterpret_cast<char*>(buf.data()), std::streamsize(per * sizeof(float)));
    if (size_t(sig.gcount()) != per * sizeof(float))
      throw std::runtime_error("signals.f32 truncated");
    rec.signal = Matrix(ds.leads, ds.length);
    for (size_t i = 0; i < per; i++) rec.signal.d[i] = double(buf[i]);
  }

  json pfile = manifest.at("files");
  if (fs::exists(dir / "provenance.json"))
    ds.provenance = load_provenance(dir / "provenance.json");
  return ds;
}

fs::path dataset_features_path(const fs::path& dir) { return dir / "features.csv"; }
bool dataset_has_features(const fs::path& dir) { return fs::exists(dataset_features_path(dir)); }

void save_features(const FeatureTable& features, const fs::path& file) {
  std::ostringstream out;
  for (const auto& [id, v] : features.rows) {
    out << id;
    for (double x : v) out << ',' << fmt_double(x);
    out << '\n';
  }
  write_text_file(file, out.str());
}

FeatureTable load_features(const fs::path& file) {
  FeatureTable ft;
  std::istringstream in(read_text_file(file));
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() < 2) throw std::runtime_error("features.csv: bad row: " + line);
    std::vector<double> v;
    v.reserve(fields.size() - 1);
    for (size_t i = 1; i < fields.size(); i++) {
      double x = parse_double(fields[i]);
      if (!std::isfinite(x))
        throw std::runtime_error("features.csv: non-finite value for " + fields[0]);
      v.push_back(x);
    }
    ft.add(fields[0], std::move(v));
  }
  return ft;
}

void save_transition(const TransitionMatrix& t, const fs::path& file) {
  std::ostringstream out;
  if (t.kind == TransitionMatrix::Kind::InstanceLevel) out << "instance_id,";
  for (size_t j = 0; j < t.col_names.size(); j++) {
    if (j) out << ',';
    out << t.col_names[j];
  }
  out << '\n';
  for (int i = 0; i < t.t.rows; i++) {
    if (t.kind == TransitionMatrix::Kind::InstanceLevel) out << t.row_ids[i] << ',';
    for (int j = 0; j < t.t.cols; j++) {
      if (j) out << ',';
      out << fmt_double(t.t.at(i, j));
    }
    out << '\n';
  }
  write_text_file(file, out.str());
}

TransitionMatrix load_transition(const fs::path& file) {
  std::istringstream in(read_text_file(file));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("transition.csv: empty file");
  auto header = split(line, ',');
  TransitionMatrix t;
  size_t first_col = 0;
  if (!header.empty() && trim(header[0]) == "instance_id") {
    t.kind = TransitionMatrix::Kind::InstanceLevel;
    first_col = 1;
  } else {
    t.kind = TransitionMatrix::Kind::ClassLevel;
  }
  for (size_t j = first_col; j < header.size(); j++) t.col_names.push_back(trim(header[j]));
  const int C = int(t.col_names.size());
  if (C == 0) throw std::runtime_error("transition.csv: no class columns");

  std::vector<double> data;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (int(fields.size()) != C + int(first_col))
      throw std::runtime_error("transition.csv: bad row width: " + line);
    if (first_col) t.row_ids.push_back(fields[0]);
    for (int j = 0; j < C; j++) data.push_back(parse_double(fields[j + first_col]));
  }
  const int rows = int(data.size()) / C;
  if (t.kind == TransitionMatrix::Kind::ClassLevel) {
    if (rows != C) throw std::runtime_error("transition.csv: class-level matrix is not square");
    t.row_ids = t.col_names;
  }
  t.t = Matrix(rows, C);
  t.t.d = std::move(data);
  return t;
}

void save_provenance(const Provenance& p, const fs::path& file) {
  json j = {{"strategy", p.strategy}, {"p", p.p},       {"epsilon", p.epsilon},
            {"seed", p.seed},         {"matrix_checksum", p.matrix_checksum}};
  j["r"] = p.r ? json(*p.r) : json(nullptr);
  write_text_file(file, j.dump(2) + "\n");
}

Provenance load_provenance(const fs::path& file) {
  json j = json::parse(read_text_file(file));
  Provenance p;
  p.strategy = j.at("strategy").get<std::string>();
  p.p = j.at("p").get<double>();
  p.epsilon = j.at("epsilon").get<double>();
  p.seed = j.at("seed").get<uint64_t>();
  p.matrix_checksum = j.at("matrix_checksum").get<std::string>();
  if (!j.at("r").is_null()) p.r = j.at("r").get<int>();
  return p;
}

void save_predictions(const std::vector<std::string>& ids, const Matrix& probs,
                      const fs::path& file) {
  if (int(ids.size()) != probs.rows)
    throw std::runtime_error("save_predictions: id/row count mismatch");
  std::ostringstream out;
  for (int i = 0; i < probs.rows; i++) {
    out << ids[i];
    for (int j = 0; j < probs.cols; j++) out << ',' << fmt_double(probs.at(i, j));
    out << '\n';
  }
  write_text_file(file, out.str());
}

std::pair<std::vector<std::string>, Matrix> load_predictions(const fs::path& file) {
  std::istringstream in(read_text_file(file));
  std::string line;
  std::vector<std::string> ids;
  std::vector<double> data;
  int cols = -1;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() < 2) throw std::runtime_error("predictions: bad row: " + line);
    if (cols < 0)
      cols = int(fields.size()) - 1;
    else if (int(fields.size()) - 1 != cols)
      throw std::runtime_error("predictions: ragged rows");
    ids.push_back(fields[0]);
    for (int j = 0; j < cols; j++) data.push_back(parse_double(fields[j + 1]));
  }
  Matrix m(int(ids.size()), cols < 0 ? 0 : cols);
  m.d = std::move(data);
  return {std::move(ids), std::move(m)};
}

}  // namespace pllforge

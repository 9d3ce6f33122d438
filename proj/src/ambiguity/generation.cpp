#include "pllforge/ambiguity/generation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

#include "pllforge/core/io.hpp"
#include "pllforge/core/prototypes.hpp"
#include "pllforge/core/rng.hpp"
#include "pllforge/core/util.hpp"

namespace pllforge {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Random: return "random";
    case Strategy::TreatmentDriven: return "treatment";
    case Strategy::TaxonomyDriven: return "taxonomy";
    case Strategy::ClassCardiologist: return "class-cardio";
    case Strategy::InstanceCardiologist: return "instance-cardio";
    case Strategy::ModelDriven: return "model";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  for (Strategy s : {Strategy::Random, Strategy::TreatmentDriven, Strategy::TaxonomyDriven,
                     Strategy::ClassCardiologist, Strategy::InstanceCardiologist,
                     Strategy::ModelDriven})
    if (name == strategy_name(s)) return s;
  throw std::invalid_argument("unknown strategy: " + name);
}

bool strategy_is_instance_level(Strategy s) {
  return s == Strategy::InstanceCardiologist || s == Strategy::ModelDriven;
}

void GenerationConfig::validate() const {
  if (p < 0.0 || p > 0.8)
    throw std::invalid_argument("p must be in [0, 0.8], got " + fmt_double(p));
  if (epsilon < 0.0 || epsilon > 1.0)
    throw std::invalid_argument("epsilon must be in [0, 1], got " + fmt_double(epsilon));
  if (r && *r <= 0) throw std::invalid_argument("r must be positive when set");
}

double epsilon_random(const GenerationConfig& cfg) { return cfg.epsilon; }

std::vector<double> epsilon_class_level(const TransitionMatrix& t,
                                        const std::set<int>& ground_truth) {
  if (t.kind != TransitionMatrix::Kind::ClassLevel)
    throw std::invalid_argument("epsilon_class_level needs a class-level matrix");
  if (ground_truth.empty())
    throw std::invalid_argument("epsilon_class_level: empty ground truth");
  const int C = t.t.cols;
  std::vector<double> eps(C, 0.0);
  for (int k : ground_truth)
    for (int z = 0; z < C; z++) eps[z] += t.t.at(k, z);
  for (int z = 0; z < C; z++) eps[z] /= double(ground_truth.size());
  return eps;
}

TransitionMatrix build_treatment_matrix(const std::filesystem::path& csv,
                                        const LabelSpace& space) {
  TransitionMatrix raw = load_transition(csv);
  if (raw.kind != TransitionMatrix::Kind::ClassLevel || raw.t.rows != raw.t.cols)
    throw std::invalid_argument("treatment matrix must be a square class-level CSV");
  if (int(raw.col_names.size()) != space.num_classes)
    throw std::invalid_argument("treatment matrix class count does not match label space");

  // Reorder columns/rows into label-space order; names must match exactly.
  std::vector<int> perm(space.num_classes);
  for (int j = 0; j < space.num_classes; j++) {
    int idx = -1;
    for (size_t k = 0; k < raw.col_names.size(); k++)
      if (raw.col_names[k] == space.class_names[j]) idx = int(k);
    if (idx < 0)
      throw std::invalid_argument("treatment matrix missing class " + space.class_names[j]);
    perm[j] = idx;
  }
  TransitionMatrix t;
  t.kind = TransitionMatrix::Kind::ClassLevel;
  t.col_names = space.class_names;
  t.row_ids = space.class_names;
  t.t = Matrix(space.num_classes, space.num_classes);
  int clamped = 0;
  for (int i = 0; i < space.num_classes; i++)
    for (int j = 0; j < space.num_classes; j++) {
      double v = raw.t.at(perm[i], perm[j]);
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        clamped++;
      }
      t.t.at(i, j) = v;
    }
  if (clamped > 0)
    std::cerr << "warning: clamped " << clamped
              << " out-of-range treatment weight(s) to [0,1]\n";
  return t;
}

TransitionMatrix build_class_cardiologist_matrix(const ClassPrototypeSet& prototypes,
                                                 const LabelSpace& space) {
  const int C = space.num_classes;
  for (int j = 0; j < C; j++)
    if (!prototypes.defined(j))
      throw std::invalid_argument("prototype undefined for class " + space.class_names[j]);

  Matrix sim(C, C);
  for (int j = 0; j < C; j++)
    for (int k = 0; k < C; k++)
      sim.at(j, k) = j == k ? 1.0
                            : cosine_similarity(prototypes.get(j), prototypes.get(k));

  // Min-max over off-diagonal entries only; self-similarity would otherwise
  // pin the max. The diagonal is never sampled.
  double lo = sim.at(0, 1), hi = sim.at(0, 1);
  for (int j = 0; j < C; j++)
    for (int k = 0; k < C; k++) {
      if (j == k) continue;
      lo = std::min(lo, sim.at(j, k));
      hi = std::max(hi, sim.at(j, k));
    }
  if (!(hi > lo))
    throw std::invalid_argument("class-cardiologist matrix: degenerate normalization");

  TransitionMatrix t;
  t.kind = TransitionMatrix::Kind::ClassLevel;
  t.col_names = space.class_names;
  t.row_ids = space.class_names;
  t.t = Matrix(C, C);
  for (int j = 0; j < C; j++)
    for (int k = 0; k < C; k++)
      t.t.at(j, k) = j == k ? 1.0 : (sim.at(j, k) - lo) / (hi - lo);
  return t;
}

TransitionMatrix build_taxonomy_matrix(const LabelSpace& space, double epsilon) {
  if (!space.has_superclasses())
    throw std::invalid_argument("taxonomy strategy requires a superclass map");
  const int C = space.num_classes;
  TransitionMatrix t;
  t.kind = TransitionMatrix::Kind::ClassLevel;
  t.col_names = space.class_names;
  t.row_ids = space.class_names;
  t.t = Matrix(C, C, 0.0);
  for (int j = 0; j < C; j++)
    for (int k = 0; k < C; k++)
      if (j != k && space.superclass(j) == space.superclass(k)) t.t.at(j, k) = epsilon;
  return t;
}

TransitionMatrix build_instance_cardiologist_matrix(const FeatureTable& features,
                                                    const ClassPrototypeSet& prototypes,
                                                    const PartialDataset& ds) {
  const int C = ds.label_space.num_classes;
  for (int j = 0; j < C; j++)
    if (!prototypes.defined(j))
      throw std::invalid_argument("prototype undefined for class " +
                                  ds.label_space.class_names[j]);
  auto train = ds.split_indices(Split::Train);
  TransitionMatrix t;
  t.kind = TransitionMatrix::Kind::InstanceLevel;
  t.col_names = ds.label_space.class_names;
  t.t = Matrix(int(train.size()), C);
  for (size_t i = 0; i < train.size(); i++) {
    const auto& rec = ds.records[train[i]];
    t.row_ids.push_back(rec.instance_id);
    const auto& psi = features.get(rec.instance_id);
    for (int j = 0; j < C; j++)
      t.t.at(int(i), j) = cosine_similarity(psi, prototypes.get(j));
  }
  t.t = minmax_normalize(t.t);
  return t;
}

TransitionMatrix build_model_driven_matrix(const std::vector<std::string>& ids,
                                           const Matrix& predictions,
                                           const PartialDataset& ds) {
  const int C = ds.label_space.num_classes;
  if (predictions.cols != C)
    throw std::invalid_argument("model predictions have wrong class count");
  for (double v : predictions.d)
    if (v < 0.0 || v > 1.0)
      throw std::invalid_argument("model predictions must lie in [0,1]");

  std::unordered_map<std::string, int> row_of;
  for (size_t i = 0; i < ids.size(); i++) row_of[ids[i]] = int(i);

  auto train = ds.split_indices(Split::Train);
  TransitionMatrix t;
  t.kind = TransitionMatrix::Kind::InstanceLevel;
  t.col_names = ds.label_space.class_names;
  t.t = Matrix(int(train.size()), C, 0.0);
  for (size_t i = 0; i < train.size(); i++) {
    const auto& rec = ds.records[train[i]];
    t.row_ids.push_back(rec.instance_id);
    auto it = row_of.find(rec.instance_id);
    if (it == row_of.end())
      throw std::invalid_argument("no model prediction for " + rec.instance_id);
    const double* f = predictions.row(it->second);
    double mx = 0.0;
    for (int k = 0; k < C; k++)
      if (!rec.ground_truth.count(k)) mx = std::max(mx, f[k]);
    if (mx == 0.0) continue;  // no confident incorrect class: zero row, no ambiguity
    for (int k = 0; k < C; k++)
      if (!rec.ground_truth.count(k)) t.t.at(int(i), k) = f[k] / mx;
  }
  return t;
}

PartialDataset generate_candidates(const PartialDataset& ds, const GenerationConfig& cfg,
                                   const std::optional<TransitionMatrix>& t) {
  cfg.validate();
  if (cfg.strategy != Strategy::Random) {
    if (!t) throw std::invalid_argument("strategy requires a transition matrix");
    const bool want_instance = strategy_is_instance_level(cfg.strategy);
    const bool got_instance = t->kind == TransitionMatrix::Kind::InstanceLevel;
    if (want_instance != got_instance)
      throw std::invalid_argument("transition matrix kind does not match strategy");
  }

  std::unordered_map<std::string, int> instance_row;
  if (t && t->kind == TransitionMatrix::Kind::InstanceLevel) {
    auto train = ds.split_indices(Split::Train);
    if (size_t(t->t.rows) != train.size())
      throw std::invalid_argument("instance-level matrix row count (" +
                                  std::to_string(t->t.rows) + ") does not match train size (" +
                                  std::to_string(train.size()) + ")");
    for (size_t i = 0; i < t->row_ids.size(); i++) instance_row[t->row_ids[i]] = int(i);
  }

  const int C = ds.label_space.num_classes;
  PartialDataset out = ds;
  out.provenance.strategy = strategy_name(cfg.strategy);
  out.provenance.p = cfg.p;
  out.provenance.epsilon = cfg.epsilon;
  out.provenance.r = cfg.r;
  out.provenance.seed = cfg.seed;
  out.provenance.matrix_checksum = t ? std::to_string(t->checksum()) : "";

  const int64_t n = int64_t(out.records.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < n; i++) {
    SignalRecord& rec = out.records[i];
    if (rec.split != Split::Train) {
      rec.candidate = rec.ground_truth;
      rec.ambiguous_flag = false;
      continue;
    }
    const uint64_t id_key = fnv1a(rec.instance_id);
    // Coupled draws: the ambiguation coin and per-class coins come from
    // fixed per-record streams, so flips are monotone in p and epsilon.
    Rng ambig = derive_rng(cfg.seed, {id_key, fnv1a("ambiguate")});
    rec.candidate = rec.ground_truth;
    rec.ambiguous_flag = ambig.uniform() < cfg.p;
    if (!rec.ambiguous_flag) continue;

    std::vector<double> eps;
    if (cfg.strategy == Strategy::Random) {
      eps.assign(C, epsilon_random(cfg));
    } else if (!strategy_is_instance_level(cfg.strategy)) {
      eps = epsilon_class_level(*t, rec.ground_truth);
    } else {
      auto it = instance_row.find(rec.instance_id);
      if (it == instance_row.end())
        throw std::invalid_argument("instance-level matrix missing row for " +
                                    rec.instance_id);
      eps.assign(t->t.row(it->second), t->t.row(it->second) + C);
    }

    std::vector<int> accepted;
    for (int j = 0; j < C; j++) {
      if (rec.ground_truth.count(j)) continue;
      Rng coin = derive_rng(cfg.seed, {id_key, fnv1a("class"), uint64_t(j)});
      if (coin.uniform() < eps[j]) accepted.push_back(j);
    }
    if (cfg.r && int(accepted.size()) > *cfg.r) {
      // Keep r of the accepted labels, chosen uniformly; acceptance already
      // happened with the eps weights, the cap only truncates.
      Rng cap = derive_rng(cfg.seed, {id_key, fnv1a("rcap")});
      shuffle(accepted, cap);
      accepted.resize(size_t(*cfg.r));
      std::sort(accepted.begin(), accepted.end());
    }
    rec.candidate.insert(accepted.begin(), accepted.end());
  }
  return out;
}

double flip_probability(const PartialDataset& ds) {
  const int C = ds.label_space.num_classes;
  double total = 0;
  int64_t counted = 0;
  for (const auto& rec : ds.records) {
    if (rec.split != Split::Train) continue;
    const int negatives = C - int(rec.ground_truth.size());
    if (negatives <= 0) continue;
    int false_pos = int(rec.candidate.size()) - int(rec.ground_truth.size());
    total += double(false_pos) / double(negatives);
    counted++;
  }
  if (counted == 0) throw std::invalid_argument("flip_probability: empty train split");
  return total / double(counted);
}

}  // namespace pllforge

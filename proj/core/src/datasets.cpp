#include "geofew/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "geofew/rng.hpp"

namespace geofew {

namespace {

constexpr std::size_t kRejectionBudget = 20000;

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double ss = 0.0;
  do {
    ss = 0.0;
    for (double& x : v) {
      x = rand_normal(rng);
      ss += x * x;
    }
  } while (ss <= kNormEpsilon);
  const double nrm = std::sqrt(ss);
  for (double& x : v) x /= nrm;
  return v;
}

}  // namespace

std::span<const double> LabeledDataset::example_row(std::size_t i) const {
  return std::span<const double>(examples.data.data() + i * dim(), dim());
}

std::vector<std::size_t> LabeledDataset::indices_of(
    int category, std::optional<Split> split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != category) continue;
    if (split && split_tags[i] != *split) continue;
    out.push_back(i);
  }
  return out;
}

Tensor LabeledDataset::gather(const std::vector<std::size_t>& indices) const {
  Tensor out({indices.size(), dim()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto row = example_row(indices[i]);
    std::copy(row.begin(), row.end(), out.data.begin() + i * dim());
  }
  return out;
}

void BlobSpec::validate() const {
  if (n_categories == 0) throw ConfigError("BlobSpec: n_categories must be > 0");
  if (dim == 0) throw ConfigError("BlobSpec: dim must be > 0");
  if (train_per_category + val_per_category + test_per_category == 0) {
    throw ConfigError("BlobSpec: no examples requested");
  }
  if (max_pairwise_cosine < 0.0 || max_pairwise_cosine >= 1.0) {
    throw ConfigError("BlobSpec: max_pairwise_cosine outside [0, 1)");
  }
  if (noise_sigma < 0.0) throw ConfigError("BlobSpec: negative noise_sigma");
  if (max_pairwise_cosine == 0.0 && n_categories > dim) {
    throw ConfigError(
        "BlobSpec: an exact-zero cosine bound needs n_categories <= dim");
  }
  std::vector<bool> is_target(n_categories, false);
  for (const PlantedPair& pair : planted_pairs) {
    if (pair.target >= n_categories || pair.source >= n_categories ||
        pair.target == pair.source) {
      throw ConfigError("BlobSpec: planted pair indices out of range");
    }
    if (pair.cosine < 0.0 || pair.cosine >= 1.0) {
      throw ConfigError("BlobSpec: planted pair cosine outside [0, 1)");
    }
    if (is_target[pair.target]) {
      throw ConfigError("BlobSpec: category " + std::to_string(pair.target) +
                        " is the target of two planted pairs");
    }
    is_target[pair.target] = true;
  }
  for (const PlantedPair& pair : planted_pairs) {
    if (is_target[pair.source]) {
      throw ConfigError(
          "BlobSpec: a planted pair source cannot itself be a target");
    }
  }
}

std::vector<std::vector<double>> blob_class_means(const BlobSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, 0x6d65616e73ULL));
  std::vector<std::vector<double>> means(spec.n_categories);

  // Pair targets are constructed after everything else, each against its
  // source; all other categories are sampled under the bound.
  auto pair_for = [&spec](std::size_t c) -> const PlantedPair* {
    for (const PlantedPair& pair : spec.planted_pairs)
      if (pair.target == c) return &pair;
    return nullptr;
  };

  if (spec.max_pairwise_cosine == 0.0 && spec.planted_pairs.empty()) {
    // Rejection cannot land on the measure-zero bound; Gram-Schmidt a random
    // Gaussian frame instead (feasible because n_categories <= dim).
    std::vector<std::vector<double>> frame;
    while (frame.size() < spec.n_categories) {
      std::vector<double> v = random_unit(rng, spec.dim);
      for (const auto& m : frame) {
        const double proj = dot(v, m);
        for (std::size_t j = 0; j < spec.dim; ++j) v[j] -= proj * m[j];
      }
      const double nrm = std::sqrt(dot(v, v));
      if (nrm <= 1e-6) continue;  // nearly dependent draw, resample
      for (double& x : v) x /= nrm;
      frame.push_back(std::move(v));
    }
    return frame;
  }

  // Planted relations form small clusters (a source may anchor several
  // targets); the bound only constrains categories from different clusters.
  std::vector<std::vector<std::size_t>> adjacent(spec.n_categories);
  for (const PlantedPair& pair : spec.planted_pairs) {
    adjacent[pair.target].push_back(pair.source);
    adjacent[pair.source].push_back(pair.target);
  }
  auto same_cluster = [&adjacent](std::size_t a, std::size_t b) {
    for (std::size_t n : adjacent[a]) {
      if (n == b) return true;
      for (std::size_t nn : adjacent[b])
        if (nn == n) return true;
    }
    return false;
  };

  auto respects_bound = [&](const std::vector<double>& v,
                            std::size_t self) -> bool {
    for (std::size_t o = 0; o < spec.n_categories; ++o) {
      if (o == self || means[o].empty()) continue;
      if (same_cluster(self, o)) continue;  // exempt from the bound
      if (dot(v, means[o]) > spec.max_pairwise_cosine) return false;
    }
    return true;
  };

  // unplanted categories first, by plain rejection
  for (std::size_t c = 0; c < spec.n_categories; ++c) {
    if (pair_for(c) != nullptr) continue;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kRejectionBudget; ++attempt) {
      std::vector<double> v = random_unit(rng, spec.dim);
      if (respects_bound(v, c)) {
        means[c] = std::move(v);
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw ConfigError(
          "generate_blobs: rejection budget exhausted placing class mean " +
          std::to_string(c) + " with cosine bound " +
          std::to_string(spec.max_pairwise_cosine) +
          "; a larger dim (or looser bound) makes the packing feasible");
    }
  }

  // planted targets: v = c * source + sqrt(1 - c^2) * w with w orthogonal to
  // the source, re-drawn until the bound holds against everyone else
  for (std::size_t c = 0; c < spec.n_categories; ++c) {
    const PlantedPair* pair = pair_for(c);
    if (pair == nullptr) continue;
    const std::vector<double>& source = means[pair->source];
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kRejectionBudget; ++attempt) {
      std::vector<double> w = random_unit(rng, spec.dim);
      const double proj = dot(w, source);
      for (std::size_t j = 0; j < spec.dim; ++j) w[j] -= proj * source[j];
      const double nrm = std::sqrt(dot(w, w));
      if (nrm <= 1e-6) continue;
      std::vector<double> v(spec.dim);
      const double ortho = std::sqrt(1.0 - pair->cosine * pair->cosine);
      for (std::size_t j = 0; j < spec.dim; ++j)
        v[j] = pair->cosine * source[j] + ortho * w[j] / nrm;
      if (respects_bound(v, c)) {
        means[c] = std::move(v);
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw ConfigError(
          "generate_blobs: rejection budget exhausted placing planted mean " +
          std::to_string(c) +
          "; a larger dim (or looser bound) makes the packing feasible");
    }
  }
  return means;
}

LabeledDataset generate_blobs(const BlobSpec& spec) {
  const auto means = blob_class_means(spec);
  std::mt19937_64 rng(mix_seed(spec.seed, 0x626c6f6273ULL));

  const std::size_t per_cat =
      spec.train_per_category + spec.val_per_category + spec.test_per_category;
  LabeledDataset dataset;
  dataset.examples = Tensor({spec.n_categories * per_cat, spec.dim});
  dataset.labels.resize(spec.n_categories * per_cat);
  dataset.split_tags.resize(spec.n_categories * per_cat);

  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.n_categories; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "cat_%02zu", c);
    dataset.category_names.emplace_back(name);
    for (std::size_t e = 0; e < per_cat; ++e, ++row) {
      for (std::size_t j = 0; j < spec.dim; ++j) {
        dataset.examples.data[row * spec.dim + j] =
            means[c][j] + spec.noise_sigma * rand_normal(rng);
      }
      dataset.labels[row] = static_cast<int>(c);
      if (e < spec.train_per_category) {
        dataset.split_tags[row] = Split::kTrain;
      } else if (e < spec.train_per_category + spec.val_per_category) {
        dataset.split_tags[row] = Split::kVal;
      } else {
        dataset.split_tags[row] = Split::kTest;
      }
    }
  }
  return dataset;
}

std::vector<std::size_t> DatasetView::indices(
    int category, std::optional<Split> split) const {
  if (std::find(category_ids.begin(), category_ids.end(), category) ==
      category_ids.end()) {
    throw ContractError("DatasetView: category " + std::to_string(category) +
                        " is not part of this view");
  }
  return data->indices_of(category, use_splits ? split : std::nullopt);
}

Tensor DatasetView::gather(const std::vector<std::size_t>& indices) const {
  return data->gather(indices);
}

BaseNovelSplit split_base_novel(const LabeledDataset& dataset,
                                const std::vector<int>& base_ids,
                                const std::vector<int>& novel_ids) {
  if (base_ids.empty() || novel_ids.empty()) {
    throw ContractError("split_base_novel: both id sets must be non-empty");
  }
  std::set<int> base_set(base_ids.begin(), base_ids.end());
  std::vector<int> overlap;
  for (int id : novel_ids)
    if (base_set.count(id)) overlap.push_back(id);
  if (!overlap.empty()) {
    std::ostringstream os;
    os << "split_base_novel: ids in both sets:";
    for (int id : overlap) os << " " << id;
    throw ContractError(os.str());
  }
  auto check_known = [&dataset](int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= dataset.n_categories()) {
      throw ContractError("split_base_novel: unknown category id " +
                          std::to_string(id));
    }
  };
  for (int id : base_ids) check_known(id);
  for (int id : novel_ids) check_known(id);

  BaseNovelSplit split;
  split.base = DatasetView{&dataset, base_ids, true};
  split.novel_pool = DatasetView{&dataset, novel_ids, false};
  return split;
}

// ---------------------------------------------------------------------------
// CSV

void save_csv(const LabeledDataset& dataset, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ParseError("save_csv: cannot open '" + path + "' to write");
  if (dataset.grid_dims) {
    os << "# dims: " << dataset.grid_dims->first << " "
       << dataset.grid_dims->second << "\n";
  }
  char buf[32];
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    os << dataset.labels[i];
    const auto row = dataset.example_row(i);
    for (double x : row) {
      std::snprintf(buf, sizeof(buf), "%.17g", x);
      os << "," << buf;
    }
    os << "\n";
  }
  if (!os) throw ParseError("save_csv: write to '" + path + "' failed");
}

LabeledDataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("load_csv: cannot open '" + path + "'");

  LabeledDataset dataset;
  std::vector<double> values;
  std::size_t width = 0;
  std::size_t line_no = 0;
  std::string line;
  int max_label = -1;

  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::size_t h = 0, w = 0;
      if (std::sscanf(line.c_str(), "# dims: %zu %zu", &h, &w) == 2) {
        dataset.grid_dims = {h, w};
        continue;
      }
      throw ParseError("load_csv: line " + std::to_string(line_no) +
                       ": unrecognized header '" + line + "'");
    }
    std::stringstream ss(line);
    std::string cell;
    if (!std::getline(ss, cell, ',')) {
      throw ParseError("load_csv: line " + std::to_string(line_no) +
                       ": missing label column");
    }
    int label = 0;
    try {
      std::size_t pos = 0;
      label = std::stoi(cell, &pos);
      if (pos != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ParseError("load_csv: line " + std::to_string(line_no) +
                       ": label '" + cell + "' is not an integer");
    }
    if (label < 0) {
      throw ParseError("load_csv: line " + std::to_string(line_no) +
                       ": negative label " + std::to_string(label));
    }

    std::size_t row_width = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        values.push_back(std::stod(cell, &pos));
        if (pos != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError("load_csv: line " + std::to_string(line_no) +
                         ": value '" + cell + "' is not a number");
      }
      ++row_width;
    }
    if (row_width == 0) {
      throw ParseError("load_csv: line " + std::to_string(line_no) +
                       ": no feature columns");
    }
    if (width == 0) {
      width = row_width;
    } else if (row_width != width) {
      throw ParseError("load_csv: line " + std::to_string(line_no) + ": " +
                       std::to_string(row_width) + " feature columns, expected " +
                       std::to_string(width));
    }
    dataset.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  if (dataset.labels.empty()) {
    throw ParseError("load_csv: '" + path + "' contains no examples");
  }
  if (dataset.grid_dims &&
      dataset.grid_dims->first * dataset.grid_dims->second != width) {
    throw ParseError("load_csv: declared dims " +
                     std::to_string(dataset.grid_dims->first) + "x" +
                     std::to_string(dataset.grid_dims->second) +
                     " do not match row width " + std::to_string(width));
  }

  dataset.examples = Tensor({dataset.labels.size(), width});
  dataset.examples.data = std::move(values);
  dataset.split_tags.assign(dataset.labels.size(), Split::kTrain);
  for (int c = 0; c <= max_label; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "cat_%02d", c);
    dataset.category_names.emplace_back(name);
  }
  return dataset;
}

void assign_splits(LabeledDataset& dataset, std::size_t train_per_category,
                   std::size_t val_per_category,
                   std::size_t test_per_category) {
  const std::size_t per_cat =
      train_per_category + val_per_category + test_per_category;
  std::vector<std::size_t> seen(dataset.n_categories(), 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto c = static_cast<std::size_t>(dataset.labels[i]);
    const std::size_t e = seen[c]++;
    if (e >= per_cat) {
      throw ContractError("assign_splits: category " + std::to_string(c) +
                          " has more rows than the declared split counts");
    }
    if (e < train_per_category) {
      dataset.split_tags[i] = Split::kTrain;
    } else if (e < train_per_category + val_per_category) {
      dataset.split_tags[i] = Split::kVal;
    } else {
      dataset.split_tags[i] = Split::kTest;
    }
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] != per_cat) {
      throw ContractError("assign_splits: category " + std::to_string(c) +
                          " has " + std::to_string(seen[c]) +
                          " rows, expected " + std::to_string(per_cat));
    }
  }
}

}  // namespace geofew

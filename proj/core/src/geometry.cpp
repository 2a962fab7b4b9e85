#include "geofew/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace geofew {

namespace {

double norm(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

void require_feature_matrix(const Tensor& features, const char* op) {
  if (!features.is_matrix() || features.rows() == 0) {
    throw ContractError(std::string(op) +
                        ": expected a non-empty k x d feature matrix, got " +
                        shape_string(features));
  }
}

}  // namespace

UnitVector UnitVector::normalized(std::vector<double> v) {
  const double nrm = norm(v);
  if (nrm <= kNormEpsilon) {
    throw DegenerateInputError("UnitVector: input norm " + std::to_string(nrm) +
                               " is below the degeneracy threshold");
  }
  for (double& x : v) x /= nrm;
  return UnitVector(std::move(v));
}

WeightMatrixView WeightMatrixView::from(const Tensor& base,
                                        const Tensor& novel) {
  if (base.numel() > 0 && novel.numel() > 0 && base.rows() != novel.rows()) {
    throw ShapeError("WeightMatrixView: base " + shape_string(base) +
                     " and novel " + shape_string(novel) +
                     " have different feature dimensions");
  }
  WeightMatrixView view;
  auto append = [&view](const Tensor& w, WeightGroup tag) {
    if (!w.is_matrix()) return;
    const std::size_t d = w.rows(), c = w.cols();
    for (std::size_t j = 0; j < c; ++j) {
      std::vector<double> col(d);
      for (std::size_t i = 0; i < d; ++i) col[i] = w.at(i, j);
      view.columns.push_back(std::move(col));
      view.tags.push_back(tag);
    }
  };
  append(base, WeightGroup::kBase);
  append(novel, WeightGroup::kNovel);
  return view;
}

std::size_t WeightMatrixView::base_count() const {
  return static_cast<std::size_t>(
      std::count(tags.begin(), tags.end(), WeightGroup::kBase));
}

std::size_t WeightMatrixView::novel_count() const {
  return tags.size() - base_count();
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine: dimensions " + std::to_string(a.size()) +
                     " and " + std::to_string(b.size()) + " differ");
  }
  const double na = norm(a), nb = norm(b);
  if (na <= kNormEpsilon || nb <= kNormEpsilon) {
    throw DegenerateInputError("cosine: zero vector (norms " +
                               std::to_string(na) + ", " + std::to_string(nb) +
                               ")");
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::min(1.0, std::max(-1.0, dot / (na * nb)));
}

UnitVector aggregate_type1(const Tensor& features) {
  require_feature_matrix(features, "aggregate_type1");
  const std::size_t k = features.rows(), d = features.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += features.at(i, j);
  for (double& x : mean) x /= static_cast<double>(k);
  return UnitVector::normalized(std::move(mean));
}

UnitVector aggregate_type2(const Tensor& features) {
  require_feature_matrix(features, "aggregate_type2");
  const std::size_t k = features.rows(), d = features.cols();
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> f(d);
    for (std::size_t j = 0; j < d; ++j) f[j] = features.at(i, j);
    const double nrm = norm(f);
    if (nrm <= kNormEpsilon) {
      throw DegenerateInputError("aggregate_type2: feature row " +
                                 std::to_string(i) + " has near-zero norm");
    }
    for (std::size_t j = 0; j < d; ++j) acc[j] += f[j] / nrm;
  }
  return UnitVector::normalized(std::move(acc));
}

Tensor& aggregate_rows(Tape& tape, Tensor& features, int type) {
  require_feature_matrix(features, "aggregate_rows");
  if (type == 1) {
    Tensor& mean = tape.scale(tape.col_sum(features),
                              1.0 / static_cast<double>(features.rows()));
    return tape.l2_normalize_rows(mean);
  }
  if (type == 2) {
    Tensor& summed = tape.col_sum(tape.l2_normalize_rows(features));
    return tape.l2_normalize_rows(summed);
  }
  throw ConfigError("aggregate_rows: type must be 1 or 2, got " +
                    std::to_string(type));
}

Tensor imprint_novel_weights(const std::vector<Tensor>& support_per_category,
                             int type) {
  if (support_per_category.empty()) {
    throw ContractError("imprint_novel_weights: no categories");
  }
  if (type != 1 && type != 2) {
    throw ConfigError("imprint_novel_weights: type must be 1 or 2, got " +
                      std::to_string(type));
  }
  const std::size_t d = support_per_category.front().cols();
  const std::size_t n = support_per_category.size();
  Tensor weights({d, n});
  for (std::size_t c = 0; c < n; ++c) {
    const Tensor& features = support_per_category[c];
    if (!features.is_matrix() || features.rows() == 0) {
      throw ContractError("imprint_novel_weights: category " +
                          std::to_string(c) + " has no support features");
    }
    if (features.cols() != d) {
      throw ShapeError("imprint_novel_weights: category " + std::to_string(c) +
                       " has width " + std::to_string(features.cols()) +
                       ", expected " + std::to_string(d));
    }
    const std::size_t k = features.rows();
    std::vector<double> col(d, 0.0);
    if (type == 1) {
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) col[j] += features.at(i, j);
      for (double& x : col) x /= static_cast<double>(k);
    } else {
      for (std::size_t i = 0; i < k; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j)
          ss += features.at(i, j) * features.at(i, j);
        const double nrm = std::sqrt(ss);
        if (nrm <= kNormEpsilon) {
          throw DegenerateInputError("imprint_novel_weights: category " +
                                     std::to_string(c) + " row " +
                                     std::to_string(i) + " has near-zero norm");
        }
        for (std::size_t j = 0; j < d; ++j) col[j] += features.at(i, j) / nrm;
      }
    }
    for (std::size_t j = 0; j < d; ++j) weights.at(j, c) = col[j];
  }
  return weights;
}

Tensor angular_distance_matrix(const WeightMatrixView& w) {
  const std::size_t total = w.columns.size();
  const std::size_t n_base = w.base_count();
  const std::size_t n_novel = w.novel_count();
  std::vector<std::vector<double>> unit(total);
  for (std::size_t i = 0; i < total; ++i) {
    const double nrm = norm(w.columns[i]);
    if (nrm <= kNormEpsilon) {
      throw DegenerateInputError("angular_distance_matrix: column " +
                                 std::to_string(i) + " has near-zero norm");
    }
    unit[i].resize(w.columns[i].size());
    for (std::size_t j = 0; j < unit[i].size(); ++j)
      unit[i][j] = w.columns[i][j] / nrm;
  }
  Tensor u({total, n_novel});
  for (std::size_t i = 0; i < total; ++i) {
    for (std::size_t j = 0; j < n_novel; ++j) {
      if (i == n_base + j) {
        u.at(i, j) = 0.0;  // a weight paired with itself
        continue;
      }
      double dot = 0.0;
      for (std::size_t p = 0; p < unit[i].size(); ++p)
        dot += unit[i][p] * unit[n_base + j][p];
      u.at(i, j) = std::min(1.0, std::max(-1.0, dot));
    }
  }
  return u;
}

}  // namespace geofew

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "geofew/datasets.hpp"

using geofew::BlobSpec;
using geofew::LabeledDataset;
using geofew::Split;
using geofew::Tensor;

namespace {

BlobSpec small_spec() {
  BlobSpec spec;
  spec.n_categories = 6;
  spec.dim = 8;
  spec.train_per_category = 10;
  spec.val_per_category = 4;
  spec.test_per_category = 4;
  spec.max_pairwise_cosine = 0.3;
  spec.noise_sigma = 0.1;
  spec.seed = 11;
  return spec;
}

double pairwise_max_cosine(const std::vector<std::vector<double>>& means) {
  double max_cos = -1.0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < means[a].size(); ++j)
        dot += means[a][j] * means[b][j];
      max_cos = std::max(max_cos, dot);
    }
  }
  return max_cos;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("blob generation") {
  SUBCASE("noiseless examples sit exactly on their class means") {
    BlobSpec spec = small_spec();
    spec.noise_sigma = 0.0;
    const LabeledDataset data = geofew::generate_blobs(spec);
    const auto means = geofew::blob_class_means(spec);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto row = data.example_row(i);
      const auto& mean = means[static_cast<std::size_t>(data.labels[i])];
      for (std::size_t j = 0; j < row.size(); ++j)
        CHECK(row[j] == doctest::Approx(mean[j]).epsilon(1e-15));
    }
  }

  SUBCASE("zero bound is feasible up to the dimension") {
    BlobSpec spec = small_spec();
    spec.max_pairwise_cosine = 0.0;
    spec.n_categories = 8;  // == dim
    const auto means = geofew::blob_class_means(spec);
    CHECK(std::abs(pairwise_max_cosine(means)) < 1e-9);

    spec.n_categories = 9;
    CHECK_THROWS_AS(spec.validate(), geofew::ConfigError);
  }

  SUBCASE("the cosine bound is honored") {
    for (std::uint64_t seed : {1ULL, 9ULL, 42ULL}) {
      BlobSpec spec = small_spec();
      spec.seed = seed;
      spec.n_categories = 10;
      spec.max_pairwise_cosine = 0.4;
      const auto means = geofew::blob_class_means(spec);
      CHECK(pairwise_max_cosine(means) <= 0.4 + 1e-9);
      for (const auto& m : means) {
        double ss = 0.0;
        for (double x : m) ss += x * x;
        CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-12);
      }
    }
  }

  SUBCASE("same seed reproduces identical bytes") {
    const LabeledDataset a = geofew::generate_blobs(small_spec());
    const LabeledDataset b = geofew::generate_blobs(small_spec());
    CHECK(a.examples.data == b.examples.data);
    CHECK(a.labels == b.labels);
  }

  SUBCASE("an infeasible packing reports a helpful error") {
    BlobSpec spec = small_spec();
    spec.dim = 2;
    spec.n_categories = 40;
    spec.max_pairwise_cosine = 0.05;
    CHECK_THROWS_WITH_AS(geofew::generate_blobs(spec),
                         doctest::Contains("larger dim"), geofew::ConfigError);
  }

  SUBCASE("split tags partition each category") {
    const LabeledDataset data = geofew::generate_blobs(small_spec());
    for (int c = 0; c < 6; ++c) {
      CHECK(data.indices_of(c, Split::kTrain).size() == 10);
      CHECK(data.indices_of(c, Split::kVal).size() == 4);
      CHECK(data.indices_of(c, Split::kTest).size() == 4);
    }
  }
}

TEST_CASE("planted correlated pairs") {
  BlobSpec spec = small_spec();
  spec.planted_pairs = {{5, 0, 0.9}, {4, 3, 0.8}};

  SUBCASE("targets land at exactly the requested cosine") {
    const auto means = geofew::blob_class_means(spec);
    auto cosine = [&means](std::size_t a, std::size_t b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < means[a].size(); ++j)
        dot += means[a][j] * means[b][j];
      return dot;
    };
    CHECK(cosine(5, 0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(cosine(4, 3) == doctest::Approx(0.8).epsilon(1e-12));

    // every unplanted pair still honors the bound
    for (std::size_t a = 0; a < means.size(); ++a) {
      for (std::size_t b = a + 1; b < means.size(); ++b) {
        const bool planted = (a == 0 && b == 5) || (a == 3 && b == 4);
        if (!planted) CHECK(cosine(a, b) <= spec.max_pairwise_cosine + 1e-9);
      }
    }
  }

  SUBCASE("pair construction is deterministic under the seed") {
    const auto a = geofew::blob_class_means(spec);
    const auto b = geofew::blob_class_means(spec);
    CHECK(a == b);
  }

  SUBCASE("invalid pair plans are rejected") {
    BlobSpec bad = small_spec();
    bad.planted_pairs = {{5, 5, 0.9}};
    CHECK_THROWS_AS(bad.validate(), geofew::ConfigError);
    bad.planted_pairs = {{9, 0, 0.9}};
    CHECK_THROWS_AS(bad.validate(), geofew::ConfigError);
    bad.planted_pairs = {{5, 0, 1.2}};
    CHECK_THROWS_AS(bad.validate(), geofew::ConfigError);
    bad.planted_pairs = {{5, 0, 0.9}, {5, 1, 0.8}};  // target twice
    CHECK_THROWS_AS(bad.validate(), geofew::ConfigError);
    bad.planted_pairs = {{5, 4, 0.9}, {4, 1, 0.8}};  // source is a target
    CHECK_THROWS_AS(bad.validate(), geofew::ConfigError);
  }

  SUBCASE("cluster siblings share the bound exemption") {
    // two targets anchored on one source may exceed the bound against each
    // other but not against outsiders
    BlobSpec cluster = small_spec();
    cluster.max_pairwise_cosine = 0.3;
    cluster.planted_pairs = {{5, 0, 0.9}, {4, 0, 0.9}};
    const auto means = geofew::blob_class_means(cluster);
    auto cosine = [&means](std::size_t a, std::size_t b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < means[a].size(); ++j)
        dot += means[a][j] * means[b][j];
      return dot;
    };
    CHECK(cosine(5, 0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(cosine(4, 0) == doctest::Approx(0.9).epsilon(1e-12));
    for (std::size_t other : {1, 2, 3}) {
      CHECK(cosine(5, other) <= 0.3 + 1e-9);
      CHECK(cosine(4, other) <= 0.3 + 1e-9);
    }
  }
}

TEST_CASE("base/novel split") {
  const LabeledDataset data = geofew::generate_blobs(small_spec());

  SUBCASE("views partition the selected categories") {
    const auto split = geofew::split_base_novel(data, {0, 1, 2}, {3, 4, 5});
    CHECK(split.base.n_categories() == 3);
    CHECK(split.novel_pool.n_categories() == 3);
    for (int id : {0, 1, 2}) {
      CHECK(!split.base.indices(id, Split::kTrain).empty());
    }
    // the novel pool ignores split structure: everything is reachable
    CHECK(split.novel_pool.indices(4, std::nullopt).size() == 18);
    CHECK(split.novel_pool.indices(4, Split::kTest).size() == 18);
  }

  SUBCASE("overlap lists the offending ids") {
    CHECK_THROWS_WITH_AS(geofew::split_base_novel(data, {0, 1, 2}, {2, 3}),
                         doctest::Contains("2"), geofew::ContractError);
  }

  SUBCASE("empty sides and unknown ids are rejected") {
    CHECK_THROWS_AS(geofew::split_base_novel(data, {}, {1}),
                    geofew::ContractError);
    CHECK_THROWS_AS(geofew::split_base_novel(data, {0}, {17}),
                    geofew::ContractError);
  }

  SUBCASE("view gather preserves labels through dense relabeling") {
    const auto split = geofew::split_base_novel(data, {0, 1, 2}, {3, 4, 5});
    const auto rows = split.base.indices(1, Split::kTrain);
    const Tensor batch = split.base.gather(rows);
    CHECK(batch.rows() == rows.size());
    for (std::size_t i : rows) CHECK(data.labels[i] == 1);
  }
}

TEST_CASE("csv round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "geofew_datasets_test";
  fs::create_directories(dir);

  SUBCASE("save then load preserves the dataset") {
    const LabeledDataset data = geofew::generate_blobs(small_spec());
    const std::string path = (dir / "blobs.csv").string();
    geofew::save_csv(data, path);
    const LabeledDataset loaded = geofew::load_csv(path);
    CHECK(loaded.labels == data.labels);
    CHECK(loaded.examples.shape() == data.examples.shape());
    CHECK(loaded.examples.data == data.examples.data);  // %.17g round-trips

    // writer order is per-category train/val/test, so tags reconstruct
    LabeledDataset retagged = loaded;
    geofew::assign_splits(retagged, 10, 4, 4);
    for (std::size_t i = 0; i < data.size(); ++i)
      CHECK(retagged.split_tags[i] == data.split_tags[i]);
  }

  SUBCASE("rewriting produces identical bytes") {
    const LabeledDataset data = geofew::generate_blobs(small_spec());
    const std::string p1 = (dir / "a.csv").string();
    const std::string p2 = (dir / "b.csv").string();
    geofew::save_csv(data, p1);
    geofew::save_csv(geofew::load_csv(p1), p2);
    CHECK(read_bytes(p1) == read_bytes(p2));
  }

  SUBCASE("grid dims header survives the round trip") {
    LabeledDataset data;
    data.examples = Tensor::matrix(2, 6, {1, 2, 3, 4, 5, 6, 6, 5, 4, 3, 2, 1});
    data.labels = {0, 1};
    data.split_tags = {Split::kTrain, Split::kTrain};
    data.category_names = {"a", "b"};
    data.grid_dims = {{2, 3}};
    const std::string path = (dir / "grid.csv").string();
    geofew::save_csv(data, path);
    const LabeledDataset loaded = geofew::load_csv(path);
    REQUIRE(loaded.grid_dims.has_value());
    CHECK(loaded.grid_dims->first == 2);
    CHECK(loaded.grid_dims->second == 3);
  }

  SUBCASE("malformed rows carry line numbers") {
    const std::string path = (dir / "bad.csv").string();
    std::ofstream(path) << "0,1.0,2.0\n1,3.0\n";
    CHECK_THROWS_WITH_AS(geofew::load_csv(path), doctest::Contains("line 2"),
                         geofew::ParseError);

    std::ofstream(path) << "0,1.0,2.0\nx,3.0,4.0\n";
    CHECK_THROWS_WITH_AS(geofew::load_csv(path), doctest::Contains("line 2"),
                         geofew::ParseError);

    std::ofstream(path) << "0,1.0,oops\n";
    CHECK_THROWS_WITH_AS(geofew::load_csv(path), doctest::Contains("line 1"),
                         geofew::ParseError);
  }

  SUBCASE("empty files and missing files are rejected") {
    const std::string path = (dir / "empty.csv").string();
    std::ofstream(path) << "";
    CHECK_THROWS_AS(geofew::load_csv(path), geofew::ParseError);
    CHECK_THROWS_AS(geofew::load_csv((dir / "missing.csv").string()),
                    geofew::ParseError);
  }
}

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "gsrw/embeddings.hpp"

using namespace gsrw;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    const auto stamp =
        std::chrono::steady_clock::now().time_since_epoch().count();
    path = std::filesystem::temp_directory_path() /
           ("gsrw_test_" + std::to_string(stamp) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<EmbeddingRecord> some_records(int count, int d, std::uint64_t seed,
                                          bool with_cam = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<EmbeddingRecord> records(count);
  for (int i = 0; i < count; ++i) {
    records[i].id = "id" + std::to_string(i % 3);
    if (with_cam) records[i].cam = "cam" + std::to_string(i % 2);
    records[i].feature.resize(d);
    for (int j = 0; j < d; ++j) records[i].feature[j] = dist(rng);
  }
  return records;
}

}  // namespace

TEST_CASE("csv parsing basics") {
  TempDir tmp;
  const std::string path = tmp.file("basic.csv");

  SECTION("three records of dimension 4") {
    std::ofstream(path) << "a,1.0,2.0,3.0,4.0\n"
                           "b,5,6,7,8\n"
                           "c,-1.5,0.25,1e-3,2.5e2\n";
    const auto records = load_embeddings(path, FileFormat::csv);
    REQUIRE(records.size() == 3);
    CHECK(records[0].id == "a");
    CHECK(records[0].feature.size() == 4);
    CHECK_FALSE(records[0].cam.has_value());
    CHECK(records[2].feature[3] == 250.0);
  }

  SECTION("dimension mismatch rejected") {
    std::ofstream(path) << "a,1,2,3,4\n"
                           "b,1,2,3,4,5\n";
    CHECK_THROWS_WITH(load_embeddings(path, FileFormat::csv),
                      Catch::Matchers::ContainsSubstring("dimension mismatch"));
  }

  SECTION("header line skipped") {
    std::ofstream(path) << "id,f1,f2\n"
                           "a,1.0,2.0\n";
    const auto records = load_embeddings(path, FileFormat::csv);
    REQUIRE(records.size() == 1);
    CHECK(records[0].feature[1] == 2.0);
  }

  SECTION("camera label detected as non-numeric second field") {
    std::ofstream(path) << "a,cam1,1.0,2.0\n"
                           "b,cam2,3.0,4.0\n";
    const auto records = load_embeddings(path, FileFormat::csv);
    REQUIRE(records.size() == 2);
    REQUIRE(records[0].cam.has_value());
    CHECK(*records[0].cam == "cam1");
    CHECK(records[0].feature.size() == 2);
  }

  SECTION("empty file rejected") {
    std::ofstream(path) << "";
    CHECK_THROWS_WITH(load_embeddings(path, FileFormat::csv),
                      Catch::Matchers::ContainsSubstring("no records"));
  }

  SECTION("garbage line rejected") {
    std::ofstream(path) << "a,1.0,2.0\n"
                           "b,oops,zzz\n";
    CHECK_THROWS_WITH(load_embeddings(path, FileFormat::csv),
                      Catch::Matchers::ContainsSubstring("unparsable"));
  }

  SECTION("missing file names the path") {
    CHECK_THROWS_WITH(load_embeddings(tmp.file("nope.csv"), FileFormat::csv),
                      Catch::Matchers::ContainsSubstring("nope.csv"));
  }
}

TEST_CASE("round trips") {
  TempDir tmp;

  SECTION("binary round trip is bit identical") {
    const auto records = some_records(10, 7, 42);
    const std::string path = tmp.file("rt.bin");
    save_embeddings(records, path, FileFormat::binary);
    const auto loaded = load_embeddings(path, FileFormat::binary);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) CHECK(loaded[i] == records[i]);
  }

  SECTION("binary round trip with camera labels") {
    const auto records = some_records(6, 3, 7, true);
    const std::string path = tmp.file("rt_cam.bin");
    save_embeddings(records, path, FileFormat::binary);
    const auto loaded = load_embeddings(path, FileFormat::binary);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) CHECK(loaded[i] == records[i]);
  }

  SECTION("csv round trip within 1e-9") {
    const auto records = some_records(10, 5, 43);
    const std::string path = tmp.file("rt.csv");
    save_embeddings(records, path, FileFormat::csv);
    const auto loaded = load_embeddings(path, FileFormat::csv);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(loaded[i].id == records[i].id);
      CHECK((loaded[i].feature - records[i].feature).lpNorm<Eigen::Infinity>() <= 1e-9);
    }
  }

  SECTION("saving an empty list is an error") {
    CHECK_THROWS_AS(save_embeddings({}, tmp.file("x.bin"), FileFormat::binary),
                    std::invalid_argument);
  }

  SECTION("mixed camera presence cannot be stored in binary") {
    auto records = some_records(4, 3, 1, true);
    records[2].cam.reset();
    CHECK_THROWS_AS(save_embeddings(records, tmp.file("x.bin"), FileFormat::binary),
                    std::invalid_argument);
  }

  SECTION("truncated binary file rejected") {
    const auto records = some_records(4, 3, 9);
    const std::string path = tmp.file("trunc.bin");
    save_embeddings(records, path, FileFormat::binary);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 5);
    CHECK_THROWS_WITH(load_embeddings(path, FileFormat::binary),
                      Catch::Matchers::ContainsSubstring("end of file"));
  }
}

TEST_CASE("synthetic generation") {
  SynthConfig cfg;
  cfg.num_identities = 2;
  cfg.images_per_identity = 3;
  cfg.d = 4;
  cfg.cluster_spread = 0.1;
  cfg.center_spread = 1.0;
  cfg.seed = 99;

  SECTION("counts") {
    const auto records = generate_synthetic(cfg);
    REQUIRE(records.size() == 6);
    int per_id0 = 0;
    for (const auto& r : records)
      if (r.id == "p0") ++per_id0;
    CHECK(per_id0 == 3);
  }

  SECTION("same seed twice gives identical output") {
    const auto a = generate_synthetic(cfg);
    const auto b = generate_synthetic(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }

  SECTION("zero cluster spread collapses identities to their centers") {
    cfg.cluster_spread = 0.0;
    const auto records = generate_synthetic(cfg);
    CHECK(records[0].feature == records[1].feature);
    CHECK(records[0].feature == records[2].feature);
    CHECK(records[3].feature != records[0].feature);
  }

  SECTION("overlapping spread warns but does not reject") {
    cfg.cluster_spread = 5.0;
    CHECK_FALSE(cfg.warnings().empty());
    CHECK_NOTHROW(generate_synthetic(cfg));
  }

  SECTION("invalid configs rejected") {
    SynthConfig bad = cfg;
    bad.num_identities = 0;
    CHECK_THROWS_AS(generate_synthetic(bad), std::invalid_argument);
    bad = cfg;
    bad.center_spread = 0.0;
    CHECK_THROWS_AS(generate_synthetic(bad), std::invalid_argument);
  }

  SECTION("zero spread with distinct centers makes nearest neighbor exact") {
    SynthConfig sep;
    sep.num_identities = 5;
    sep.images_per_identity = 3;
    sep.d = 8;
    sep.cluster_spread = 0.0;
    sep.center_spread = 1.0;
    sep.seed = 3;
    const auto records = generate_synthetic(sep);
    for (std::size_t q = 0; q < records.size(); ++q) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_i = q;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (i == q) continue;
        const double dist = (records[i].feature - records[q].feature).norm();
        if (dist < best) {
          best = dist;
          best_i = i;
        }
      }
      CHECK(records[best_i].id == records[q].id);
    }
  }
}

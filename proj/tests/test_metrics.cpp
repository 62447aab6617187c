#include <doctest.h>

#include <cmath>
#include <numeric>

#include "evflow/dataset.hpp"
#include "evflow/io.hpp"
#include "evflow/metrics.hpp"
#include "test_support.hpp"

using namespace evflow;
using namespace evflow::metrics;
using namespace evflow::testing;

namespace {

// Direct O(m^2) enumeration.
double crps_oracle(const std::vector<double>& xs, double y) {
  double a = 0, b = 0;
  for (double x : xs) a += std::abs(x - y);
  for (double x : xs)
    for (double x2 : xs) b += std::abs(x - x2);
  const double m = static_cast<double>(xs.size());
  return a / m - 0.5 * b / (m * m);
}

std::vector<Pair> synthetic_pairs(std::size_t n, std::uint64_t seed, std::size_t d_text = 16) {
  data::SyntheticConfig sc;
  sc.n_waves = n;
  sc.points_per_wave = 24;
  sc.d_text = d_text;
  sc.seed = seed;
  auto syn = data::generate_synthetic(sc);
  std::vector<Pair> out;
  for (std::size_t s = 0; s < n; ++s) {
    auto v = syn.dataset.segment_values(s);
    out.push_back({{v.begin(), v.end()}, syn.dataset.segments[s].embedding});
  }
  return out;
}

}  // namespace

TEST_CASE("point metrics") {
  std::vector<double> y{0, 0}, h{1, 1};
  CHECK(mae(y, y) == 0.0);
  CHECK(mse(y, y) == 0.0);
  CHECK(rmse(y, y) == 0.0);
  CHECK(mae(y, h) == 1.0);
  CHECK(mse(y, h) == 1.0);
  CHECK(rmse(y, h) == 1.0);
  std::vector<double> y2{0, 2};
  CHECK(mae(y2, h) == 1.0);
  CHECK(mse(y2, h) == 1.0);
  CHECK(rmse(y2, h) == 1.0);
  CHECK_THROWS(mae(y, std::vector<double>{1.0}));

  std::mt19937_64 rng(1);
  auto a = random_vector(50, rng), b = random_vector(50, rng);
  CHECK(rmse(a, b) * rmse(a, b) == doctest::Approx(mse(a, b)).epsilon(1e-12));
}

TEST_CASE("wape") {
  std::vector<double> y{2, 2}, h{1, 3};
  CHECK(wape(y, y) == 0.0);
  CHECK(wape(y, h) == 0.5);
  std::vector<double> ys{6, 6}, hs{3, 9};
  CHECK(wape(ys, hs) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS(wape(std::vector<double>{0, 0}, h));
}

TEST_CASE("crps estimator") {
  CHECK(crps_ensemble(std::vector<double>{1, 1, 1}, 1.0) == 0.0);
  CHECK(crps_ensemble(std::vector<double>{0, 2}, 1.0) == 0.5);
  CHECK(crps_ensemble(std::vector<double>{0, 0, 2, 2}, 1.0) == 0.5);
  CHECK(crps_ensemble(std::vector<double>{3.5}, 1.0) == 2.5);
  CHECK_THROWS(crps_ensemble(std::vector<double>{}, 1.0));

  std::mt19937_64 rng(2);
  auto xs = random_vector(37, rng);
  const double c = crps_ensemble(xs, 0.3);
  CHECK(c == doctest::Approx(crps_oracle(xs, 0.3)).epsilon(1e-12));
  auto perm = xs;
  std::shuffle(perm.begin(), perm.end(), rng);
  CHECK(crps_ensemble(perm, 0.3) == doctest::Approx(c).epsilon(1e-12));
  auto dup = xs;
  dup.insert(dup.end(), xs.begin(), xs.end());
  CHECK(crps_ensemble(dup, 0.3) == doctest::Approx(c).epsilon(1e-12));

  // Series form: ensemble [m x n].
  std::vector<double> ens{0, 10, 2, 10};  // members (0,10), (2,10)
  std::vector<double> y{1, 10};
  CHECK(crps_series(ens, 2, y) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("empirical quantiles interpolate linearly") {
  std::vector<double> s{4, 1, 3, 2};
  CHECK(empirical_quantile(s, 0.0) == 1.0);
  CHECK(empirical_quantile(s, 1.0) == 4.0);
  CHECK(empirical_quantile(s, 0.5) == 2.5);
  CHECK(empirical_quantile(s, 0.1) == doctest::Approx(1.3).epsilon(1e-14));
  auto qs = empirical_quantiles(s, std::vector<double>{0.25, 0.75});
  CHECK(qs[0] == doctest::Approx(1.75).epsilon(1e-14));
  CHECK(qs[1] == doctest::Approx(3.25).epsilon(1e-14));
}

TEST_CASE("weighted quantile loss") {
  std::vector<double> y{2, 4};
  std::map<double, std::vector<double>> exact;
  for (double q : {0.1, 0.5, 0.9}) exact[q] = y;
  CHECK(wql(exact, y).value == 0.0);

  CHECK(wql({{0.5, {0.0}}}, std::vector<double>{2.0}).value == 1.0);

  const double under = wql({{0.9, {1.0}}}, std::vector<double>{2.0}).value;
  const double over = wql({{0.9, {3.0}}}, std::vector<double>{2.0}).value;
  CHECK(under / over == doctest::Approx(9.0).epsilon(1e-12));

  std::mt19937_64 rng(3);
  auto a = random_vector(20, rng), b = random_vector(20, rng);
  CHECK(wql({{0.5, b}}, a).value == doctest::Approx(wape(a, b)).epsilon(1e-12));

  auto r = wql({{0.1, {3.0, 0.0}}, {0.9, {1.0, 1.0}}}, std::vector<double>{2.0, 2.0});
  CHECK(r.monotonicity_violations == 1);
  CHECK_THROWS(wql(exact, std::vector<double>{0.0, 0.0}));
}

TEST_CASE("joint features") {
  Pair flat{std::vector<double>(8, 3.0), std::vector<double>(16, 0.25)};
  auto proj = projection_matrix(16, 7);
  auto f = joint_feature(flat, proj);
  REQUIRE(f.size() == kJointFeatureDim);
  CHECK(f[0] == 3.0);
  CHECK(f[1] == 0.0);
  CHECK(f[2] == 3.0);
  CHECK(f[3] == 3.0);
  CHECK(f[4] == doctest::Approx(3.0).epsilon(1e-14));  // DC bin carries the mean
  for (std::size_t k = 5; k < 12; ++k) CHECK(std::abs(f[k]) < 1e-12);

  // Single-tone segment: magnitude 1/2 at bin 2.
  Pair tone{std::vector<double>(16), std::vector<double>(16, 0.0)};
  for (std::size_t j = 0; j < 16; ++j) tone.values[j] = std::cos(2 * M_PI * 2 * j / 16.0);
  auto ft = joint_feature(tone, proj);
  CHECK(ft[4 + 2] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(ft[4 + 3]) < 1e-12);

  auto pairs = synthetic_pairs(10, 1);
  auto a = joint_features(pairs, 5), b = joint_features(pairs, 5);
  CHECK(a == b);
  std::reverse(pairs.begin(), pairs.end());
  auto c = joint_features(pairs, 5);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(c[i] == a[a.size() - 1 - i]);
}

TEST_CASE("frechet distance") {
  auto pairs = synthetic_pairs(200, 2);
  CHECK(std::abs(j_ftsd(pairs, pairs, 1)) < 1e-8);

  auto other = synthetic_pairs(200, 3);
  const double d1 = j_ftsd(pairs, other, 1), d2 = j_ftsd(other, pairs, 1);
  CHECK(d1 >= -1e-8);
  CHECK(std::abs(d1 - d2) < 1e-8);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> p(100000), q(100000);
  for (auto& r : p) r = {nd(rng)};
  for (auto& r : q) r = {1.0 + nd(rng)};
  CHECK(frechet_distance(p, q) == doctest::Approx(1.0).epsilon(0.05));

  // 2-D closed form with different diagonal covariances: (s1 - s2)^2 per axis.
  std::vector<std::vector<double>> u(100000), v(100000);
  for (auto& r : u) r = {nd(rng), 2.0 * nd(rng)};
  for (auto& r : v) r = {3.0 * nd(rng), 2.0 * nd(rng)};
  CHECK(frechet_distance(u, v) == doctest::Approx(4.0).epsilon(0.05));

  CHECK_THROWS(j_ftsd(std::span<const Pair>(pairs.data(), 1), pairs, 1));
}

TEST_CASE("delta J-FTSD") {
  auto pairs = synthetic_pairs(300, 5);

  SUBCASE("noise events give a delta inside the resampling band") {
    auto noisy = pairs;
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& p : noisy)
      for (double& c : p.event) c = nd(rng);
    const std::vector<double> V{0.05, 0.1, 0.2};
    std::vector<double> runs;
    for (std::uint64_t s = 0; s < 20; ++s) runs.push_back(delta_j_ftsd(noisy, V, 100 + s));
    const double mean = std::accumulate(runs.begin(), runs.end(), 0.0) / 20.0;
    double var = 0;
    for (double r : runs) var += (r - mean) * (r - mean) / 19.0;
    const double band = 3.0 * std::sqrt(var);
    MESSAGE("mean " << mean << ", band " << band);
    CHECK(std::abs(delta_j_ftsd(noisy, V, 999)) < band);
    CHECK(std::abs(mean) < band);
  }
  SUBCASE("zero noise with informative events is nonnegative") {
    const std::vector<double> V{0.0};
    const double d = delta_j_ftsd(pairs, V, 7);
    CHECK(d >= -1e-8);
  }
  SUBCASE("category-separated events give a positive delta") {
    const std::vector<double> V{0.05, 0.1, 0.2};
    CHECK(delta_j_ftsd(pairs, V, 8) > 0.0);
  }
}

TEST_CASE("window scoring and report files") {
  std::vector<double> y{1, 2, 3};
  std::vector<double> ens{1, 2, 3, 1, 2, 3};
  auto w = score_window(ens, 2, y, y);
  CHECK(w.mae == 0.0);
  CHECK(w.crps == 0.0);
  CHECK(w.wql == 0.0);

  std::vector<double> ens2{0, 2, 4, 2, 2, 2};
  std::vector<double> pt{1, 2, 3};
  auto w2 = score_window(ens2, 2, y, pt);
  w2.window = 1;
  CHECK(w2.crps == doctest::Approx((0.5 + 0.0 + 0.5) / 3.0).epsilon(1e-14));

  auto rep = aggregate({w, w2}, {{"config_hash", "h1"}});
  CHECK(rep.aggregate.crps == doctest::Approx(0.5 * w2.crps).epsilon(1e-14));
  CHECK(rep.aggregate.wql == doctest::Approx(0.5 * w2.wql).epsilon(1e-14));
  auto dir = temp_dir("report");
  write_report(dir, rep);
  auto j = nlohmann::json::parse(io::read_text(dir / "report.json"));
  CHECK(j["windows"].size() == 2);
  CHECK(j["meta"]["config_hash"] == "h1");
  auto csv = io::read_text(dir / "report.csv");
  CHECK(csv.rfind("# tool_version=", 0) == 0);
  CHECK(csv.find("config_hash=h1") != std::string::npos);
  CHECK(csv.find("window,mae,mse,rmse,wape,crps,wql,quantile_violations\n") != std::string::npos);
  std::filesystem::remove_all(dir);
}

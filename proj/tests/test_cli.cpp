#include <doctest.h>

#include <cstdlib>
#include <regex>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "evflow/error.hpp"
#include "evflow/io.hpp"
#include "evflow/metrics.hpp"
#include "test_support.hpp"

using namespace evflow;
using namespace evflow::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

// Checksum over relative paths and contents of every file under dir.
std::string dir_checksum(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    const auto b = io::read_bytes(f);
    all += fs::relative(f, dir).string() + ":" + std::string(b.begin(), b.end()) + "\n";
  }
  return io::fnv1a_hex(all);
}

std::string file_bytes(const fs::path& f) {
  const auto b = io::read_bytes(f);
  return {b.begin(), b.end()};
}

// W=8, two epochs, small everything.
std::vector<std::string> smoke(const fs::path& root) {
  return {"--set", "gen.n_waves=80",      "--set", "model.W=8",        "--set", "model.M=2",
          "--set", "model.d_model=16",    "--set", "model.d_state=6",  "--set", "model.m_state=2",
          "--set", "model.d_text=8",      "--set", "model.d_ff=32",    "--set", "model.n_heads=2",
          "--set", "model.d_time=8",      "--set", "train.max_epochs=2", "--set", "train.eval_every=1",
          "--set", "train.batch_size=16", "--set", "forecast.n_samples=6", "--set", "forecast.T=4",
          "--set", "forecast.max_windows=3", "--set", "data.dir=" + (root / "gen").string()};
}

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<std::string> more) {
  base.insert(base.end(), more);
  return base;
}

struct OutRoot {
  fs::path dir;
  explicit OutRoot(const std::string& name) : dir(temp_dir(name)) { ::setenv("EVFLOW_OUT", dir.c_str(), 1); }
  ~OutRoot() {
    ::unsetenv("EVFLOW_OUT");
    fs::remove_all(dir);
  }
};

}  // namespace

TEST_CASE("config defaults, overrides and hash") {
  cli::RunConfig a;
  CHECK(a.count("model.W") == 24);
  CHECK(a.synthetic().n_waves == 1095);
  const auto h0 = a.hash();
  a.assign("window.p = 5");
  CHECK(a.count("window.p") == 5);
  CHECK(a.hash() != h0);
  CHECK_THROWS_AS(a.assign("nope=1"), ConfigError);
  CHECK_THROWS_AS(a.assign("window.p"), ConfigError);
  a.set("train.lr_peak", "fast");
  CHECK_THROWS_AS(a.train(), ConfigError);

  auto dir = temp_dir("cfg");
  io::write_text(dir / "a.cfg", "# run\nwindow.q = 3\nforecast.T=20  # coarse\n");
  io::write_text(dir / "b.cfg", "forecast.T = 20\n\nwindow.q=3\n");
  cli::RunConfig x, y;
  x.load_file(dir / "a.cfg");
  y.load_file(dir / "b.cfg");
  CHECK(x.hash() == y.hash());
  CHECK(x.forecast().T == 20);
  io::write_text(dir / "c.cfg", "window.q = 3\nbogus = 1\n");
  cli::RunConfig z;
  CHECK_THROWS_WITH_AS(z.load_file(dir / "c.cfg"), doctest::Contains(":2:"), ConfigError);
  fs::remove_all(dir);

  cli::RunConfig ab;
  ab.set("ablation.fixed_timestep", "true");
  ab.set("ablation.stacked_dit", "true");
  CHECK(ab.train().fixed_timestep);
  CHECK_FALSE(ab.forecast().use_event_delta);
  CHECK(ab.model().stacked);
}

TEST_CASE("gen") {
  OutRoot root("cli_gen");
  auto r = invoke({"gen"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("L=26280 ") != std::string::npos);
  CHECK(r.out.find("segments=1095") != std::string::npos);
  CHECK(r.out.find("sine=") != std::string::npos);
  auto manifest = json::parse(io::read_text(root.dir / "gen" / "manifest.json"));
  CHECK(manifest.at("config_hash") == cli::RunConfig().hash());

  REQUIRE(invoke({"gen", "--out", (root.dir / "again").string()}).code == 0);
  CHECK(dir_checksum(root.dir / "gen") == dir_checksum(root.dir / "again"));

  auto bad = invoke({"--set", "gen.weights=1,-1,0,0", "gen", "--out", (root.dir / "bad").string()});
  CHECK(bad.code == 2);
  CHECK_FALSE(bad.err.empty());
  CHECK(invoke({"--set", "gen.weights=0.5,0.5", "gen"}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({}).code == 2);
}

TEST_CASE("train, forecast, eval, plot") {
  OutRoot root("cli_pipeline");
  const auto base = smoke(root.dir);
  REQUIRE(invoke(with(base, {"gen"})).code == 0);

  SUBCASE("train writes both artifacts and resume matches an uninterrupted run") {
    auto r = invoke(with(base, {"train"}));
    REQUIRE(r.code == 0);
    const auto full = root.dir / "train";
    CHECK(fs::file_size(full / "checkpoint.bin") > 0);
    CHECK(fs::file_size(full / "history.csv") > 0);
    auto ck = model::load_checkpoint(full / "checkpoint.bin");
    CHECK(ck.meta.at("no_text") == false);
    CHECK(ck.meta.at("config_hash") == ck.meta.at("config_hash").get<std::string>());
    CHECK(io::read_text(full / "history.csv").find("config_hash=") != std::string::npos);

    const auto part = root.dir / "part";
    auto p1 = invoke(with(base, {"train", "--out", part.string(), "--stop-after", "1"}));
    REQUIRE(p1.code == 0);
    CHECK(p1.out.find("paused") != std::string::npos);
    CHECK_FALSE(fs::exists(part / "checkpoint.bin"));
    auto p2 = invoke(with(base, {"train", "--out", part.string(), "--resume", (part / "train_state.bin").string()}));
    REQUIRE(p2.code == 0);
    CHECK(file_bytes(part / "history.csv") == file_bytes(full / "history.csv"));
    CHECK(file_bytes(part / "checkpoint.bin") == file_bytes(full / "checkpoint.bin"));

    auto other = invoke(with(base, {"--set", "train.seed=9", "train", "--out", (root.dir / "x").string(), "--resume",
                                 (part / "train_state.bin").string()}));
    CHECK(other.code == 2);

    auto nt = invoke(with(base, {"--set", "ablation.no_text=true", "train", "--out", (root.dir / "nt").string()}));
    REQUIRE(nt.code == 0);
    CHECK(model::load_checkpoint(root.dir / "nt" / "checkpoint.bin").meta.at("no_text") == true);
  }

  SUBCASE("forecast, eval and plot") {
    REQUIRE(invoke(with(base, {"train"})).code == 0);
    REQUIRE(invoke(with(base, {"forecast"})).code == 0);
    const auto fdir = root.dir / "forecast";
    auto fj = json::parse(io::read_text(fdir / "forecast.json"));
    CHECK(fj.at("meta").at("config_hash").is_string());
    CHECK(fj.at("tool_version") == io::kToolVersion);
    REQUIRE(fj.at("windows").size() == 3);
    for (const auto& w : fj.at("windows")) {
      CHECK(w.at("point").size() == 2);
      CHECK(w.at("point").at(0).size() == 8);
      CHECK(w.at("n_samples") == 6);
      const auto& b = w.at("bands");
      for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t k = 0; k < 8; ++k)
          for (std::size_t l = 1; l < forecast::kBandQuantiles.size(); ++l) {
            char lo[8], hi[8];
            std::snprintf(lo, sizeof lo, "%.1f", forecast::kBandQuantiles[l - 1]);
            std::snprintf(hi, sizeof hi, "%.1f", forecast::kBandQuantiles[l]);
            CHECK(b.at(lo).at(s).at(k).get<double>() <= b.at(hi).at(s).at(k).get<double>());
          }
    }
    CHECK(fs::file_size(fdir / "ensemble.f64") == 3 * 6 * 16 * 8);
    REQUIRE(invoke(with(base, {"forecast", "--out", (root.dir / "f2").string()})).code == 0);
    CHECK(dir_checksum(fdir) == dir_checksum(root.dir / "f2"));
    REQUIRE(invoke(with(base, {"forecast", "--windows", "1", "--out", (root.dir / "f1").string()})).code == 0);
    auto f1 = json::parse(io::read_text(root.dir / "f1" / "forecast.json"));
    REQUIRE(f1.at("windows").size() == 1);
    CHECK(f1["windows"][0]["first_segment"] == fj["windows"][1]["first_segment"]);
    CHECK(invoke(with(base, {"forecast", "--windows", "5:2"})).code == 2);
    CHECK(invoke(with(base, {"forecast", "--checkpoint", "/nonexistent.bin"})).code == 2);

    REQUIRE(invoke(with(base, {"eval"})).code == 0);
    auto rep = json::parse(io::read_text(root.dir / "eval" / "report.json"));
    REQUIRE(rep.at("windows").size() == 3);
    double mae = 0;
    for (const auto& w : rep["windows"]) mae += w.at("mae").get<double>() / 3.0;
    CHECK(rep.at("aggregate").at("mae").get<double>() == doctest::Approx(mae).epsilon(1e-14));
    CHECK(rep.at("meta").at("tool_version") == io::kToolVersion);
    CHECK(io::read_text(root.dir / "eval" / "report.csv").rfind("# tool_version=", 0) == 0);
    CHECK(invoke(with(base, {"eval", "--forecast", (root.dir / "missing").string()})).code == 2);

    REQUIRE(invoke(with(base, {"plot"})).code == 0);
    std::vector<fs::path> svgs;
    for (const auto& e : fs::directory_iterator(root.dir / "plot")) svgs.push_back(e.path());
    REQUIRE(svgs.size() == 3);
    for (const auto& s : svgs) CHECK(fs::file_size(s) > 0);
    REQUIRE(invoke(with(base, {"plot", "--out", (root.dir / "plot2").string()})).code == 0);
    CHECK(dir_checksum(root.dir / "plot") == dir_checksum(root.dir / "plot2"));
  }

  SUBCASE("eval of a perfect forecast is zero") {
    auto d = data::load_dataset(root.dir / "gen");
    cli::RunConfig cfg;
    for (std::size_t i = 0; i + 1 < base.size(); i += 2) cfg.assign(base[i + 1]);
    auto ws = cli::split_windows(d, cfg, "test");
    ws.resize(2);
    std::vector<forecast::ForecastEnsemble> es;
    for (const auto& w : ws) {
      forecast::ForecastEnsemble e;
      e.n_samples = 3, e.q = w.q(), e.W = w.segment_length();
      std::vector<double> y;
      for (const auto& s : w.future_values) y.insert(y.end(), s.begin(), s.end());
      e.trajectories = Matrix(3, y.size());
      for (std::size_t m = 0; m < 3; ++m) std::copy(y.begin(), y.end(), e.trajectories.data.begin() + m * y.size());
      e.point = Matrix(e.q, e.W, y);
      es.push_back(e);
    }
    const json meta = {{"data_dir", (root.dir / "gen").string()}, {"p", 4}, {"q", 2}};
    forecast::write_forecasts(root.dir / "perfect", ws, es, cfg.forecast(), meta, true);
    REQUIRE(invoke(with(base, {"eval", "--forecast", (root.dir / "perfect").string()})).code == 0);
    auto rep = json::parse(io::read_text(root.dir / "eval" / "report.json"));
    for (const char* k : {"mae", "mse", "rmse", "wape", "crps", "wql"}) CHECK(rep["aggregate"][k].get<double>() == 0.0);
  }
}

TEST_CASE("plot geometry") {
  data::WindowSample w;
  w.history_values = {{0, 1, 0, 1}, {1, 0, 1, 0}};
  w.future_values = {{2, 2, 2, 2}};
  forecast::ForecastEnsemble e;
  e.n_samples = 2, e.q = 1, e.W = 4;
  e.trajectories = Matrix(2, 4, std::vector<double>{1, 1, 1, 1, 3, 3, 3, 3});
  e.point = Matrix(1, 4, std::vector<double>{2, 2, 2, 2});
  const auto svg = cli::render_svg(w, e, "cap");
  CHECK(svg == cli::render_svg(w, e, "cap"));
  // 12 points across x in [50, 790]; edges at indices 0, 4, 8 and the last point.
  std::regex edge("class=\"segment-edge\" x1=\"([0-9.]+)\"");
  std::vector<double> xs;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), edge); it != std::sregex_iterator(); ++it)
    xs.push_back(std::stod((*it)[1]));
  REQUIRE(xs.size() == 4);
  const double step = 740.0 / 11.0;
  CHECK(xs[0] == doctest::Approx(50.0).epsilon(1e-3));
  CHECK(xs[1] == doctest::Approx(50.0 + 4 * step).epsilon(1e-3));
  CHECK(xs[2] == doctest::Approx(50.0 + 8 * step).epsilon(1e-3));
  CHECK(xs[3] == doctest::Approx(790.0).epsilon(1e-3));
  for (const char* cls : {"history", "truth", "point", "band"})
    CHECK(svg.find(std::string("class=\"") + cls + "\"") != std::string::npos);
}

TEST_CASE("jftsd") {
  OutRoot root("cli_jftsd");
  const std::vector<std::string> base{"--set", "gen.n_waves=200", "--set", "model.d_text=16"};
  REQUIRE(invoke(with(base, {"gen"})).code == 0);
  auto r = invoke(with(base, {"--set", "jftsd.V=0.1", "--set", "jftsd.seed=4", "jftsd"}));
  REQUIRE(r.code == 0);
  auto j = json::parse(io::read_text(root.dir / "jftsd" / "jftsd.json"));
  CHECK(j.at("seed") == 4);
  CHECK(j.at("V") == json::array({0.1}));
  CHECK(j.at("delta_j_ftsd").get<double>() > 0.0);
  CHECK(j.at("config_hash").is_string());
  CHECK(r.out.find("\"delta_j_ftsd\"") != std::string::npos);
  CHECK(invoke(with(base, {"--set", "jftsd.V=", "jftsd"})).code == 2);
}

TEST_CASE("data errors exit 3") {
  OutRoot root("cli_data");
  REQUIRE(invoke({"--set", "gen.n_waves=50", "gen"}).code == 0);
  io::write_text(root.dir / "gen" / "manifest.json", "{ not json");
  CHECK(invoke({"jftsd"}).code == 3);
}

TEST_CASE("ablate runs the four variants") {
  OutRoot root("cli_ablate");
  const auto base = with(smoke(root.dir), {"--set", "train.max_epochs=1"});
  REQUIRE(invoke(with(base, {"gen"})).code == 0);
  auto r = invoke(with(base, {"ablate"}));
  REQUIRE(r.code == 0);
  auto j = json::parse(io::read_text(root.dir / "ablate" / "ablation.json"));
  REQUIRE(j.at("variants").size() == 4);
  std::set<std::string> hashes;
  for (const auto& v : j["variants"]) hashes.insert(v.at("config_hash").get<std::string>());
  CHECK(hashes.size() == 4);
  CHECK(model::load_checkpoint(root.dir / "ablate" / "stacked_dit" / "train" / "checkpoint.bin").model.config().stacked);
  const auto csv = io::read_text(root.dir / "ablate" / "ablation.csv");
  CHECK(csv.find("\nfixed_timestep,") != std::string::npos);
  CHECK(r.out.find("no_text") != std::string::npos);
}

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kProfiles = EMCURVE_PROFILE_DIR;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = emcurve::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_data_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line) && !line.empty() && line[0] == '#') {
  }
  return line;
}

struct Scratch {
  fs::path root;
  Scratch() : root(fs::temp_directory_path() / ("emcurve_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  std::string operator()(const std::string& name) const { return (root / name).string(); }
};

// One simulated smoke dataset and fit shared by the cases below.
struct Fixture {
  Scratch dir;
  Fixture() {
    const auto sim = run({"simulate", "--config", (kProfiles / "smoke_bip.cfg").string(), "--out", dir("sim")});
    REQUIRE(sim.code == 0);
    const auto fit = run({"fit", "--data", dir("sim/data.csv"), "--out", dir("fit")});
    REQUIRE(fit.code == 0);
  }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("simulate is reproducible and writes a manifest") {
    Scratch dir;
    const std::string cfg = (kProfiles / "s3_bip.cfg").string();
    const auto a = run({"simulate", "--config", cfg, "--out", dir("a")});
    const auto b = run({"simulate", "--config", cfg, "--out", dir("b")});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(slurp(dir("a/data.csv")) == slurp(dir("b/data.csv")));
    CHECK(a.out.find("# master_seed=20190101") == 0);
    CHECK(a.out.find("subjects 10000") != std::string::npos);
    const std::string manifest = slurp(dir("a/manifest.json"));
    for (const char* key : {"\"command\"", "\"config\"", "\"inputs\"", "\"master_seed\"", "\"version\"", "\"outputs\""}) {
      CHECK(manifest.find(key) != std::string::npos);
    }
    const auto c = run({"simulate", "--config", cfg, "--seed", "7", "--out", dir("c")});
    CHECK(c.code == 0);
    CHECK(slurp(dir("a/data.csv")) != slurp(dir("c/data.csv")));
  }

  TEST_CASE("designs differ in their missingness patterns") {
    Scratch dir;
    const std::string cfg = (kProfiles / "smoke_bip.cfg").string();
    const auto bip = run({"simulate", "--config", cfg, "--design", "bip", "--out", dir("bip")});
    const auto cpv = run({"simulate", "--config", cfg, "--design", "bip-cpv", "--out", dir("cpv")});
    REQUIRE(bip.code == 0);
    REQUIRE(cpv.code == 0);
    auto placebo_with_s = [](const std::string& path) {
      std::ifstream in(path);
      std::string line;
      std::getline(in, line);
      int n = 0;
      while (std::getline(in, line)) n += line.rfind("0,", 0) == 0 && line[8] == '1';
      return n;
    };
    CHECK(placebo_with_s(dir("bip/data.csv")) == 0);
    CHECK(placebo_with_s(dir("cpv/data.csv")) > 0);
  }

  TEST_CASE("profile errors are validation errors") {
    Scratch dir;
    std::ofstream(dir("bad.cfg")) << "n_subjects = 100\n";
    const auto r = run({"simulate", "--config", dir("bad.cfg"), "--out", dir("x")});
    CHECK(r.code == 2);
    CHECK(r.err.find("missing required key") != std::string::npos);
    CHECK(run({"simulate", "--out", dir("x")}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
  }

  TEST_CASE("fit reports branches and persists the models") {
    Fixture f;
    const std::string text = slurp(f.dir("fit/fit.txt"));
    for (const char* key : {"beta = ", "b_given_x.coefficients = ", "s_given_b.sigma = ", "px_seronegative.gamma",
                            "diag.branch_counts_d00_d01_d10_d11 = ", "dataset_sha256 = "}) {
      CHECK(text.find(key) != std::string::npos);
    }
  }

  TEST_CASE("fit on data without vaccine recipients carrying both markers is a design error") {
    Scratch dir;
    std::ofstream(dir("d.csv")) << "z,x,y_tau,y,delta,s,delta_b,b\n"
                                << "1,1,0,1,1,2.0,0,\n1,1,0,0,0,,1,1.5\n0,1,0,0,0,,1,1.2\n0,1,0,1,0,,0,\n";
    const auto r = run({"fit", "--data", dir("d.csv"), "--out", dir("fit")});
    CHECK(r.code == 4);
    CHECK(r.err.find("4 subjects") != std::string::npos);
  }

  TEST_CASE("curves without perturbations give point estimates only") {
    Fixture f;
    const auto r = run({"curves", "--fit", f.dir("fit/fit.txt"), "--data", f.dir("sim/data.csv"), "--perturbations",
                        "0", "--out", f.dir("cur")});
    REQUIRE(r.code == 0);
    CHECK(first_data_line(f.dir("cur/curves.csv")) == "s,risk1,risk0,mcep,kind");
    CHECK_FALSE(fs::exists(f.dir("cur/test.csv")));
  }

  TEST_CASE("curves with perturbations: intervals, bands, test, determinism") {
    Fixture f;
    const std::vector<std::string> base{"curves", "--fit", f.dir("fit/fit.txt"), "--data", f.dir("sim/data.csv"),
                                        "--perturbations", "25", "--seed", "99", "--grid", "1.5:3.0:6"};
    auto with = [&](std::vector<std::string> extra) {
      auto a = base;
      a.insert(a.end(), extra.begin(), extra.end());
      return run(a);
    };
    const auto one = with({"--threads", "1", "--out", f.dir("c1")});
    const auto two = with({"--threads", "2", "--out", f.dir("c2")});
    REQUIRE(one.code == 0);
    REQUIRE(two.code == 0);
    for (const char* name : {"curves.csv", "ensemble.csv", "test.csv"}) {
      CHECK(slurp(f.dir(std::string("c1/") + name)) == slurp(f.dir(std::string("c2/") + name)));
    }
    CHECK(first_data_line(f.dir("c1/curves.csv")) == "s,risk1,risk0,mcep,se,ci_lo,ci_hi,band_lo,band_hi,kind");
    CHECK(first_data_line(f.dir("c1/ensemble.csv")) == "s,kind,est,se,q_point,q_simul");
    CHECK(first_data_line(f.dir("c1/test.csv")) == "p_value,side,sup_stat");
    CHECK(slurp(f.dir("c1/curves.csv")).rfind("# master_seed=99\n", 0) == 0);
    CHECK(one.out.find("p_value") != std::string::npos);

    std::ifstream in(f.dir("c1/curves.csv"));
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
      std::vector<double> v;
      std::stringstream ss(line);
      std::string cell;
      for (int k = 0; k < 9 && std::getline(ss, cell, ','); ++k) v.push_back(std::stod(cell));
      CHECK(v[7] <= v[5]);
      CHECK(v[8] >= v[6]);
      ++rows;
    }
    CHECK(rows == 24);
  }

  TEST_CASE("curves refuse a stale fit and a missing seed") {
    Fixture f;
    const auto no_seed = run({"curves", "--fit", f.dir("fit/fit.txt"), "--data", f.dir("sim/data.csv"),
                              "--perturbations", "25", "--out", f.dir("c")});
    CHECK(no_seed.code == 2);
    CHECK(no_seed.err.find("--seed") != std::string::npos);

    std::string data = slurp(f.dir("sim/data.csv"));
    data += "0,1,0,0,0,,0,\n";
    std::ofstream(f.dir("changed.csv"), std::ios::binary) << data;
    const auto stale = run({"curves", "--fit", f.dir("fit/fit.txt"), "--data", f.dir("changed.csv"),
                            "--perturbations", "0", "--out", f.dir("c")});
    CHECK(stale.code == 2);
    CHECK(stale.err.find("stale") != std::string::npos);
  }

  TEST_CASE("montecarlo writes the documented tables") {
    Scratch dir;
    const auto r = run({"montecarlo", "--config", (kProfiles / "smoke_bip.cfg").string(), "--replications", "2",
                        "--perturbations", "20", "--oracle-subjects", "200000", "--grid", "1.5:3.0:5", "--out",
                        dir("mc")});
    REQUIRE(r.code == 0);
    CHECK(first_data_line(dir("mc/mc_points.csv")) ==
          "s,kind,truth,mean_est,bias,mc_sd,mean_se,pointwise_cover,central");
    CHECK(first_data_line(dir("mc/mc_summary.csv")) == "kind,simultaneous_cover,replications,failures");
    CHECK(first_data_line(dir("mc/mc_tests.csv")) == "replication,p_value,side,sup_stat,reject");
    CHECK(fs::exists(dir("mc/runtime.txt")));
    CHECK(slurp(dir("mc/manifest.json")).find("runtime") == std::string::npos);
  }
}

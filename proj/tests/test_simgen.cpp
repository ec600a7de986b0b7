#include <doctest.h>

#include <cmath>
#include <sstream>

#include "emcurve/errors.hpp"
#include "emcurve/simgen.hpp"

using namespace emcurve;

namespace {

std::string profile_text(const SimConfig& c) {
  std::ostringstream out;
  write_sim_config(out, c);
  return out.str();
}

SimConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_sim_config(in);
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

std::string drop_line(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind(key + " =", 0) != 0) out += line + "\n";
  }
  return out;
}

}  // namespace

TEST_SUITE("simgen") {
  TEST_CASE("profiles round-trip through the text format") {
    SimConfig c;
    c.design = SamplingDesign::BipCpv;
    c.cpv_error_sd = 0.1;
    c.b_sampling_by_arm = true;
    const SimConfig back = parse(profile_text(c));
    CHECK(profile_text(back) == profile_text(c));
    CHECK(back.beta.to_vector() == c.beta.to_vector());
  }

  TEST_CASE("profile errors name the key and line") {
    const std::string text = profile_text(SimConfig{});
    CHECK(error_of(drop_line(text, "b_sd")).find("missing required key 'b_sd'") != std::string::npos);
    CHECK(error_of(text + "bogus = 1\n").find("line 17: unknown key 'bogus'") != std::string::npos);
    CHECK(error_of(text + "b_sd = 1\n").find("duplicate key 'b_sd'") != std::string::npos);
    CHECK(error_of(drop_line(text, "design") + "design = cohort\n").find("line 16") != std::string::npos);
    CHECK(error_of(drop_line(text, "n_subjects") + "n_subjects = -3\n").find("n_subjects") != std::string::npos);
    CHECK(error_of(drop_line(text, "beta") + "beta = 1, 2\n").find("beta needs 9 entries") != std::string::npos);
    CHECK_FALSE(error_of(drop_line(text, "x_probs") + "x_probs = 0.5, 0.25, 0.25, 0.25\n").empty());
  }

  TEST_CASE("same seed, same trial") {
    SimConfig c;
    c.n_subjects = 3000;
    c.design = SamplingDesign::BipCpv;
    const auto a = simulate_trial(c, 5).observations();
    const auto b = simulate_trial(c, 5).observations();
    const auto d = simulate_trial(c, 6).observations();
    REQUIRE(a.size() == b.size());
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      same = same && a[i].z == b[i].z && a[i].y == b[i].y && a[i].s == b[i].s && a[i].b == b[i].b;
      differs = differs || a[i].s != d[i].s || a[i].y != d[i].y;
    }
    CHECK(same);
    CHECK(differs);
  }

  TEST_CASE("section 3 trial: arm split, sampling counts and design rules") {
    const SimConfig c;
    const SimulatedTrial t = simulate_trial(c, 20190101);
    REQUIRE(t.subjects.size() == 10000);
    std::size_t vaccine = 0, with_b = 0, placebo_controls = 0, cpv = 0;
    for (const auto& s : t.subjects) {
      const auto& o = s.obs;
      vaccine += o.z;
      with_b += o.delta_b();
      if (o.z == 1) {
        CHECK(o.delta() == (o.y == 1 || o.delta_b()));
      } else {
        CHECK_FALSE(o.delta());
      }
      if (o.s) CHECK(*o.s == std::max(s.s_latent, c.limit));
      if (o.b) CHECK(*o.b == std::max(s.b_latent, c.limit));
    }
    // Binomial(10000, 2/3): SD about 47.
    CHECK(std::abs(static_cast<double>(vaccine) - 10000.0 * 2.0 / 3.0) < 4 * 47.2);
    CHECK(with_b == 3500);

    SimConfig cc = c;
    cc.design = SamplingDesign::BipCpv;
    const SimulatedTrial u = simulate_trial(cc, 20190101);
    for (const auto& s : u.subjects) {
      const auto& o = s.obs;
      if (o.z == 0 && o.y == 0) ++placebo_controls;
      if (o.z == 0 && o.delta()) {
        ++cpv;
        CHECK(o.y == 0);
      }
    }
    CHECK(cpv == static_cast<std::size_t>(std::llround(0.7 * placebo_controls)));
  }

  TEST_CASE("B sampled within arms") {
    SimConfig c;
    c.n_subjects = 5000;
    c.b_sampling_by_arm = true;
    const SimulatedTrial t = simulate_trial(c, 9);
    std::array<std::size_t, 2> n{}, b{};
    for (const auto& s : t.subjects) {
      ++n[static_cast<std::size_t>(s.obs.z)];
      b[static_cast<std::size_t>(s.obs.z)] += s.obs.delta_b();
    }
    for (int z : {0, 1}) CHECK(b[z] == static_cast<std::size_t>(std::llround(0.35 * n[z])));
  }

  TEST_CASE("latent correlation of S and B within x") {
    SimConfig c;
    c.n_subjects = 400000;
    const SimulatedTrial t = simulate_trial(c, 1);
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    std::size_t n = 0;
    for (const auto& s : t.subjects) {
      if (s.obs.x != 2) continue;
      ++n;
      sx += s.b_latent;
      sy += s.s_latent;
      sxx += s.b_latent * s.b_latent;
      syy += s.s_latent * s.s_latent;
      sxy += s.b_latent * s.s_latent;
    }
    const double cov = sxy / n - sx / n * sy / n;
    const double r = cov / std::sqrt((sxx / n - sx / n * sx / n) * (syy / n - sy / n * sy / n));
    const double exact = 0.5 * 0.86 / std::sqrt(0.25 * 0.86 * 0.86 + 0.16);
    CHECK(r == doctest::Approx(exact).epsilon(0.01));
  }

  TEST_CASE("quadrature event rates match simulation") {
    SimConfig c;
    c.n_subjects = 400000;
    const SimulatedTrial t = simulate_trial(c, 3);
    std::array<double, 2> n{}, y{};
    for (const auto& s : t.subjects) {
      n[static_cast<std::size_t>(s.obs.z)] += 1;
      y[static_cast<std::size_t>(s.obs.z)] += s.obs.y;
    }
    for (int z : {0, 1}) {
      const double p = generator_event_rate(c, z);
      const double se = std::sqrt(p * (1 - p) / n[z]);
      CHECK(std::abs(y[z] / n[z] - p) < 4 * se);
    }
  }

  TEST_CASE("oracle strata coincide when B and X do not enter the risk") {
    SimConfig c;
    c.beta.beta4 = 0.0;
    c.beta.beta5 = 0.0;
    c.beta.beta6 = {0.0, 0.0, 0.0};
    const CurveGrid grid = CurveGrid::linspace(1.6, 3.2, 5, DetectionLimit{1.0});
    OracleOptions oo;
    oo.subjects = 2'000'000;
    const TrueCurves truth = true_curves(c, grid, Contrast{}, oo);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      CHECK(std::abs(truth.seropositive[i] - truth.seronegative[i]) < 2e-3);
      CHECK(std::abs(truth.marginal[i] - truth.seronegative[i]) < 2e-3);
    }
  }

  TEST_CASE("oracle windows widen in the tails") {
    const SimConfig c;
    const CurveGrid grid({2.0, 4.6}, DetectionLimit{1.0});
    OracleOptions oo;
    oo.subjects = 1'000'000;
    const TrueCurves truth = true_curves(c, grid, Contrast{}, oo);
    CHECK(truth.half_width[0] == doctest::Approx(0.02));
    CHECK(truth.half_width[1] > 0.02);
  }

  TEST_CASE("design names") {
    CHECK(parse_design("bip") == SamplingDesign::BipOnly);
    CHECK(parse_design("bip-cpv") == SamplingDesign::BipCpv);
    CHECK(design_name(SamplingDesign::BipCpv) == "bip-cpv");
    CHECK_THROWS_AS(parse_design("cpv"), ValidationError);
  }
}

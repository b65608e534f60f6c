#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "peaklab/error.hpp"
#include "peaklab/metrics.hpp"
#include "peaklab/rng.hpp"

using namespace peak;
using namespace peak::metrics;

namespace {

// Direct transcription of the additivity definitions, kept independent of the
// library implementation. Operates on raw probability lists.
namespace oracle {

double sigmoid(double p) { return 1.0 / (1.0 + std::exp(-p)); }

double rff(const std::vector<double>& post_correct, double f_max) {
  double num = 0.0, den = 0.0;
  for (double p : post_correct) {
    den += sigmoid(p);
    if (p < f_max) num += sigmoid(p);
  }
  return num / den;
}

double rnf(const std::vector<double>& post_false, double c_min) {
  double num = 0.0, den = 0.0;
  for (double p : post_false) {
    den += sigmoid(p);
    if (p > c_min) num += sigmoid(p);
  }
  return num / den;
}

double cpc(const std::vector<double>& pre, const std::vector<double>& post) {
  double a = 0.0, b = 0.0;
  for (double p : post) a += p;
  for (double p : pre) b += p;
  return a / b;
}

double aff(double rff_v, double cpc_v) {
  return 1.0 - (1.0 - rff_v) * std::min(1.0, cpc_v);
}

double anf(double rnf_v, double fpc_v) {
  return 1.0 - (1.0 - rnf_v) * std::min(1.0, 1.0 / fpc_v);
}

}  // namespace oracle

std::vector<AnswerProbe> probes_from(const std::vector<double>& probabilities) {
  std::vector<AnswerProbe> out;
  for (double p : probabilities) {
    AnswerProbe probe;
    probe.prompt = {0};
    probe.answer = {1};
    probe.probability = p;
    probe.logprob = std::log(p);
    out.push_back(probe);
  }
  return out;
}

struct RandomConfig {
  std::vector<double> pre_correct, post_correct, pre_false, post_false;
};

RandomConfig random_config(Rng& rng) {
  RandomConfig c;
  const int n = static_cast<int>(rng.uniform_int(5, 20));
  const int m = static_cast<int>(rng.uniform_int(5, 30));
  for (int i = 0; i < n; ++i) {
    c.pre_correct.push_back(rng.uniform_open());
    c.post_correct.push_back(rng.uniform_open());
  }
  for (int i = 0; i < m; ++i) {
    c.pre_false.push_back(rng.uniform_open());
    c.post_false.push_back(rng.uniform_open());
  }
  return c;
}

}  // namespace

TEST_CASE("ranking factors reproduce the worked scalar examples") {
  // correct probs {0.6, 0.2}, false max 0.3
  const double rff = ranking_forgetting(probes_from({0.6, 0.2}), 0.3);
  const double expect_rff =
      oracle::sigmoid(0.2) / (oracle::sigmoid(0.2) + oracle::sigmoid(0.6));
  CHECK(rff == doctest::Approx(expect_rff).epsilon(1e-12));
  CHECK(rff == doctest::Approx(0.4599).epsilon(1e-4));

  // false probs {0.3, 0.1}, correct min 0.2
  const double rnf = ranking_noise(probes_from({0.3, 0.1}), 0.2);
  const double expect_rnf =
      oracle::sigmoid(0.3) / (oracle::sigmoid(0.3) + oracle::sigmoid(0.1));
  CHECK(rnf == doctest::Approx(expect_rnf).epsilon(1e-12));
  CHECK(rnf == doctest::Approx(0.5225).epsilon(1e-4));

  CHECK(ranking_forgetting(probes_from({0.5, 0.6}), 0.1) == 0.0);
  CHECK(ranking_forgetting(probes_from({0.05, 0.06}), 0.1) == 1.0);
  CHECK(ranking_noise(probes_from({0.05}), 0.1) == 0.0);
  CHECK(ranking_noise(probes_from({0.2, 0.3}), 0.1) == 1.0);
}

TEST_CASE("probability changes and aggregation follow the definitions") {
  const auto pc = probability_changes(probes_from({0.4, 0.4}),
                                      probes_from({0.2, 0.2}),
                                      probes_from({0.05}), probes_from({0.10}));
  CHECK(pc.cpc == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(pc.fpc == doctest::Approx(2.0).epsilon(1e-12));

  // CPC >= 1 leaves AFF at RFF.
  CHECK(aggregate_additivity(0.37, 0.0, 1.3, 1.0).aff ==
        doctest::Approx(0.37).epsilon(1e-12));
  // Worked example: RFF ~ 0.4599, CPC = 0.8.
  const double rff =
      oracle::sigmoid(0.2) / (oracle::sigmoid(0.2) + oracle::sigmoid(0.6));
  CHECK(aggregate_additivity(rff, 0.0, 0.8, 1.0).aff ==
        doctest::Approx(1.0 - (1.0 - rff) * 0.8).epsilon(1e-12));
  CHECK(aggregate_additivity(rff, 0.0, 0.8, 1.0).aff ==
        doctest::Approx(0.5679).epsilon(1e-3));
  // RNF = 0, FPC = 2 -> ANF = 0.5.
  CHECK(aggregate_additivity(0.0, 0.0, 1.0, 2.0).anf ==
        doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("metric oracle equivalence on randomized probe configurations") {
  Rng rng(4242);
  for (int trial = 0; trial < 200; ++trial) {
    const RandomConfig c = random_config(rng);
    const auto post_c = probes_from(c.post_correct);
    const auto post_f = probes_from(c.post_false);

    const double f_max =
        *std::max_element(c.post_false.begin(), c.post_false.end());
    const double c_min =
        *std::min_element(c.post_correct.begin(), c.post_correct.end());

    const double lib_rff = ranking_forgetting(post_c, f_max);
    const double lib_rnf = ranking_noise(post_f, c_min);
    const auto pc = probability_changes(probes_from(c.pre_correct), post_c,
                                        probes_from(c.pre_false), post_f);
    const auto agg = aggregate_additivity(lib_rff, lib_rnf, pc.cpc, pc.fpc);

    CHECK(std::abs(lib_rff - oracle::rff(c.post_correct, f_max)) < 1e-9);
    CHECK(std::abs(lib_rnf - oracle::rnf(c.post_false, c_min)) < 1e-9);
    CHECK(std::abs(pc.cpc - oracle::cpc(c.pre_correct, c.post_correct)) < 1e-9);
    CHECK(std::abs(pc.fpc - oracle::cpc(c.pre_false, c.post_false)) < 1e-9);
    CHECK(std::abs(agg.aff -
                   oracle::aff(oracle::rff(c.post_correct, f_max),
                               oracle::cpc(c.pre_correct, c.post_correct))) <
          1e-9);
    CHECK(std::abs(agg.anf -
                   oracle::anf(oracle::rnf(c.post_false, c_min),
                               oracle::cpc(c.pre_false, c.post_false))) < 1e-9);

    // Range and aggregation identities.
    for (double v : {lib_rff, lib_rnf, agg.aff, agg.anf}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    if (pc.cpc >= 1.0) CHECK(agg.aff == doctest::Approx(lib_rff).epsilon(1e-15));
    if (pc.cpc < 1.0) CHECK(agg.aff >= lib_rff - 1e-15);
    if (pc.fpc <= 1.0) CHECK(agg.anf == doctest::Approx(lib_rnf).epsilon(1e-15));
    if (pc.fpc > 1.0) CHECK(agg.anf >= lib_rnf - 1e-15);
  }
}

TEST_CASE("rff monotonicity under lowering a correct probe") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const RandomConfig c = random_config(rng);
    const double f_max =
        *std::max_element(c.post_false.begin(), c.post_false.end());
    const double before = ranking_forgetting(probes_from(c.post_correct), f_max);

    // Push one above-threshold probe below the threshold.
    std::vector<double> lowered = c.post_correct;
    for (double& p : lowered)
      if (p >= f_max) {
        p = f_max / 2.0;
        break;
      }
    const double after = ranking_forgetting(probes_from(lowered), f_max);
    CHECK(after >= before - 1e-12);

    const double rnf_before =
        ranking_noise(probes_from(c.post_false),
                      *std::min_element(c.post_correct.begin(),
                                        c.post_correct.end()));
    std::vector<double> raised = c.post_false;
    const double c_min = *std::min_element(c.post_correct.begin(),
                                           c.post_correct.end());
    for (double& p : raised)
      if (p <= c_min) {
        p = std::min(1.0, c_min + (1.0 - c_min) / 2.0 + 1e-9);
        break;
      }
    const double rnf_after = ranking_noise(probes_from(raised), c_min);
    CHECK(rnf_after >= rnf_before - 1e-12);
  }
}

TEST_CASE("aggregate_dataset averages and formats rows") {
  EditEval a;
  a.es = 1;
  a.gs = 1.0;
  a.ls = 1.0;
  AdditivityEval hard;
  hard.false_set = FalseSet::kHard;
  hard.aff = 0.2;
  hard.anf = 0.1;
  AdditivityEval rnd;
  rnd.false_set = FalseSet::kRandom;
  rnd.aff = 0.05;
  rnd.anf = 0.02;
  a.additivity = {hard, rnd};

  EditEval b = a;
  b.es = 0;
  b.gs = 0.5;

  const ReportRow single = aggregate_dataset("one", {a});
  CHECK(single.es == doctest::Approx(1.0));
  const ReportRow row = aggregate_dataset("two", {a, b});
  CHECK(row.es == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(row.gs == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(format_percent(row.es) == "50.00");

  const auto header = report_header(row.false_sets);
  REQUIRE(header.size() == 7);
  CHECK(header[0] == "ES");
  CHECK(header[1] == "GS");
  CHECK(header[2] == "LS");
  CHECK(header[3] == "AFF(h)");
  CHECK(header[4] == "ANF(h)");
  CHECK(header[5] == "AFF(r)");
  CHECK(header[6] == "ANF(r)");

  CHECK_THROWS_AS(aggregate_dataset("empty", {}), Error);
}

TEST_CASE("format_percent rounds half to even") {
  CHECK(format_percent(0.5) == "50.00");
  CHECK(format_percent(1.0) == "100.00");
  CHECK(format_percent(0.123456) == "12.35");
  CHECK(format_percent(0.0) == "0.00");
}

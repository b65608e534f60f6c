#include <cmath>
#include <optional>

#include "doctest.h"
#include "peaklab/dataset.hpp"
#include "peaklab/editors.hpp"
#include "peaklab/error.hpp"
#include "peaklab/objective.hpp"
#include "test_util.hpp"

using namespace peak;
using namespace peak::editors;
using peak::microlm::ModelConfig;
using peak::microlm::ModelParams;
using peak::microlm::params_checksum;

namespace {

// World + model sized for fast editor tests (untrained weights are fine for
// structural properties).
struct Fixture {
  dataset::WorldBundle world;
  ModelParams model;
  ROMEConfig rome;
  FTConfig ft;

  Fixture() {
    dataset::SyntheticWorldConfig wcfg;
    wcfg.n_relations = 2;
    wcfg.n_subjects_per_relation = 2;
    wcfg.n_correct_per_fact = 2;
    wcfg.n_hard = 3;
    wcfg.n_random = 2;
    wcfg.clusters_per_relation = 2;
    wcfg.cluster_size = 5;
    wcfg.corpus_repetitions = 1;
    wcfg.entity_hi = 200;
    wcfg.seed = 3;
    world = dataset::generate_world(wcfg);

    ModelConfig mcfg = testutil::tiny_config(8);
    mcfg.vocab_size = 200;
    model = microlm::init_model(mcfg);

    // Patch below the top layer so the substitution can reach later
    // positions through the remaining attention blocks.
    rome.layer = 0;
    rome.n_prefixes = 3;
    rome.prefix_len_max = 4;
    rome.v_steps = 5;
    rome.v_rate = 0.25;
    rome.cov_samples = 20;
    rome.cov_ridge = 1e-2;
    rome.seed = 11;

    ft.layer = 1;
    ft.steps = 4;
    ft.rate = 1e-3;
    ft.norm_budget = 5e-4;
  }
};

}  // namespace

TEST_CASE("build_app_terms emits the right counts and weights") {
  Fixture fx;
  dataset::PeakInstance inst = fx.world.instances.front();
  inst.correct.resize(2);
  inst.hard_false.resize(3);

  APPConfig app;
  app.alpha = 0.6;
  app.beta = 0.0;
  app.gamma = 0.0;
  const auto hinges = build_app_terms(fx.model, inst, app, inst.prompt);
  REQUIRE(hinges.size() == 6);  // N*M = 2*3
  for (const auto& t : hinges) {
    CHECK(t.kind == microlm::TermKind::kHingePair);
    CHECK(t.weight == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(t.reference == doctest::Approx(2.0));
  }

  app.alpha = 0.2;
  app.beta = 0.5;
  app.gamma = 0.3;
  const auto all = build_app_terms(fx.model, inst, app, inst.prompt);
  CHECK(all.size() == 6 + 2 + 3);

  app.alpha = app.beta = app.gamma = 0.0;
  CHECK(build_app_terms(fx.model, inst, app, inst.prompt).empty());

  dataset::PeakInstance empty = inst;
  empty.hard_false.clear();
  app.alpha = 0.2;
  CHECK_THROWS_AS(build_app_terms(fx.model, empty, app, inst.prompt), Error);
}

TEST_CASE("freeze objectives vanish on the unedited model") {
  Fixture fx;
  const dataset::PeakInstance& inst = fx.world.instances.front();
  APPConfig app;
  app.alpha = 0.0;
  app.beta = 0.7;
  app.gamma = 0.4;
  const auto terms = build_app_terms(fx.model, inst, app, inst.prompt);
  const double value = microlm::objective_value(fx.model, terms, std::nullopt);
  CHECK(value == 0.0);
}

TEST_CASE("rank_one_update solves the hand 2x2 case exactly") {
  Matrix w(2, 2);
  w(0, 0) = 1.0;
  w(1, 1) = 1.0;
  Matrix cov(2, 2);
  cov(0, 0) = 1.0;
  cov(1, 1) = 1.0;
  const Vec k{1.0, 0.0};
  const Vec v{3.0, 0.0};

  const Matrix w_hat = rank_one_update(w, k, v, cov);
  CHECK(w_hat(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(w_hat(0, 1) == doctest::Approx(0.0));
  CHECK(w_hat(1, 0) == doctest::Approx(0.0));
  CHECK(w_hat(1, 1) == doctest::Approx(1.0).epsilon(1e-15));

  // v = W k leaves the matrix untouched.
  const Vec v_inert{1.0, 0.0};
  const Matrix same = rank_one_update(w, k, v_inert, cov);
  CHECK(same.data == w.data);
}

TEST_CASE("rank_one_update inserts the pair on random instances") {
  Rng rng(99);
  for (int d_ff : {8, 64}) {
    for (int trial = 0; trial < 30; ++trial) {
      const int d_out = 6;
      Matrix w(d_out, d_ff);
      for (double& x : w.data) x = rng.gauss();
      Vec k(d_ff), v(d_out);
      for (double& x : k) x = rng.gauss();
      for (double& x : v) x = rng.gauss();

      // SPD covariance: A A^T + ridge I.
      Matrix a(d_ff, d_ff);
      for (double& x : a.data) x = rng.gauss() * 0.3;
      Matrix cov(d_ff, d_ff);
      matmul_nt(a, a, cov);
      for (int i = 0; i < d_ff; ++i) cov(i, i) += 0.1;

      const Matrix w_hat = rank_one_update(w, k, v, cov);
      double err = 0.0, vnorm = 0.0;
      for (int i = 0; i < d_out; ++i) {
        double got = 0.0;
        for (int j = 0; j < d_ff; ++j) got += w_hat(i, j) * k[j];
        err += (got - v[i]) * (got - v[i]);
        vnorm += v[i] * v[i];
      }
      CHECK(std::sqrt(err) / std::sqrt(vnorm) < 1e-8);
    }
  }
}

TEST_CASE("rank_one_update rejects a degenerate key") {
  Matrix w(2, 2);
  Matrix cov(2, 2);
  cov(0, 0) = cov(1, 1) = 1.0;
  CHECK_THROWS_AS(rank_one_update(w, Vec{0.0, 0.0}, Vec{1.0, 0.0}, cov), Error);
}

TEST_CASE("estimate_covariance matches its closed forms") {
  Fixture fx;
  ROMEConfig cfg = fx.rome;

  SUBCASE("zero samples gives ridge identity") {
    cfg.cov_samples = 0;
    cfg.cov_ridge = 0.125;
    const Matrix cov = estimate_covariance(fx.model, cfg, {});
    for (int i = 0; i < cov.rows; ++i)
      for (int j = 0; j < cov.cols; ++j)
        CHECK(cov(i, j) == (i == j ? 0.125 : 0.0));
  }

  SUBCASE("single sample gives kk^T plus ridge") {
    cfg.cov_samples = 1;
    cfg.cov_ridge = 0.5;
    const microlm::TokenSeq prompt = fx.world.instances.front().prompt;
    const Matrix cov = estimate_covariance(fx.model, cfg, {prompt});

    const auto fr = microlm::forward(fx.model, prompt);
    const Matrix& act = fr.trace.layers[cfg.layer].fc_act;
    const int last = static_cast<int>(prompt.size()) - 1;
    for (int i = 0; i < cov.rows; ++i)
      for (int j = 0; j < cov.cols; ++j) {
        const double expect =
            act(last, i) * act(last, j) + (i == j ? 0.5 : 0.0);
        CHECK(cov(i, j) == doctest::Approx(expect).epsilon(1e-15));
      }
  }

  SUBCASE("symmetric positive definite") {
    std::vector<microlm::TokenSeq> prompts;
    for (const auto& inst : fx.world.instances) prompts.push_back(inst.prompt);
    const Matrix cov = estimate_covariance(fx.model, cfg, prompts);
    for (int i = 0; i < cov.rows; ++i)
      for (int j = 0; j < i; ++j)
        CHECK(std::abs(cov(i, j) - cov(j, i)) < 1e-12);
    CHECK_NOTHROW(CholeskySolver{cov});
  }
}

TEST_CASE("compute_key reduces to a plain forward with one empty prefix") {
  Fixture fx;
  ROMEConfig cfg = fx.rome;
  cfg.n_prefixes = 1;
  cfg.prefix_len_min = 0;
  cfg.prefix_len_max = 0;
  const dataset::PeakInstance& inst = fx.world.instances.front();

  const Vec k = compute_key(fx.model, inst, cfg);
  const auto fr = microlm::forward(fx.model, inst.subject_tokens);
  const Matrix& act = fr.trace.layers[cfg.layer].fc_act;
  const int last = static_cast<int>(inst.subject_tokens.size()) - 1;
  for (int i = 0; i < static_cast<int>(k.size()); ++i)
    CHECK(k[i] == doctest::Approx(act(last, i)).epsilon(1e-15));

  // Determinism and sensitivity to the prefix count.
  cfg = fx.rome;
  const Vec k1 = compute_key(fx.model, inst, cfg);
  const Vec k2 = compute_key(fx.model, inst, cfg);
  CHECK(k1 == k2);
  cfg.n_prefixes += 1;
  CHECK(compute_key(fx.model, inst, cfg) != k1);

  dataset::PeakInstance mangled = inst;
  mangled.prompt = {0, 1};  // no subject inside
  CHECK_THROWS_AS(compute_key(fx.model, mangled, cfg), Error);
}

TEST_CASE("optimize_value starts from the unpatched activation") {
  Fixture fx;
  const dataset::PeakInstance& inst = fx.world.instances.front();
  ROMEConfig cfg = fx.rome;
  cfg.v_steps = 0;

  const ValueResult res = optimize_value(fx.model, inst, std::nullopt, cfg);
  const auto fr = microlm::forward(fx.model, inst.prompt);
  const Matrix& mlp = fr.trace.layers[cfg.layer].mlp_out;
  const int pos =
      last_subject_position(inst.prompt, inst.subject_tokens);
  for (int i = 0; i < static_cast<int>(res.v_star.size()); ++i)
    CHECK(res.v_star[i] == mlp(pos, i));
  CHECK(res.trajectory.empty());

  cfg.v_steps = 6;
  const ValueResult moved = optimize_value(fx.model, inst, std::nullopt, cfg);
  CHECK(moved.trajectory.size() == 6);
  CHECK(moved.v_star != res.v_star);
}

TEST_CASE("apply_rome touches only w_proj at the edited layer") {
  Fixture fx;
  const dataset::PeakInstance& inst = fx.world.instances.front();
  std::vector<microlm::TokenSeq> prompts;
  for (const auto& i : fx.world.instances) prompts.push_back(i.prompt);

  const EditOutcome out =
      apply_rome(fx.model, inst, std::nullopt, fx.rome, prompts);
  CHECK(out.loss_trajectory.size() == static_cast<std::size_t>(fx.rome.v_steps));
  CHECK(out.lambda_norm > 0.0);

  bool only_wproj_changed = true;
  microlm::for_each_tensor(fx.model, [&](const std::string& name,
                                         const Matrix& m) {
    const Matrix* edited = nullptr;
    microlm::for_each_tensor(out.edited,
                             [&](const std::string& n2, const Matrix& m2) {
                               if (n2 == name) edited = &m2;
                             });
    REQUIRE(edited != nullptr);
    const bool same = edited->data == m.data;
    const std::string expect_changed =
        "layer" + std::to_string(fx.rome.layer) + ".w_proj";
    if (name == expect_changed) {
      if (same) only_wproj_changed = false;  // must differ
    } else if (!same) {
      only_wproj_changed = false;
    }
  });
  CHECK(only_wproj_changed);

  // The inserted association holds: W_hat k* = v*.
  const Vec k_star = compute_key(fx.model, inst, fx.rome);
  const ValueResult vres = optimize_value(fx.model, inst, std::nullopt, fx.rome);
  const Matrix w_math = transpose(out.edited.layers[fx.rome.layer].w_proj);
  double err = 0.0, vnorm = 0.0;
  for (int i = 0; i < w_math.rows; ++i) {
    double got = 0.0;
    for (int j = 0; j < w_math.cols; ++j) got += w_math(i, j) * k_star[j];
    err += (got - vres.v_star[i]) * (got - vres.v_star[i]);
    vnorm += vres.v_star[i] * vres.v_star[i];
  }
  CHECK(std::sqrt(err / vnorm) < 1e-8);

  // Determinism.
  const EditOutcome again =
      apply_rome(fx.model, inst, std::nullopt, fx.rome, prompts);
  CHECK(params_checksum(again.edited) == params_checksum(out.edited));
}

TEST_CASE("zero-weight coupling is bit-identical to the uncoupled editors") {
  Fixture fx;
  const dataset::PeakInstance& inst = fx.world.instances.front();
  std::vector<microlm::TokenSeq> prompts;
  for (const auto& i : fx.world.instances) prompts.push_back(i.prompt);

  APPConfig zero;
  zero.alpha = zero.beta = zero.gamma = 0.0;

  const EditOutcome plain =
      apply_rome(fx.model, inst, std::nullopt, fx.rome, prompts);
  const EditOutcome coupled = apply_rome(fx.model, inst, zero, fx.rome, prompts);
  CHECK(params_checksum(plain.edited) == params_checksum(coupled.edited));

  const EditOutcome ft_plain = apply_ft(fx.model, inst, std::nullopt, fx.ft);
  const EditOutcome ft_coupled = apply_ft(fx.model, inst, zero, fx.ft);
  CHECK(params_checksum(ft_plain.edited) == params_checksum(ft_coupled.edited));
}

TEST_CASE("apply_ft respects the weight-change budget") {
  Fixture fx;
  const dataset::PeakInstance& inst = fx.world.instances.front();

  SUBCASE("vanishing budget pins the weights") {
    FTConfig cfg = fx.ft;
    cfg.norm_budget = 1e-12;
    const EditOutcome out = apply_ft(fx.model, inst, std::nullopt, cfg);
    CHECK(out.weight_delta_norm <= 1e-12);
  }

  SUBCASE("a huge rate saturates the projection exactly") {
    FTConfig cfg = fx.ft;
    cfg.steps = 1;
    cfg.rate = 1e9;
    cfg.norm_budget = 1e-3;
    const EditOutcome out = apply_ft(fx.model, inst, std::nullopt, cfg);
    CHECK(out.weight_delta_norm == 1e-3);
  }

  SUBCASE("other tensors never move") {
    const EditOutcome out = apply_ft(fx.model, inst, std::nullopt, fx.ft);
    CHECK(out.loss_trajectory.size() == static_cast<std::size_t>(fx.ft.steps));
    microlm::for_each_tensor(fx.model, [&](const std::string& name,
                                           const Matrix& m) {
      const Matrix* edited = nullptr;
      microlm::for_each_tensor(out.edited,
                               [&](const std::string& n2, const Matrix& m2) {
                                 if (n2 == name) edited = &m2;
                               });
      const std::string expect_changed =
          "layer" + std::to_string(fx.ft.layer) + ".w_proj";
      if (name != expect_changed) CHECK(edited->data == m.data);
    });
  }
}

TEST_CASE("editor configs validate their fields") {
  Fixture fx;
  ROMEConfig bad = fx.rome;
  bad.layer = 99;
  CHECK_THROWS_AS(bad.validate(fx.model.config), Error);

  bad = fx.rome;
  bad.cov_samples = 1;  // < d_ff
  bad.cov_ridge = 0.0;
  CHECK_THROWS_AS(bad.validate(fx.model.config), Error);

  FTConfig bad_ft = fx.ft;
  bad_ft.steps = 0;
  CHECK_THROWS_AS(bad_ft.validate(fx.model.config), Error);

  APPConfig bad_app;
  bad_app.margin = 0.0;
  CHECK_THROWS_AS(bad_app.validate(), Error);
  bad_app = APPConfig{};
  bad_app.alpha = -0.1;
  CHECK_THROWS_AS(bad_app.validate(), Error);
}

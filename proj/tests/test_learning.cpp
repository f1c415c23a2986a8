#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <omp.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "supportaff/errors.hpp"
#include "supportaff/learning.hpp"

using namespace supportaff;
using nn::Mat;
using nn::Vec;
using testing::tiny_config;

namespace {

Dataset small_dataset(TaskType task, int n, std::uint64_t seed, double mix = 0.5) {
  EnvConfig env;
  env.n_points = 128;
  CollectConfig c;
  c.n = n;
  c.mix = mix;
  return collect_offline(task, env, c, seed);
}

/// Scorer whose output is the constant `value` for every input.
void make_constant_scorer(ScoringHead& head, double value) {
  nn::Dense& last = head.mlp.layers.back();
  last.weight.setZero();
  last.bias.setConstant(std::log(value / (1.0 - value)));
}

bool same_weights(ModelWeights& a, ModelWeights& b, ParamGroup group = ParamGroup::All) {
  const nn::ParamList pa = model_params(a, group), pb = model_params(b, group);
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (*pa[i].value != *pb[i].value) return false;
  return true;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch = 6;
  t.proposal_batch = 4;
  t.stage1_steps = 3;
  t.stage2_steps = 3;
  t.n_dirs = 6;
  t.k_avg = 2;
  t.label_points = 3;
  t.adapt_online = 5;
  t.adapt_offline = 7;
  return t;
}

void check_all(ModelWeights& w, ModelWeights& grad, const std::function<double()>& loss, SeedState seed) {
  const auto checks = testing::check_gradients(model_params(w, ParamGroup::All), model_params(grad, ParamGroup::All),
                                               loss, 1e-5, 10, seed);
  for (const auto& c : checks) CHECK_MESSAGE(c.rel_error <= 1e-3, c.name << " " << c.rel_error);
}

}  // namespace

TEST_CASE("gt_score examples and range") {
  CHECK(gt_score(0, 0, 1, 1) == 1.0);
  CHECK(gt_score(1, 1, 1, 1) == 0.0);
  CHECK(gt_score(0.3, 0.2, 1, 1) == doctest::Approx(0.5).epsilon(1e-12));
  Rng rng({1, 1});
  for (int i = 0; i < 2000; ++i) {
    const double r = gt_score(rng.uniform(0, 5), rng.uniform(), rng.uniform(0, 3), rng.uniform(0, 3));
    CHECK((r >= 0.0 && r <= 1.0));
  }
}

TEST_CASE("loss examples") {
  const std::vector<double> a{0.25}, b{0.75};
  CHECK(scoring_loss(a, a) == 0.0);
  CHECK(scoring_loss(std::vector<double>{0.0}, std::vector<double>{1.0}) == 1.0);
  CHECK(scoring_loss(a, b) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(affordance_loss(a, a) == 0.0);
  CHECK(affordance_loss(std::vector<double>{0.0}, std::vector<double>{1.0}) == 1.0);
  CHECK(affordance_loss(std::vector<double>{0.2}, std::vector<double>{0.9}) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(scoring_loss(std::vector<double>{0.0, 1.0}, std::vector<double>{1.0, 1.0}) == 0.5);
  CHECK_THROWS_AS(scoring_loss(a, std::vector<double>{}), InvalidArgument);

  const Vec3 d = Vec3(1, 2, 2) / 3.0;
  CHECK(proposal_loss(d, d, Vec::Zero(128), Vec::Zero(128), 1, 1).total() == doctest::Approx(0.0));
  CHECK(proposal_loss(-d, d, Vec::Zero(4), Vec::Zero(4), 1.5, 0).total() == doctest::Approx(3.0));
  const ProposalLossTerms kl = proposal_loss(d, -d, Vec::Ones(128), Vec::Zero(128), 0, 2);
  CHECK(kl.direction == 0.0);
  CHECK(kl.kl == doctest::Approx(128.0));
}

TEST_CASE("proposal loss is non-negative and zero only at the optimum") {
  Rng rng({2, 2});
  for (int i = 0; i < 500; ++i) {
    const Vec3 a = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    const Vec3 b = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    Vec mu(6), lv(6);
    for (int k = 0; k < 6; ++k) {
      mu(k) = rng.normal();
      lv(k) = rng.normal();
    }
    const double l = proposal_loss(a, b, mu, lv, rng.uniform(0.1, 2), rng.uniform(0.1, 2)).total();
    CHECK(l > 0.0);
  }
}

TEST_CASE("loss gradients match central differences") {
  Rng rng({3, 3});
  const double h = 1e-6;
  std::vector<double> c{0.1, 0.7, 0.4}, r{0.3, 0.2, 0.9}, g;
  scoring_loss(c, r, &g);
  for (std::size_t i = 0; i < c.size(); ++i) {
    auto up = c, dn = c;
    up[i] += h;
    dn[i] -= h;
    CHECK(g[i] == doctest::Approx((scoring_loss(up, r) - scoring_loss(dn, r)) / (2 * h)).epsilon(1e-6));
  }
  affordance_loss(c, r, &g);
  for (std::size_t i = 0; i < c.size(); ++i) {
    auto up = c, dn = c;
    up[i] += h;
    dn[i] -= h;
    CHECK(g[i] == doctest::Approx((affordance_loss(up, r) - affordance_loss(dn, r)) / (2 * h)).epsilon(1e-6));
  }

  const Vec3 d_hat = Vec3(0.3, -0.4, 0.5), d = Vec3(1, 2, -2) / 3.0;
  Vec mu(4), lv(4);
  mu << 0.3, -1.2, 0.5, 0.0;
  lv << -0.4, 0.2, 1.1, -2.0;
  ProposalLossGrad pg;
  proposal_loss(d_hat, d, mu, lv, 0.7, 1.3, &pg);
  const auto f = [&](const Vec3& dh, const Vec& m, const Vec& l) { return proposal_loss(dh, d, m, l, 0.7, 1.3).total(); };
  for (int k = 0; k < 3; ++k) {
    Vec3 up = d_hat, dn = d_hat;
    up(k) += h;
    dn(k) -= h;
    CHECK(pg.d_dhat(k) == doctest::Approx((f(up, mu, lv) - f(dn, mu, lv)) / (2 * h)).epsilon(1e-6));
  }
  for (int k = 0; k < 4; ++k) {
    Vec up = mu, dn = mu;
    up(k) += h;
    dn(k) -= h;
    CHECK(pg.d_mu(k) == doctest::Approx((f(d_hat, up, lv) - f(d_hat, dn, lv)) / (2 * h)).epsilon(1e-6));
    up = lv;
    dn = lv;
    up(k) += h;
    dn(k) -= h;
    CHECK(pg.d_logvar(k) == doctest::Approx((f(d_hat, mu, up) - f(d_hat, mu, dn)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("stage-1 batch gradients through every head") {
  const Dataset d = small_dataset(TaskType::Screw, 80, 4);
  ModelWeights w = make_model(tiny_config(), {4, 1});
  const FeatureCache cache = build_feature_cache(w, d);
  // Records with two context frames exercise the attention weights.
  std::vector<std::size_t> with_ctx, plain;
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    if (d.records[i].context.size() >= 2) with_ctx.push_back(i);
    if (d.records[i].context.empty()) plain.push_back(i);
  }
  REQUIRE(with_ctx.size() >= 2);
  const std::vector<std::size_t> score{with_ctx[0], plain[0], with_ctx[1]};
  const std::vector<std::size_t> prop{with_ctx[1], plain[1]};
  TrainConfig cfg;
  cfg.lambda_dir = 0.8;
  cfg.lambda_kl = 1.3;
  for (bool frozen : {false, true}) {
    ModelWeights grad = zeros_like(w);
    stage1_batch_loss(w, d, cache, score, prop, cfg, {4, 9}, frozen, &grad);
    check_all(w, grad, [&] { return stage1_batch_loss(w, d, cache, score, prop, cfg, {4, 9}, frozen).total(); },
              {4, frozen ? 11u : 10u});
    if (frozen) {
      for (const auto& p : model_params(grad, ParamGroup::All)) {
        if (p.name.starts_with("proposal.enc.sa") || p.name.starts_with("scoring.enc.sa") ||
            p.name.starts_with("proposal.enc.fp") || p.name.starts_with("scoring.enc.fp"))
          CHECK(p.value->norm() == 0.0);
      }
    }
  }
}

TEST_CASE("stage-2 batch gradients") {
  const Dataset d = small_dataset(TaskType::Pick, 12, 5);
  ModelWeights w = make_model(tiny_config(), {5, 1});
  TrainConfig cfg = tiny_train();
  const LabelSet labels = generate_labels(w, d, cfg);
  const std::vector<std::size_t> batch{0, 3, 7, 3};
  for (bool balanced : {false, true}) {
    ModelWeights grad = zeros_like(w);
    stage2_batch_loss(w, d, labels, batch, Exec::Serial, &grad, balanced);
    check_all(w, grad, [&] { return stage2_batch_loss(w, d, labels, batch, Exec::Serial, nullptr, balanced).total(); },
              {5, balanced ? 11u : 10u});
  }
}

TEST_CASE("balanced stage-2 loss splits the weight between label classes") {
  const Dataset d = small_dataset(TaskType::Pick, 12, 5);
  const ModelWeights w = make_model(tiny_config(), {5, 1});
  LabelSet labels = generate_labels(w, d, tiny_train());
  const std::vector<std::size_t> batch{1, 4};
  std::vector<double> a_hat;
  for (std::size_t k : batch) {
    const InteractionRecord& rec = d.records[k];
    const HierarchyPlan plan = plan_hierarchy(d.scenes[rec.scene_id].cloud, w.config.encoder);
    const nn::Vec a = affordance_points_forward(w.affordance, plan, rec.p_op, labels.points[k], labels.f_I[k], nullptr);
    for (Eigen::Index p = 0; p < a.size(); ++p) a_hat.push_back(a(p));
    // One high label per record, the rest low.
    for (std::size_t p = 0; p < labels.labels[k].size(); ++p) labels.labels[k][p] = p == 0 ? 0.9 : 0.1 * p / 8.0;
  }
  double high = 0.0, low = 0.0, all = 0.0;
  int n_high = 0, n_low = 0, j = 0;
  for (std::size_t k : batch)
    for (double label : labels.labels[k]) {
      const double e = std::abs(a_hat[static_cast<std::size_t>(j++)] - label);
      all += e;
      if (label >= 0.5) {
        high += e;
        ++n_high;
      } else {
        low += e;
        ++n_low;
      }
    }
  CHECK(stage2_batch_loss(w, d, labels, batch, Exec::Serial).affordance == doctest::Approx(all / j).epsilon(1e-12));
  CHECK(stage2_batch_loss(w, d, labels, batch, Exec::Serial, nullptr, true).affordance ==
        doctest::Approx(0.5 * high / n_high + 0.5 * low / n_low).epsilon(1e-12));
  // A single class falls back to the plain mean.
  for (std::size_t k : batch) std::fill(labels.labels[k].begin(), labels.labels[k].end(), 0.2);
  CHECK(stage2_batch_loss(w, d, labels, batch, Exec::Serial, nullptr, true).affordance ==
        doctest::Approx(stage2_batch_loss(w, d, labels, batch, Exec::Serial).affordance).epsilon(1e-15));
}

TEST_CASE("parallel batch gradients match serial") {
  const Dataset d = small_dataset(TaskType::Pull, 30, 6);
  const ModelWeights w = make_model(tiny_config(), {6, 1});
  const FeatureCache cache = build_feature_cache(w, d);
  const std::vector<std::size_t> score{0, 1, 2, 3, 4, 5, 6}, prop{7, 8, 9};
  TrainConfig cfg;
  ModelWeights gs = zeros_like(w), gp = zeros_like(w);
  const double ls = stage1_batch_loss(w, d, cache, score, prop, cfg, {6, 2}, false, &gs).total();
  cfg.exec = Exec::Parallel;
  const int saved = omp_get_max_threads();
  omp_set_num_threads(3);
  const double lp = stage1_batch_loss(w, d, cache, score, prop, cfg, {6, 2}, false, &gp).total();
  omp_set_num_threads(saved);
  CHECK(lp == doctest::Approx(ls).epsilon(1e-12));
  const nn::ParamList a = model_params(gs, ParamGroup::All), b = model_params(gp, ParamGroup::All);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK_MESSAGE((*a[i].value - *b[i].value).norm() <= 1e-12 * (1.0 + a[i].value->norm()), a[i].name);
}

TEST_CASE("affordance labels") {
  const ModelConfig cfg = tiny_config();
  testing::Fixture fx(cfg, 7, TaskType::Screw, 128);
  const Vec f_I = Vec::Random(cfg.context_dim);
  const int n_dirs = 9;

  SUBCASE("a constant scorer labels every point with its constant") {
    ModelWeights w = fx.w;
    make_constant_scorer(w.scoring, 0.7);
    for (int p : {0, 17, 90})
      CHECK(affordance_label(w, fx.plan, fx.p_op, p, f_I, n_dirs, 3, {7, 1}) == doctest::Approx(0.7).epsilon(1e-12));
  }
  SUBCASE("labels equal an out-of-band re-enumeration") {
    for (int p : {3, 40, 101}) {
      const auto samples = testing::enumerate_samples(fx.w, fx.plan, fx.p_op, p, f_I, n_dirs, {7, 2});
      std::vector<double> s;
      for (const auto& x : samples) s.push_back(x.score);
      double mean = 0.0;
      for (double x : s) mean += x / n_dirs;
      CHECK(affordance_label(fx.w, fx.plan, fx.p_op, p, f_I, n_dirs, n_dirs, {7, 2}) ==
            doctest::Approx(mean).epsilon(1e-10));
      std::sort(s.begin(), s.end(), std::greater<>());
      const double top3 = (s[0] + s[1] + s[2]) / 3.0;
      CHECK(affordance_label(fx.w, fx.plan, fx.p_op, p, f_I, n_dirs, 3, {7, 2}) == doctest::Approx(top3).epsilon(1e-10));
    }
    const std::vector<int> pts{3, 40, 101};
    const std::vector<double> batch = affordance_labels(fx.w, fx.plan, fx.p_op, pts, f_I, n_dirs, 4, {7, 3});
    for (std::size_t i = 0; i < pts.size(); ++i)
      CHECK(batch[i] == affordance_label(fx.w, fx.plan, fx.p_op, pts[i], f_I, n_dirs, 4, {7, 3}));
  }
  SUBCASE("a dominating scorer never lowers a label") {
    ModelWeights lo = fx.w, hi = fx.w;
    make_constant_scorer(lo.scoring, 0.3);
    make_constant_scorer(hi.scoring, 0.6);
    for (int p = 0; p < 128; p += 7)
      CHECK(affordance_label(hi, fx.plan, fx.p_op, p, f_I, n_dirs, 2, {7, 4}) >=
            affordance_label(lo, fx.plan, fx.p_op, p, f_I, n_dirs, 2, {7, 4}));
  }
  SUBCASE("top_mean shrinks as more scores are averaged") {
    Rng rng({7, 5});
    for (int t = 0; t < 100; ++t) {
      std::vector<double> s(12);
      for (auto& x : s) x = rng.uniform();
      for (int k = 1; k < 12; ++k) CHECK(top_mean(s, k + 1) <= top_mean(s, k) + 1e-15);
    }
    CHECK_THROWS_AS(top_mean(std::vector<double>{1.0}, 2), InvalidArgument);
  }
}

TEST_CASE("learning-rate schedule and config validation") {
  TrainConfig t;
  CHECK(t.lr_at(0) == 1e-3);
  CHECK(t.lr_at(499) == 1e-3);
  CHECK(t.lr_at(500) == doctest::Approx(9e-4));
  CHECK(t.lr_at(1000) == doctest::Approx(8.1e-4));
  CHECK(t.batch == 64);
  t.k_avg = t.n_dirs + 1;
  CHECK_THROWS_AS(t.validate(), InvalidArgument);
  t = {};
  t.positive_fraction = 1.5;
  CHECK_THROWS_AS(t.validate(), InvalidArgument);
}

TEST_CASE("training is deterministic and honours its stop rules") {
  const Dataset d = small_dataset(TaskType::Pick, 30, 8);
  REQUIRE(d.positives() > 0);
  TrainConfig cfg = tiny_train();
  cfg.seed = 8;
  std::vector<std::string> lines;
  TrainResult a = train(d, tiny_config(), cfg, [&](const LogEntry& e) { lines.push_back(to_json_line(e)); });
  TrainResult b = train(d, tiny_config(), cfg);
  CHECK(same_weights(a.weights, b.weights));
  REQUIRE(a.log.size() == 6);
  CHECK(lines.size() == 6);
  const auto j = nlohmann::json::parse(lines.front());
  CHECK(j["stage"] == 1);
  CHECK(j["step"] == 0);
  CHECK(j.contains("scoring"));
  CHECK(nlohmann::json::parse(lines.back())["stage"] == 2);

  // Stage 2 leaves stage-1 heads alone; stage 1 leaves the affordance head alone.
  ModelWeights init = make_model(tiny_config(), {8, 0x1417});
  TrainResult s1 = train_stage1(d, init, cfg);
  CHECK(same_weights(s1.weights, init, ParamGroup::Affordance));
  TrainResult s2 = train_stage2(d, s1.weights, cfg);
  CHECK(same_weights(s2.weights, s1.weights, ParamGroup::Stage1));
  CHECK(!same_weights(s2.weights, s1.weights, ParamGroup::Affordance));

  cfg.decay = 0.1;
  cfg.decay_every = 1;
  cfg.stage1_steps = 50;
  cfg.lr_floor = 2e-6;  // 1e-3, 1e-4, 1e-5 run; 1e-6 stops
  CHECK(train_stage1(d, init, cfg).log.size() == 3);
}

TEST_CASE("training rejects degenerate datasets") {
  Dataset d = small_dataset(TaskType::Push, 20, 9);
  const TrainConfig cfg = tiny_train();
  Dataset none = d;
  none.records.erase(std::remove_if(none.records.begin(), none.records.end(),
                                    [](const InteractionRecord& r) { return r.positive(); }),
                     none.records.end());
  for (auto& r : none.records) r.context.clear();
  CHECK_THROWS_AS(train(none, tiny_config(), cfg), TrainingDegenerate);
  Dataset empty = d;
  empty.records.clear();
  CHECK_THROWS_AS(train(empty, tiny_config(), cfg), InvalidArgument);
}

TEST_CASE("adapt_update") {
  const Dataset offline = small_dataset(TaskType::Screw, 30, 10);
  const Dataset online_data = small_dataset(TaskType::Screw, 4, 11);
  ModelWeights w = make_model(tiny_config(), {10, 1});
  const ModelWeights before = w;
  const FeatureCache offline_cache = build_feature_cache(w, offline);
  const OnlineStore online{online_data, build_feature_cache(w, online_data)};
  TrainConfig cfg = tiny_train();
  cfg.adapt_online = 32;
  cfg.adapt_offline = 32;

  AdaptStats stats;
  ModelWeights out = adapt_update(w, online, offline, offline_cache, cfg, {10, 2}, &stats);
  CHECK(stats.steps == 3);
  CHECK(stats.online_per_step == std::vector<int>{32, 32, 32});
  CHECK(stats.offline_per_step == std::vector<int>{32, 32, 32});
  ModelWeights copy = before;
  CHECK(same_weights(w, copy));  // input untouched
  CHECK(!same_weights(out, copy, ParamGroup::Adapt));
  CHECK(same_weights(out, copy, ParamGroup::Affordance));
  // Cloud encoders of every head stay fixed.
  const nn::ParamList po = model_params(out, ParamGroup::All), pc = model_params(copy, ParamGroup::All);
  for (std::size_t i = 0; i < po.size(); ++i)
    if (po[i].name.find(".enc.sa") != std::string::npos || po[i].name.find(".enc.fp") != std::string::npos)
      CHECK(*po[i].value == *pc[i].value);

  cfg.adapt_lr = 0.0;
  ModelWeights frozen = adapt_update(w, online, offline, offline_cache, cfg, {10, 2});
  CHECK(same_weights(frozen, copy));

  const Dataset empty_offline{offline.manifest, offline.scenes, {}};
  CHECK_THROWS_AS(adapt_update(w, online, empty_offline, FeatureCache{}, cfg, {10, 2}), InvalidState);
  const OnlineStore empty_online{Dataset{online_data.manifest, online_data.scenes, {}}, {}};
  CHECK_THROWS_AS(adapt_update(w, empty_online, offline, offline_cache, cfg, {10, 2}), InvalidArgument);
}

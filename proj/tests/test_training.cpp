#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <functional>

#include "crossdiff/errors.hpp"
#include "crossdiff/synthdata.hpp"
#include "crossdiff/training.hpp"

using namespace crossdiff;

namespace {

Mat random_mat(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (double& v : m.data) v = scale * rng.next_gaussian();
  return m;
}

struct Instance {
  CrosscoderModel model;
  Mat xa, xb;
  std::vector<int32_t> dead;
  double alpha = 0.0;
  int64_t k_aux = 4;
  int64_t k_eff = 2;
};

Instance make_instance(Arch arch, uint64_t seed, bool with_dead) {
  Rng rng(seed);
  const int64_t d_a = 4 + static_cast<int64_t>(rng.next_u64() % 5);  // 4..8
  const int64_t d_b = arch == Arch::DSF ? d_a : 4 + static_cast<int64_t>(rng.next_u64() % 5);
  const int64_t M = 8 + static_cast<int64_t>(rng.next_u64() % 9);  // 8..16
  const int64_t batch = 2 + static_cast<int64_t>(rng.next_u64() % 3);

  Instance in;
  PartitionLayout layout = PartitionLayout::standard(M);
  std::optional<DsfDesignated> dsf;
  if (arch == Arch::DFC) layout = PartitionLayout::dfc(M, 2, 2);
  if (arch == Arch::DSF) dsf = DsfDesignated{{0, 2}, 2.0};
  in.model = init_model(arch, d_a, d_b, M, 4, layout, 0.4, seed, dsf);
  // Random biases so their gradients are exercised away from zero.
  for (double& v : in.model.b_enc) v = 0.05 * rng.next_gaussian();
  for (double& v : in.model.b_dec_a) v = 0.05 * rng.next_gaussian();
  for (double& v : in.model.b_dec_b) v = 0.05 * rng.next_gaussian();
  in.xa = random_mat(batch, d_a, rng);
  in.xb = random_mat(batch, d_b, rng);
  in.k_eff = 2;
  if (with_dead) {
    in.alpha = 0.03;
    for (int64_t j = 0; j < M; j += 3) in.dead.push_back(static_cast<int32_t>(j));
  }
  return in;
}

// Central finite differences of the frozen-mask loss; the straight-through
// convention makes it a smooth function of every parameter.
double fd_grad(const Instance& in, const FrozenMasks& masks, std::vector<double>& theta,
               size_t idx, std::vector<double>* theta_mirror, size_t idx_mirror) {
  const double h = 1e-3;
  const double saved = theta[idx];
  const double saved_m = theta_mirror ? (*theta_mirror)[idx_mirror] : 0.0;
  auto eval = [&](double delta) {
    theta[idx] = saved + delta;
    if (theta_mirror) (*theta_mirror)[idx_mirror] = saved_m + delta;
    const LossParts lp =
        loss_with_masks(in.model, in.xa, in.xb, in.dead, in.alpha, in.k_aux, masks);
    return lp.total;
  };
  const double up = eval(h);
  const double down = eval(-h);
  theta[idx] = saved;
  if (theta_mirror) (*theta_mirror)[idx_mirror] = saved_m;
  return (up - down) / (2.0 * h);
}

double rel_err(double a, double b) {
  const double denom = std::max(std::abs(a), std::abs(b));
  if (denom < 1e-8) return 0.0;
  return std::abs(a - b) / denom;
}

// Checks every parameter entry of one instance.
void check_instance(Instance& in) {
  const StepResult sr =
      loss_and_grads(in.model, in.xa, in.xb, in.dead, in.alpha, in.k_aux, in.k_eff);
  REQUIRE(sr.acts.nnz() > 0);
  const FrozenMasks masks{sr.acts, sr.aux_acts};

  const bool dsf = in.model.arch == Arch::DSF;
  const IndexRange tied = dsf ? in.model.dsf_designated->range : IndexRange{0, 0};

  struct View {
    std::vector<double>* theta;
    const std::vector<double>* grad;
  };
  CrosscoderModel& m = in.model;
  const ParamTensors& g = sr.grads;
  std::vector<std::pair<View, const char*>> views = {
      {{&m.w_enc_a.data, &g.w_enc_a.data}, "w_enc_a"},
      {{&m.w_enc_b.data, &g.w_enc_b.data}, "w_enc_b"},
      {{&m.b_enc, &g.b_enc}, "b_enc"},
      {{&m.b_dec_a, &g.b_dec_a}, "b_dec_a"},
      {{&m.b_dec_b, &g.b_dec_b}, "b_dec_b"},
  };
  for (auto& [view, name] : views) {
    for (size_t idx = 0; idx < view.theta->size(); ++idx) {
      const double fd = fd_grad(in, masks, *view.theta, idx, nullptr, 0);
      const double err = rel_err(fd, (*view.grad)[idx]);
      CAPTURE(name);
      CAPTURE(idx);
      CHECK(err < 1e-4);
    }
  }

  // Decoders: DSF designated rows are a single tied parameter, so both copies
  // are perturbed together and compared against the summed gradient.
  for (int64_t j = 0; j < m.dict_size; ++j) {
    const bool is_tied = dsf && tied.contains(j);
    for (int64_t i = 0; i < m.d_a; ++i) {
      const size_t idx = static_cast<size_t>(j * m.d_a + i);
      const double fd =
          is_tied ? fd_grad(in, masks, m.w_dec_a.data, idx, &m.w_dec_b.data, idx)
                  : fd_grad(in, masks, m.w_dec_a.data, idx, nullptr, 0);
      const double analytic =
          is_tied ? g.w_dec_a.data[idx] + g.w_dec_b.data[idx] : g.w_dec_a.data[idx];
      CAPTURE(j);
      CAPTURE(i);
      CHECK(rel_err(fd, analytic) < 1e-4);
    }
  }
  for (int64_t j = 0; j < m.dict_size; ++j) {
    if (dsf && tied.contains(j)) continue;  // covered above
    for (int64_t i = 0; i < m.d_b; ++i) {
      const size_t idx = static_cast<size_t>(j * m.d_b + i);
      const double fd = fd_grad(in, masks, m.w_dec_b.data, idx, nullptr, 0);
      CAPTURE(j);
      CAPTURE(i);
      CHECK(rel_err(fd, g.w_dec_b.data[idx]) < 1e-4);
    }
  }
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
  int count = 0;
  for (Arch arch : {Arch::Standard, Arch::DFC, Arch::DSF}) {
    for (uint64_t seed = 1; seed <= 4; ++seed) {
      for (bool with_dead : {false, true}) {
        CAPTURE(static_cast<int>(arch));
        CAPTURE(seed);
        CAPTURE(with_dead);
        Instance in = make_instance(arch, seed * 131 + static_cast<uint64_t>(arch), with_dead);
        check_instance(in);
        ++count;
      }
    }
  }
  CHECK(count == 24);
}

TEST_CASE("frozen masks reproduce the unfrozen loss at the same parameters") {
  Instance in = make_instance(Arch::DFC, 77, true);
  const StepResult sr =
      loss_and_grads(in.model, in.xa, in.xb, in.dead, in.alpha, in.k_aux, in.k_eff);
  const FrozenMasks masks{sr.acts, sr.aux_acts};
  const LossParts lp = loss_with_masks(in.model, in.xa, in.xb, in.dead, in.alpha, in.k_aux, masks);
  CHECK(lp.total == doctest::Approx(sr.loss.total).epsilon(1e-12));
  CHECK(lp.aux == doctest::Approx(sr.loss.aux).epsilon(1e-12));
}

TEST_CASE("warmup ramps linearly from zero") {
  CHECK(warmup_lr(1e-4, 0, 1000) == 0.0);
  CHECK(warmup_lr(1e-4, 500, 1000) == doctest::Approx(5e-5));
  CHECK(warmup_lr(1e-4, 1000, 1000) == 1e-4);
  CHECK(warmup_lr(1e-4, 5000, 1000) == 1e-4);
  double prev = -1.0;
  for (int64_t s = 0; s < 1200; ++s) {
    const double lr = warmup_lr(1e-4, s, 1000);
    CHECK(lr >= prev);
    prev = lr;
  }
}

TEST_CASE("sparsity anneal hits the documented midpoint") {
  CHECK(anneal_k(1000, 200, 0, 5000) == 1000);
  CHECK(anneal_k(1000, 200, 2500, 5000) == 600);
  CHECK(anneal_k(1000, 200, 5000, 5000) == 200);
  CHECK(anneal_k(1000, 200, 99999, 5000) == 200);
  CHECK(anneal_k(1000, 200, 123, 0) == 200);
  int64_t prev = 1000;
  for (int64_t s = 0; s <= 5000; ++s) {
    const int64_t k = anneal_k(1000, 200, s, 5000);
    CHECK(k <= prev);
    prev = k;
  }
}

TEST_CASE("normalization scale targets sqrt((d_a + d_b) / 2)") {
  {
    ActivationPairBatch b;
    b.x_a = Mat(3, 4);
    b.x_b = Mat(3, 4);
    for (int64_t r = 0; r < 3; ++r) {
      b.x_a.at(r, 0) = 2.0;
      b.x_b.at(r, 1) = 2.0;
    }
    const auto [sa, sb] = compute_normalization(b, 4, 4);
    CHECK(sa == doctest::Approx(1.0));
    CHECK(sb == doctest::Approx(1.0));
  }
  {
    // Median is robust to the outlier row.
    ActivationPairBatch b;
    b.x_a = Mat(3, 4);
    b.x_b = Mat(3, 4);
    b.x_a.at(0, 0) = 1.0;
    b.x_a.at(1, 0) = 2.0;
    b.x_a.at(2, 0) = 100.0;
    for (int64_t r = 0; r < 3; ++r) b.x_b.at(r, 0) = 2.0;
    const auto [sa, sb] = compute_normalization(b, 4, 4);
    CHECK(sa == doctest::Approx(2.0 / 2.0));
  }
  {
    // Mixed dimensions: the target is sqrt((4096 + 2880) / 2).
    ActivationPairBatch b;
    b.x_a = Mat(1, 8);
    b.x_b = Mat(1, 8);
    b.x_a.at(0, 0) = 1.0;
    b.x_b.at(0, 0) = 1.0;
    const auto [sa, sb] = compute_normalization(b, 4096, 2880);
    CHECK(sa == doctest::Approx(std::sqrt(3488.0)));
    CHECK(sb == doctest::Approx(std::sqrt(3488.0)));
  }
  {
    ActivationPairBatch b;
    b.x_a = Mat(2, 4);
    b.x_b = Mat(2, 4);
    CHECK_THROWS_AS(compute_normalization(b, 4, 4), numeric_error);
  }
}

TEST_CASE("outlier masking drops rows beyond factor times the median norm") {
  ActivationPairBatch b;
  b.x_a = Mat(5, 2);
  b.x_b = Mat(5, 2);
  for (int64_t r = 0; r < 5; ++r) {
    b.x_a.at(r, 0) = 1.0;
    b.x_b.at(r, 0) = 1.0;
  }
  CHECK(mask_outliers(b, 2.0) == std::vector<uint8_t>{1, 1, 1, 1, 1});
  b.x_a.at(3, 0) = 10.0;  // 10x the median in model A
  CHECK(mask_outliers(b, 2.0) == std::vector<uint8_t>{1, 1, 1, 0, 1});
  CHECK(mask_outliers(b, std::numeric_limits<double>::infinity()) ==
        std::vector<uint8_t>{1, 1, 1, 1, 1});
  CHECK_THROWS_AS(mask_outliers(b, 1.0), config_error);
}

TEST_CASE("dead window arithmetic at paper scale") {
  CrosscoderModel m =
      init_model(Arch::Standard, 4, 4, 3, 1, PartitionLayout::standard(3), 0.4, 1);
  TrainState st = TrainState::init(m);
  st.tokens_since_fire[0] = 4882 * 2048;  // one step short of the 10M window
  st.tokens_since_fire[1] = 4883 * 2048;
  const auto dead = dead_features(st, 10000000);
  CHECK(dead == std::vector<int32_t>{1});
}

namespace {

class FixedBatchSource final : public BatchSource {
public:
  explicit FixedBatchSource(ActivationPairBatch b) : batch_(std::move(b)) {}
  ActivationPairBatch next() override { return batch_; }
  int64_t d_a() const override { return batch_.x_a.cols; }
  int64_t d_b() const override { return batch_.x_b.cols; }

private:
  ActivationPairBatch batch_;
};

TrainConfig small_train_cfg() {
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.steps = 400;
  cfg.warmup_steps = 20;
  cfg.batch = 32;
  cfg.k_final = 4;
  cfg.k_initial = 8;
  cfg.anneal_steps = 50;
  cfg.alpha_aux = 0.03;
  cfg.k_aux = 16;
  cfg.dead_window_tokens = 50 * 32;
  cfg.calibration_batches = 2;
  return cfg;
}

ToyConfig tiny_toy() {
  ToyConfig c;
  c.n_concepts = 32;
  c.d_act = 16;
  c.r_exclusive = 0.2;
  c.corr_rank = 4;
  c.sigma_noise = 0.01;
  return c;
}

}  // namespace

TEST_CASE("a one-row batch is memorized to near-zero loss") {
  const ConceptBank bank = build_concept_bank(tiny_toy(), 5);
  const auto row = sample_batch(bank, 1, 0.0, {99, 0}, true);
  FixedBatchSource stream(row);
  CrosscoderModel model =
      init_model(Arch::Standard, 16, 16, 8, 4, PartitionLayout::standard(8), 0.4, 6);
  TrainConfig cfg = small_train_cfg();
  cfg.batch = 1;
  cfg.steps = 2500;
  cfg.k_initial = 4;
  cfg.anneal_steps = 0;
  cfg.dead_window_tokens = 1 << 30;
  const TrainResult tr = train(model, stream, cfg);
  const MetricsRecord& last = tr.metrics.back();
  CHECK(last.loss_recon_a + last.loss_recon_b < 1e-4);
}

TEST_CASE("reconstruction loss trends down on the toy stream") {
  const ConceptBank bank = build_concept_bank(tiny_toy(), 7);
  ToyBatchSource stream(bank, 32, 0.01, derive_seed(7, SeedDomain::DataStream));
  CrosscoderModel model =
      init_model(Arch::Standard, 16, 16, 32, 4, PartitionLayout::standard(32), 0.4, 8);
  TrainConfig cfg = small_train_cfg();
  cfg.steps = 800;
  const TrainResult tr = train(model, stream, cfg);
  auto avg = [&](int64_t from, int64_t to) {
    double s = 0.0;
    for (int64_t i = from; i < to; ++i) {
      s += tr.metrics[i].loss_recon_a + tr.metrics[i].loss_recon_b;
    }
    return s / static_cast<double>(to - from);
  };
  CHECK(avg(700, 800) < avg(0, 100));
}

TEST_CASE("DFC structural zeros survive every optimizer step") {
  const ConceptBank bank = build_concept_bank(tiny_toy(), 9);
  ToyBatchSource stream(bank, 32, 0.01, derive_seed(9, SeedDomain::DataStream));
  CrosscoderModel model =
      init_model(Arch::DFC, 16, 16, 32, 4, PartitionLayout::dfc(32, 3, 3), 0.4, 10);
  TrainConfig cfg = small_train_cfg();
  cfg.steps = 200;
  cfg.checkpoint_every = 1;
  int64_t checks = 0;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int64_t, const CrosscoderModel& m, const TrainState&) {
    for (int64_t j = m.layout.a_exclusive.begin; j < m.layout.a_exclusive.end; ++j) {
      for (int64_t i = 0; i < m.d_b; ++i) REQUIRE(m.w_dec_b.at(j, i) == 0.0);
    }
    for (int64_t j = m.layout.b_exclusive.begin; j < m.layout.b_exclusive.end; ++j) {
      for (int64_t i = 0; i < m.d_a; ++i) REQUIRE(m.w_dec_a.at(j, i) == 0.0);
    }
    ++checks;
  };
  train(model, stream, cfg, hooks);
  CHECK(checks == 200);
}

TEST_CASE("DSF tied decoder rows stay bit-identical through training") {
  const ConceptBank bank = build_concept_bank(tiny_toy(), 11);
  ToyBatchSource stream(bank, 32, 0.01, derive_seed(11, SeedDomain::DataStream));
  CrosscoderModel model = init_model(Arch::DSF, 16, 16, 32, 4, PartitionLayout::standard(32), 0.4,
                                     12, DsfDesignated{{0, 3}, 2.0});
  TrainConfig cfg = small_train_cfg();
  cfg.steps = 200;
  cfg.checkpoint_every = 1;
  int64_t checks = 0;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int64_t, const CrosscoderModel& m, const TrainState&) {
    for (int64_t j = 0; j < 3; ++j) {
      for (int64_t i = 0; i < m.d_a; ++i) REQUIRE(m.w_dec_a.at(j, i) == m.w_dec_b.at(j, i));
    }
    ++checks;
  };
  train(model, stream, cfg, hooks);
  CHECK(checks == 200);
}

TEST_CASE("auxiliary loss reduces the final dead fraction") {
  int improved = 0;
  for (uint64_t seed : {21, 22, 23}) {
    ToyConfig toy = tiny_toy();
    const ConceptBank bank = build_concept_bank(toy, seed);
    auto run = [&](double alpha) {
      ToyBatchSource stream(bank, 64, 0.01, derive_seed(seed, SeedDomain::DataStream));
      CrosscoderModel model = init_model(Arch::Standard, 16, 16, 64, 4,
                                         PartitionLayout::standard(64), 0.4, seed + 1);
      TrainConfig cfg = small_train_cfg();
      cfg.batch = 64;
      cfg.steps = 1000;
      cfg.alpha_aux = alpha;
      cfg.dead_window_tokens = 50 * 64;
      CrosscoderModel trained = model;
      const TrainResult tr = train(trained, stream, cfg);
      return static_cast<double>(dead_features(tr.state, cfg.dead_window_tokens).size()) / 64.0;
    };
    const double with_aux = run(0.03);
    const double without = run(0.0);
    CAPTURE(seed);
    CHECK(with_aux <= without);
    improved += with_aux <= without;
  }
  CHECK(improved == 3);
}

TEST_CASE("training is deterministic and thread-count independent") {
  const ConceptBank bank = build_concept_bank(tiny_toy(), 13);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    ToyBatchSource stream(bank, 32, 0.01, derive_seed(13, SeedDomain::DataStream));
    CrosscoderModel model =
        init_model(Arch::DFC, 16, 16, 32, 4, PartitionLayout::dfc(32, 3, 3), 0.4, 14);
    TrainConfig cfg = small_train_cfg();
    cfg.steps = 150;
    train(model, stream, cfg);
    return model;
  };
  const CrosscoderModel a = run(2);
  const CrosscoderModel b = run(2);
  CHECK(a.w_dec_a.data == b.w_dec_a.data);
  CHECK(a.w_enc_b.data == b.w_enc_b.data);
  const CrosscoderModel c = run(1);
  omp_set_num_threads(2);
  CHECK(a.w_dec_a.data == c.w_dec_a.data);
  CHECK(a.w_enc_a.data == c.w_enc_a.data);
  CHECK(a.b_enc == c.b_enc);
}

TEST_CASE("non-finite inputs abort with step diagnostics") {
  const ConceptBank bank = build_concept_bank(tiny_toy(), 15);
  ActivationPairBatch bad = sample_batch(bank, 8, 0.0, {1, 0});
  bad.x_a.at(0, 0) = std::numeric_limits<double>::infinity();
  FixedBatchSource stream(bad);
  CrosscoderModel model =
      init_model(Arch::Standard, 16, 16, 8, 4, PartitionLayout::standard(8), 0.4, 16);
  TrainConfig cfg = small_train_cfg();
  cfg.batch = 8;
  cfg.steps = 3;
  cfg.anneal_steps = 0;
  // An infinite norm beats any finite outlier cut only when factor is finite;
  // with factor = inf the row stays in and the loss must abort.
  cfg.outlier_factor = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(train(model, stream, cfg), doctest::Contains("step"), numeric_error);
}

TEST_CASE("non-finite auxiliary loss is zeroed for the step") {
  Instance in = make_instance(Arch::Standard, 101, true);
  // Main selection: one modest feature. Aux selection: a dead feature whose
  // encoder is blown up so the aux reconstruction overflows.
  const int32_t dead_j = in.dead[0];
  for (int64_t i = 0; i < in.model.d_a; ++i) {
    in.model.w_enc_a.at(dead_j, i) = 1e160;
    in.model.w_dec_a.at(dead_j, i) = 1e160;
  }
  FrozenMasks masks;
  masks.main.init_empty(in.xa.rows, in.model.dict_size);
  for (int64_t r = 0; r < in.xa.rows; ++r) {
    masks.main.col.push_back(5);
    masks.main.val.push_back(0.0);
    masks.main.row_ptr[r + 1] = masks.main.nnz();
  }
  masks.aux.init_empty(in.xa.rows, in.model.dict_size);
  for (int64_t r = 0; r < in.xa.rows; ++r) {
    masks.aux.col.push_back(dead_j);
    masks.aux.val.push_back(0.0);
    masks.aux.row_ptr[r + 1] = masks.aux.nnz();
  }
  const StepResult sr =
      loss_and_grads(in.model, in.xa, in.xb, in.dead, in.alpha, in.k_aux, 1, &masks);
  CHECK(sr.loss.aux == 0.0);
  CHECK(std::isfinite(sr.loss.total));
  for (double g : sr.grads.w_enc_b.data) CHECK(std::isfinite(g));
}

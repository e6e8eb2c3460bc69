#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "xkt/commands.hpp"
#include "xkt/errors.hpp"
#include "xkt/gradcheck.hpp"
#include "xkt/model.hpp"
#include "xkt/ops.hpp"

using namespace xkt;
using namespace xkt::model;

namespace {

void set_all(Tensor t, real v) {
  for (auto& x : t.mutable_data()) x = v;
}

Tensor random_const(Shape shape, std::mt19937_64& rng, double bound = 1.0) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

void perturb(KtModel& m, std::uint64_t seed, double bound = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto t : m.parameters().tensors()) {
    for (auto& v : t.mutable_data()) v += dist(rng);
  }
}

// Three students over concepts 0..4 only; the vocabulary has 10 concepts
// and 12 questions.
data::Dataset small_dataset() {
  data::Dataset ds;
  for (int q = 0; q < 12; ++q) ds.questions.push_back(std::to_string(q));
  for (int c = 0; c < 10; ++c) ds.concepts.push_back(std::to_string(c));
  std::mt19937_64 rng(7);
  for (int s = 0; s < 3; ++s) {
    data::StudentSequence seq;
    seq.student = "s" + std::to_string(s);
    for (int t = 0; t < 6 + 2 * s; ++t) {
      int c = static_cast<int>(rng() % 5);
      seq.steps.push_back({c + 5 * static_cast<int>(rng() % 2), c, static_cast<int>(rng() % 2), t});
    }
    ds.students.push_back(seq);
  }
  return ds;
}

data::SequenceBatch small_batch(const data::Dataset& ds) {
  return data::window_pad_batch(ds, {0, 1, 2}, 10, 8, 0, false).front();
}

ModelConfig small_config(std::size_t dim = 6) {
  ModelConfig c;
  c.questions = 12;
  c.concepts = 10;
  c.dim = dim;
  c.dropout = 0.0;
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(double(a.data()[i] - b.data()[i])));
  return m;
}

}  // namespace

#ifndef XKT_FLOAT32

TEST_CASE("rasch embedding") {
  SUBCASE("zero difficulty leaves the concept embedding") {
    std::mt19937_64 rng(1);
    Dkt2Model m(small_config(), rng);
    const auto& t = m.rasch();
    std::vector<int> q{3, 7}, c{1, 4}, r{1, 0};
    auto out = rasch_embed(t, q, c, r);
    auto ec = embedding(t.e_c, c);
    auto er = embedding(t.e_r, r);
    CHECK(bit_equal(out.Q, ec));
    CHECK(max_abs_diff(out.S, ec + er) == 0.0);
    for (real v : out.dq.data()) CHECK(v == 0.0);
  }
  SUBCASE("d=2 hand example") {
    RaschTable t{Tensor::constant({1, 2}, {1, 0}), Tensor::zeros({2, 2}), Tensor::constant({1, 2}, {0, 1}),
                 Tensor::zeros({2, 2}), Tensor::constant({1, 1}, {0.5})};
    std::vector<int> zero{0};
    auto out = rasch_embed(t, zero, zero, zero);
    CHECK(out.Q.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.Q.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("unknown ids") {
    std::mt19937_64 rng(1);
    Dkt2Model m(small_config(), rng);
    std::vector<int> bad{12}, ok{0};
    CHECK_THROWS_AS(rasch_embed(m.rasch(), bad, ok, ok), VocabularyError);
    CHECK_THROWS_AS(rasch_embed(m.rasch(), ok, bad, ok), VocabularyError);
  }
}

TEST_CASE("table and head shapes") {
  std::mt19937_64 rng(2);
  auto cfg = small_config(5);
  Dkt2Model m(cfg, rng);
  CHECK(m.rasch().e_c.shape() == Shape{10, 5});
  CHECK(m.rasch().mu_c.shape() == Shape{10, 5});
  CHECK(m.rasch().e_r.shape() == Shape{2, 5});
  CHECK(m.rasch().d_q.shape() == Shape{12, 1});
  CHECK(m.head().w1.shape() == Shape{20, 10});
  CHECK(m.head().w2.shape() == Shape{10, 10});
  cfg.ablation.no_ikf = true;
  Dkt2Model slim(cfg, rng);
  CHECK(slim.head().w1.shape() == Shape{10, 10});
}

TEST_CASE("encoder with zero cells is the identity") {
  std::mt19937_64 rng(3);
  Dkt2Model m(small_config(4), rng);
  for (auto t : m.encoder().slstm.tensors()) set_all(t, 0);
  for (auto t : m.encoder().mlstm.tensors()) set_all(t, 0);
  auto S = random_const({2, 5, 4}, rng);
  CHECK(bit_equal(xlstm_encode(m.encoder(), S, m.encoder_options()), S));
}

TEST_CASE("single-step encoder equals the cells applied once inside residuals") {
  std::mt19937_64 rng(4);
  Dkt2Model m(small_config(4), rng);
  perturb(m, 5);
  const auto& p = m.encoder();
  auto S = random_const({2, 1, 4}, rng);
  auto x = reshape(S, {2, 4});
  auto s = cells::slstm_step(p.slstm, layer_norm(x, p.ln1_gain, p.ln1_bias, kLayerNormEps),
                             cells::SLstmState::zeros(2, 4), cells::ForgetActivation::kExp);
  auto u = x + s.h;
  auto mm = cells::mlstm_step(p.mlstm, layer_norm(u, p.ln2_gain, p.ln2_bias, kLayerNormEps),
                              cells::MLstmState::zeros(2, 4), cells::ForgetActivation::kSigmoid);
  auto expected = u + mm.h;
  CHECK(max_abs_diff(reshape(xlstm_encode(p, S, m.encoder_options()), {2, 4}), expected) < 1e-12);
}

TEST_CASE("encoder gradient of sum(A)") {
  std::mt19937_64 rng(6);
  Dkt2Model m(small_config(3), rng);
  perturb(m, 7, 0.3);
  auto S = random_const({2, 4, 3}, rng);
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& name = m.parameters().names()[i];
    if (name.rfind("ln", 0) == 0 || name.rfind("slstm", 0) == 0 || name.rfind("mlstm", 0) == 0) {
      params.push_back(m.parameters().tensors()[i]);
    }
  }
  CHECK(params.size() > 20);
  for (bool parallel : {true, false}) {
    auto opt = m.encoder_options();
    opt.mlstm_parallel = parallel;
    auto r = finite_diff_check([&] { return sum(xlstm_encode(m.encoder(), S, opt)); }, params, 1e-5);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("irt decomposition") {
  auto A = Tensor::constant({1, 2}, {2, 2});
  auto dq = Tensor::constant({1, 1}, {0.5});
  SUBCASE("hand example with r = 1") {
    auto d = irt_decompose(A, dq, Tensor::constant({1, 1}, {1}));
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(d.K.data()[j] == doctest::Approx(1.5).epsilon(1e-12));
      CHECK(d.K_plus.data()[j] == doctest::Approx(1.5).epsilon(1e-12));
      CHECK(d.K_minus.data()[j] == 0.0);
    }
  }
  SUBCASE("r = 0 routes everything to K-") {
    auto d = irt_decompose(A, dq, Tensor::constant({1, 1}, {0}));
    CHECK(bit_equal(d.K_minus, d.K));
    for (real v : d.K_plus.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("fusion head") {
  std::mt19937_64 rng(8);
  Dkt2Model m(small_config(3), rng);
  auto& h = m.mutable_head();
  for (auto t : {h.w1, h.b1, h.w2, h.b2}) set_all(t, 0);
  std::vector<Tensor> parts{random_const({4, 3}, rng), random_const({4, 3}, rng), random_const({4, 3}, rng),
                            random_const({4, 3}, rng)};
  auto ks = fuse_predict(h, parts, 0.0, false, nullptr);
  CHECK(ks.shape() == Shape{4, 10});
  for (real v : ks.data()) CHECK(v == 0.5);
  set_all(h.b2, 20);
  ks = fuse_predict(h, parts, 0.0, false, nullptr);
  for (real v : ks.data()) CHECK(std::fabs(v - 1.0) < 1e-8);
  parts.pop_back();
  CHECK_THROWS_AS(fuse_predict(h, parts, 0.0, false, nullptr), DimensionError);
}

TEST_CASE("zero head predicts one half everywhere") {
  auto ds = small_dataset();
  std::mt19937_64 rng(9);
  Dkt2Model m(small_config(), rng);
  perturb(m, 10);
  for (auto t : {m.mutable_head().w2, m.mutable_head().b2}) set_all(t, 0);
  auto fwd = m.forward(small_batch(ds), {});
  for (real v : fwd.predictions.data()) CHECK(v == 0.5);
}

TEST_CASE("knowledge states are probabilities and predictions gather them") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  for (auto kind : {Kind::kDkt2, Kind::kDkt}) {
    auto cfg = small_config();
    cfg.kind = kind;
    auto m = make_model(cfg, 11);
    perturb(*m, 12);
    auto fwd = m->forward(batch, {});
    std::size_t rows = batch.batch * (batch.length - 1);
    CHECK(fwd.knowledge_state.shape() == Shape{rows, 10});
    for (real v : fwd.knowledge_state.data()) CHECK((v > 0 && v < 1));
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (std::size_t t = 0; t + 1 < batch.length; ++t) {
        std::size_t row = b * (batch.length - 1) + t;
        auto idx = batch.at(b, t + 1);
        CHECK(fwd.weights[row] == batch.mask[idx]);
        if (!batch.mask[idx]) continue;
        CHECK(fwd.labels[row] == batch.response[idx]);
        CHECK(fwd.predictions.data()[row] == fwd.knowledge_state.data()[row * 10 + batch.concept_id[idx]]);
      }
    }
  }
}

TEST_CASE("future responses never reach earlier predictions") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  for (int variant = 0; variant < 4; ++variant) {
    auto cfg = small_config();
    cfg.kind = variant == 3 ? Kind::kDkt : Kind::kDkt2;
    cfg.mlstm_parallel = variant != 1;
    cfg.slstm_forget = variant == 2 ? cells::ForgetActivation::kSigmoid : cells::ForgetActivation::kExp;
    CAPTURE(variant);
    auto m = make_model(cfg, 13);
    perturb(*m, 14);
    auto ref = m->forward(batch, {}).predictions;
    for (std::size_t i = 1; i < batch.length; ++i) {
      auto mutated = batch;
      for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t j = i; j < batch.length; ++j) mutated.response[batch.at(b, j)] ^= 1;
      }
      auto got = m->forward(mutated, {}).predictions;
      for (std::size_t b = 0; b < batch.batch; ++b) {
        std::size_t row = b * (batch.length - 1) + (i - 1);
        CHECK(got.data()[row] == ref.data()[row]);
      }
    }
  }
}

TEST_CASE("swapping embeddings of unused concepts leaves predictions unchanged") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  std::mt19937_64 rng(15);
  Dkt2Model m(small_config(), rng);
  perturb(m, 16);
  auto ref = m.forward(batch, {}).predictions;
  for (auto t : {m.rasch().e_c, m.rasch().mu_c}) {
    auto v = t.mutable_data();
    std::size_t d = t.dim(1);
    for (std::size_t j = 0; j < d; ++j) std::swap(v[7 * d + j], v[8 * d + j]);
  }
  CHECK(bit_equal(m.forward(batch, {}).predictions, ref));
}

TEST_CASE("hidden next question reads out from the zero embedding") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  std::mt19937_64 rng(17);
  Dkt2Model m(small_config(), rng);
  perturb(m, 18);
  auto know = m.knowledge(batch, {});
  auto rows = reshape(slice(know, 1, 2, 1), {3, know.dim(2)});
  std::vector<int> hidden{-1, -1, -1}, c1{0, 1, 2}, c2{4, 3, 3};
  // The concept only selects the gathered entry, not the state.
  CHECK(bit_equal(m.readout(rows, hidden, c1, {}), m.readout(rows, hidden, c2, {})));
  std::vector<int> shown{0, 1, 2};
  CHECK_FALSE(bit_equal(m.readout(rows, hidden, c1, {}), m.readout(rows, shown, c1, {})));
}

TEST_CASE("dropout is active only in training mode") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  auto cfg = small_config();
  cfg.dropout = 0.5;
  auto m = make_model(cfg, 19);
  auto a = m->forward(batch, {}).predictions;
  CHECK(bit_equal(a, m->forward(batch, {}).predictions));
  std::mt19937_64 rng(20);
  CHECK_FALSE(bit_equal(a, m->forward(batch, {true, &rng}).predictions));
}

TEST_CASE("dkt baseline with a zero projection predicts one half") {
  auto ds = small_dataset();
  auto cfg = small_config();
  cfg.kind = Kind::kDkt;
  auto m = make_model(cfg, 21);
  set_all(m->parameters().get("dkt.out_w"), 0);
  set_all(m->parameters().get("dkt.out_b"), 0);
  auto fwd = m->forward(small_batch(ds), {});
  for (real v : fwd.predictions.data()) CHECK(v == 0.5);
}

TEST_CASE("ablation flags compose") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  for (unsigned mask = 0; mask < 32; ++mask) {
    CAPTURE(mask);
    auto cfg = small_config(4);
    cfg.ablation = {bool(mask & 1), bool(mask & 2), bool(mask & 4), bool(mask & 8), bool(mask & 16)};
    auto m = make_model(cfg, 22);
    const auto& names = m->parameters().names();
    auto has = [&](const std::string& prefix) {
      return std::any_of(names.begin(), names.end(), [&](const auto& n) { return n.rfind(prefix, 0) == 0; });
    };
    CHECK(has("rasch.d_q") == !cfg.ablation.no_rasch);
    CHECK(has("slstm.") == !cfg.ablation.no_slstm);
    CHECK(has("mlstm.") == !cfg.ablation.no_mlstm);
    auto fwd = m->forward(batch, {});
    for (real v : fwd.predictions.data()) CHECK((v > 0 && v < 1));
  }
}

TEST_CASE("end-to-end gradient checks") {
  RunConfig cfg;
  SUBCASE("dkt2 default") { CHECK(model_gradcheck(cfg).result.max_rel_error < 1e-4); }
  SUBCASE("dkt2 recurrent mlstm with exp forget gates") {
    cfg.mlstm_form = "recurrent";
    cfg.mlstm_forget = "exp";
    CHECK(model_gradcheck(cfg).result.max_rel_error < 1e-4);
  }
  SUBCASE("dkt2 every embedding and head ablation") {
    // Some gradients here are ~5e-8, where eps = 1e-5 differences hit round-off.
    cfg.gradcheck.eps = 1e-4;
    cfg.ablation = {true, true, true, false, false};
    CHECK(model_gradcheck(cfg).result.max_rel_error < 1e-4);
  }
  SUBCASE("dkt baseline on 2 students x 6 steps") {
    cfg.model = "dkt";
    cfg.gradcheck.steps = 6;
    auto r = model_gradcheck(cfg);
    CHECK(r.result.max_rel_error < 1e-4);
    CHECK(r.tensors == 15);
  }
}

TEST_CASE("checkpoint round trip is exact") {
  auto ds = small_dataset();
  auto batch = small_batch(ds);
  for (auto kind : {Kind::kDkt2, Kind::kDkt}) {
    auto cfg = small_config();
    cfg.kind = kind;
    cfg.ablation.no_ikf = kind == Kind::kDkt2;
    auto m = make_model(cfg, 23);
    perturb(*m, 24);
    Vocab vocab{ds.questions, ds.concepts};
    auto path = std::filesystem::temp_directory_path() / "xkt_test_checkpoint.json";
    save_checkpoint(path, *m, vocab, "abc", {{"note", 1}});
    auto back = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(back.config_hash == "abc");
    CHECK(back.extra.at("note") == 1);
    CHECK(back.vocab.concepts == ds.concepts);
    CHECK(back.model->config().ablation.no_ikf == cfg.ablation.no_ikf);
    REQUIRE(back.model->parameters().size() == m->parameters().size());
    for (std::size_t i = 0; i < m->parameters().size(); ++i) {
      CHECK(bit_equal(back.model->parameters().tensors()[i], m->parameters().tensors()[i]));
    }
    CHECK(bit_equal(back.model->forward(batch, {}).predictions, m->forward(batch, {}).predictions));
  }
}

TEST_CASE("malformed checkpoints are rejected") {
  CHECK_THROWS_AS(checkpoint_from_json({{"format", "other"}}), ParseError);
  auto m = make_model(small_config(), 25);
  auto j = checkpoint_json(*m, {}, "h");
  j["parameters"][0]["data"].erase(0);
  CHECK_THROWS_AS(checkpoint_from_json(j), ContractError);
}

#endif

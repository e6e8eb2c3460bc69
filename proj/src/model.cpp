#include "xkt/model.hpp"

#include <cmath>
#include <fstream>

#include "xkt/errors.hpp"
#include "xkt/ops.hpp"

namespace xkt::model {

namespace {

using cells::ForgetActivation;

Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<real>(dist(rng));
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor filled_param(Shape shape, real value) {
  return Tensor::parameter(shape, std::vector<real>(shape_numel(shape), value));
}

double fan_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

std::string forget_name(ForgetActivation f) { return f == ForgetActivation::kExp ? "exp" : "sigmoid"; }

ForgetActivation forget_from(const std::string& s) {
  if (s == "exp") return ForgetActivation::kExp;
  if (s == "sigmoid") return ForgetActivation::kSigmoid;
  throw ValueError("forget activation must be 'exp' or 'sigmoid', got '" + s + "'");
}

// Padded cells carry kPadId; they never reach a loss or metric, so any valid
// row serves as their embedding.
std::vector<int> valid_ids(std::span<const int> ids) {
  std::vector<int> out(ids.begin(), ids.end());
  for (auto& v : out) {
    if (v == data::kPadId) v = 0;
  }
  return out;
}

Tensor column(std::span<const int> values, std::size_t rows, std::size_t steps) {
  std::vector<real> v(values.begin(), values.end());
  return Tensor::constant({rows, steps, 1}, std::move(v));
}

}  // namespace

std::string kind_name(Kind k) { return k == Kind::kDkt2 ? "dkt2" : "dkt"; }

nlohmann::json to_json(const ModelConfig& c) {
  return {{"kind", kind_name(c.kind)},
          {"questions", c.questions},
          {"concepts", c.concepts},
          {"dim", c.dim},
          {"dropout", c.dropout},
          {"slstm_forget", forget_name(c.slstm_forget)},
          {"mlstm_forget", forget_name(c.mlstm_forget)},
          {"mlstm_parallel", c.mlstm_parallel},
          {"ablation",
           {{"no_rasch", c.ablation.no_rasch},
            {"no_irt", c.ablation.no_irt},
            {"no_ikf", c.ablation.no_ikf},
            {"no_slstm", c.ablation.no_slstm},
            {"no_mlstm", c.ablation.no_mlstm}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    std::string kind = j.at("kind");
    if (kind == "dkt2") {
      c.kind = Kind::kDkt2;
    } else if (kind == "dkt") {
      c.kind = Kind::kDkt;
    } else {
      throw ValueError("unknown model kind '" + kind + "'");
    }
    c.questions = j.at("questions");
    c.concepts = j.at("concepts");
    c.dim = j.at("dim");
    c.dropout = j.at("dropout");
    c.slstm_forget = forget_from(j.at("slstm_forget"));
    c.mlstm_forget = forget_from(j.at("mlstm_forget"));
    c.mlstm_parallel = j.at("mlstm_parallel");
    const auto& a = j.at("ablation");
    c.ablation = {a.at("no_rasch"), a.at("no_irt"), a.at("no_ikf"), a.at("no_slstm"), a.at("no_mlstm")};
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
}

void ParameterSet::add(std::string name, Tensor t) {
  if (!t.requires_grad()) throw ContractError("parameter " + name + " does not require a gradient");
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(t));
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

Tensor ParameterSet::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw ContractError("no parameter named " + name);
}

void ParameterSet::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

std::vector<std::vector<real>> ParameterSet::snapshot() const {
  std::vector<std::vector<real>> out;
  for (const auto& t : tensors_) out.push_back(t.to_vector());
  return out;
}

void ParameterSet::restore(const std::vector<std::vector<real>>& values) {
  if (values.size() != tensors_.size()) throw ContractError("snapshot has the wrong number of tensors");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = tensors_[i].mutable_data();
    if (values[i].size() != dst.size()) throw DimensionError("snapshot entry " + names_[i] + " has the wrong size");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

RaschOutput rasch_embed(const RaschTable& t, std::span<const int> q, std::span<const int> c,
                        std::span<const int> r) {
  if (q.size() != c.size() || q.size() != r.size()) {
    throw DimensionError("rasch_embed: question, concept and response counts differ");
  }
  Tensor ec = embedding(t.e_c, c);
  Tensor er = embedding(t.e_r, r);
  if (!t.d_q.defined()) {
    Tensor zero = Tensor::zeros({q.size(), 1});
    return {ec, ec + er, zero};
  }
  Tensor dq = embedding(t.d_q, q);
  return {ec + dq * embedding(t.mu_c, c), ec + er + dq * embedding(t.g_r, r), dq};
}

Tensor xlstm_encode(const EncoderParams& p, const Tensor& S, const EncoderOptions& opt) {
  if (S.rank() != 3 || S.dim(1) == 0) {
    throw DimensionError("xlstm_encode: expected [batch x T x d] with T >= 1, got " + shape_string(S.shape()));
  }
  Tensor u = S;
  if (opt.use_slstm) {
    u = u + cells::slstm_sequence(p.slstm, layer_norm(u, p.ln1_gain, p.ln1_bias, kLayerNormEps), opt.slstm_forget);
  }
  Tensor a = u;
  if (opt.use_mlstm) {
    Tensor x = layer_norm(u, p.ln2_gain, p.ln2_bias, kLayerNormEps);
    a = a + (opt.mlstm_parallel ? cells::mlstm_parallel(p.mlstm, x, opt.mlstm_forget)
                                : cells::mlstm_recurrent(p.mlstm, x, opt.mlstm_forget));
  }
  return a;
}

Decomposition irt_decompose(const Tensor& A, const Tensor& dq, const Tensor& r) {
  Shape lead = A.shape();
  lead.back() = 1;
  if (dq.shape() != lead || r.shape() != lead) {
    throw DimensionError("irt_decompose: A is " + shape_string(A.shape()) + ", difficulties " +
                         shape_string(dq.shape()) + ", responses " + shape_string(r.shape()));
  }
  Tensor K = A - dq;
  Tensor one_minus_r = add_scalar(-r, 1);
  return {K, r * K, one_minus_r * K};
}

Tensor fuse_predict(const HeadParams& p, const std::vector<Tensor>& parts, double dropout_rate, bool training,
                    std::mt19937_64* rng) {
  for (const auto& x : parts) {
    if (x.rank() != 2 || x.dim(0) != parts[0].dim(0)) {
      throw DimensionError("fuse_predict: parts must be [N x d] with equal N, got " + shape_string(x.shape()));
    }
  }
  Tensor x = concat_last(parts);
  Tensor hidden = relu(matmul(x, p.w1) + p.b1);
  hidden = dropout(hidden, static_cast<real>(dropout_rate), training, rng);
  return sigmoid(matmul(hidden, p.w2) + p.b2);
}

ForwardResult KtModel::forward(const data::SequenceBatch& batch, Mode mode) {
  const std::size_t B = batch.batch, L = batch.length;
  Tensor know = knowledge(batch, mode);
  std::size_t w = know.dim(2);
  std::size_t rows = B * (L - 1);
  Tensor flat = reshape(slice(know, 1, 0, L - 1), {rows, w});

  ForwardResult out;
  std::vector<int> next_q(rows), next_c(rows);
  out.labels.resize(rows);
  out.weights.resize(rows);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t + 1 < L; ++t) {
      std::size_t k = batch.at(b, t + 1), row = b * (L - 1) + t;
      bool real_step = batch.mask[k] != 0;
      next_q[row] = real_step ? batch.question[k] : 0;
      next_c[row] = real_step ? batch.concept_id[k] : 0;
      out.labels[row] = static_cast<real>(batch.response[k]);
      out.weights[row] = real_step ? real(1) : real(0);
    }
  }
  out.knowledge_state = readout(flat, next_q, next_c, mode);
  out.predictions = gather_last(out.knowledge_state, next_c);
  return out;
}

Dkt2Model::Dkt2Model(ModelConfig cfg, std::mt19937_64& rng) : KtModel(std::move(cfg)) {
  const std::size_t d = cfg_.dim, n = cfg_.concepts, nq = cfg_.questions;
  if (d == 0 || n == 0 || nq == 0) throw ContractError("dkt2: dim, concepts and questions must be positive");
  const auto& ab = cfg_.ablation;
  double be = fan_bound(d);
  rasch_.e_c = uniform_param({n, d}, be, rng);
  rasch_.e_r = uniform_param({2, d}, be, rng);
  params_.add("rasch.e_c", rasch_.e_c);
  params_.add("rasch.e_r", rasch_.e_r);
  if (!ab.no_rasch) {
    rasch_.mu_c = uniform_param({n, d}, be, rng);
    rasch_.g_r = uniform_param({2, d}, be, rng);
    rasch_.d_q = filled_param({nq, 1}, 0);
    params_.add("rasch.mu_c", rasch_.mu_c);
    params_.add("rasch.g_r", rasch_.g_r);
    params_.add("rasch.d_q", rasch_.d_q);
  }
  if (!ab.no_slstm) {
    encoder_.ln1_gain = filled_param({d}, 1);
    encoder_.ln1_bias = filled_param({d}, 0);
    encoder_.slstm = cells::LstmParams::uniform(d, d, rng);
    encoder_.slstm.freeze_input_bias();
    params_.add("ln1.gain", encoder_.ln1_gain);
    params_.add("ln1.bias", encoder_.ln1_bias);
    auto names = encoder_.slstm.names("slstm");
    auto tensors = encoder_.slstm.tensors();
    for (std::size_t i = 0; i < names.size(); ++i) params_.add(names[i], tensors[i]);
  }
  if (!ab.no_mlstm) {
    encoder_.ln2_gain = filled_param({d}, 1);
    encoder_.ln2_bias = filled_param({d}, 0);
    encoder_.mlstm = cells::MLstmParams::uniform(d, d, rng);
    params_.add("ln2.gain", encoder_.ln2_gain);
    params_.add("ln2.bias", encoder_.ln2_bias);
    auto names = encoder_.mlstm.names("mlstm");
    auto tensors = encoder_.mlstm.tensors();
    for (std::size_t i = 0; i < names.size(); ++i) params_.add(names[i], tensors[i]);
  }
  std::size_t in = ab.no_ikf ? 2 * d : 4 * d;
  head_.w1 = uniform_param({in, 2 * d}, fan_bound(in), rng);
  head_.b1 = uniform_param({1, 2 * d}, fan_bound(in), rng);
  head_.w2 = uniform_param({2 * d, n}, fan_bound(2 * d), rng);
  head_.b2 = uniform_param({1, n}, fan_bound(2 * d), rng);
  params_.add("head.w1", head_.w1);
  params_.add("head.b1", head_.b1);
  params_.add("head.w2", head_.w2);
  params_.add("head.b2", head_.b2);
}

EncoderOptions Dkt2Model::encoder_options() const {
  return {!cfg_.ablation.no_slstm, !cfg_.ablation.no_mlstm, cfg_.slstm_forget, cfg_.mlstm_forget,
          cfg_.mlstm_parallel};
}

Tensor Dkt2Model::knowledge(const data::SequenceBatch& batch, Mode mode) {
  const std::size_t B = batch.batch, L = batch.length, d = cfg_.dim;
  auto q = valid_ids(batch.question);
  auto c = valid_ids(batch.concept_id);
  auto emb = rasch_embed(rasch_, q, c, batch.response);
  Tensor S = dropout(reshape(emb.S, {B, L, d}), static_cast<real>(cfg_.dropout), mode.training, mode.rng);
  Tensor A = xlstm_encode(encoder_, S, encoder_options());
  Tensor dq = cfg_.ablation.no_irt ? Tensor::zeros({B, L, 1}) : reshape(emb.dq, {B, L, 1});
  auto parts = irt_decompose(A, dq, column(batch.response, B, L));
  if (cfg_.ablation.no_ikf) return parts.K;
  return concat_last({parts.K, parts.K_plus, parts.K_minus});
}

Tensor Dkt2Model::readout(const Tensor& rows, std::span<const int> next_question,
                          std::span<const int> next_concept, Mode mode) {
  const std::size_t N = rows.dim(0), d = cfg_.dim;
  if (rows.rank() != 2 || next_question.size() != N || next_concept.size() != N) {
    throw DimensionError("readout: " + shape_string(rows.shape()) + " rows with " +
                         std::to_string(next_question.size()) + " questions and " +
                         std::to_string(next_concept.size()) + " concepts");
  }
  std::vector<int> q(N), c(N), zero_r(N, 0);
  std::vector<bool> hidden(N, false);
  bool any_hidden = false;
  for (std::size_t i = 0; i < N; ++i) {
    bool h = next_question[i] < 0;
    any_hidden |= h;
    q[i] = h ? 0 : next_question[i];
    c[i] = h ? 0 : next_concept[i];
    hidden[i] = h;
  }
  Tensor Q = rasch_embed(rasch_, q, c, zero_r).Q;
  if (any_hidden) {
    std::vector<std::uint8_t> m(N * d);
    for (std::size_t i = 0; i < N; ++i) std::fill_n(m.begin() + i * d, d, hidden[i] ? 1 : 0);
    Q = masked_fill(Q, m, 0);
  }
  return fuse_predict(head_, {Q, rows}, cfg_.dropout, mode.training, mode.rng);
}

DktModel::DktModel(ModelConfig cfg, std::mt19937_64& rng) : KtModel(std::move(cfg)) {
  const std::size_t d = cfg_.dim, n = cfg_.concepts;
  if (d == 0 || n == 0) throw ContractError("dkt: dim and concepts must be positive");
  input_table_ = uniform_param({2 * n, d}, fan_bound(d), rng);
  lstm_ = cells::LstmParams::uniform(d, d, rng);
  out_w_ = uniform_param({d, n}, fan_bound(d), rng);
  out_b_ = uniform_param({1, n}, fan_bound(d), rng);
  params_.add("dkt.input", input_table_);
  auto names = lstm_.names("lstm");
  auto tensors = lstm_.tensors();
  for (std::size_t i = 0; i < names.size(); ++i) params_.add(names[i], tensors[i]);
  params_.add("dkt.out_w", out_w_);
  params_.add("dkt.out_b", out_b_);
}

Tensor DktModel::knowledge(const data::SequenceBatch& batch, Mode mode) {
  const std::size_t B = batch.batch, L = batch.length, d = cfg_.dim;
  auto c = valid_ids(batch.concept_id);
  std::vector<int> ids(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) ids[i] = 2 * c[i] + batch.response[i];
  Tensor x = dropout(reshape(embedding(input_table_, ids), {B, L, d}), static_cast<real>(cfg_.dropout),
                     mode.training, mode.rng);
  return cells::lstm_sequence(lstm_, x);
}

Tensor DktModel::readout(const Tensor& rows, std::span<const int> next_question, std::span<const int> next_concept,
                         Mode mode) {
  if (rows.rank() != 2 || next_question.size() != rows.dim(0) || next_concept.size() != rows.dim(0)) {
    throw DimensionError("readout: row count does not match the next-step ids");
  }
  Tensor h = dropout(rows, static_cast<real>(cfg_.dropout), mode.training, mode.rng);
  return sigmoid(matmul(h, out_w_) + out_b_);
}

std::unique_ptr<KtModel> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (cfg.kind == Kind::kDkt) return std::make_unique<DktModel>(cfg, rng);
  return std::make_unique<Dkt2Model>(cfg, rng);
}

nlohmann::json checkpoint_json(const KtModel& m, const Vocab& vocab, const std::string& config_hash,
                               const nlohmann::json& extra) {
  nlohmann::json params = nlohmann::json::array();
  const auto& ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    params.push_back({{"name", ps.names()[i]}, {"shape", ps.tensors()[i].shape()}, {"data", ps.tensors()[i].to_vector()}});
  }
  return {{"format", "xkt-checkpoint"},
          {"version", 1},
          {"config_hash", config_hash},
          {"model", to_json(m.config())},
          {"vocab", {{"questions", vocab.questions}, {"concepts", vocab.concepts}}},
          {"extra", extra},
          {"parameters", params}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "xkt-checkpoint" || j.at("version") != 1) {
      throw ParseError("not an xkt-checkpoint version 1 file");
    }
    Checkpoint ck;
    ck.model = make_model(model_config_from_json(j.at("model")), 0);
    ck.vocab.questions = j.at("vocab").at("questions").get<std::vector<std::string>>();
    ck.vocab.concepts = j.at("vocab").at("concepts").get<std::vector<std::string>>();
    ck.config_hash = j.at("config_hash");
    ck.extra = j.value("extra", nlohmann::json::object());
    auto& ps = ck.model->parameters();
    const auto& stored = j.at("parameters");
    if (stored.size() != ps.size()) {
      throw ParseError("checkpoint has " + std::to_string(stored.size()) + " tensors, model expects " +
                       std::to_string(ps.size()));
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& e = stored[i];
      if (e.at("name") != ps.names()[i]) throw ParseError("checkpoint tensor order differs at " + ps.names()[i]);
      Tensor t = ps.tensors()[i];
      if (e.at("shape").get<Shape>() != t.shape()) throw DimensionError("checkpoint shape mismatch for " + ps.names()[i]);
      auto values = e.at("data").get<std::vector<real>>();
      if (values.size() != t.numel()) throw DimensionError("checkpoint size mismatch for " + ps.names()[i]);
      std::copy(values.begin(), values.end(), t.mutable_data().begin());
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const KtModel& m, const Vocab& vocab,
                     const std::string& config_hash, const nlohmann::json& extra) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path.string());
  out << checkpoint_json(m, vocab, config_hash, extra).dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace xkt::model

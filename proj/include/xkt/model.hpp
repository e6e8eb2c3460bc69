#pragma once

// DKT2 (Rasch embedding, sLSTM/mLSTM encoder, IRT decomposition, fused
// per-concept head) and the LSTM DKT baseline behind one interface.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xkt/cells.hpp"
#include "xkt/data.hpp"
#include "xkt/tensor.hpp"

namespace xkt::model {

struct Ablation {
  bool no_rasch = false;  // d_q fixed at 0
  bool no_irt = false;    // K = A
  bool no_ikf = false;    // head input is concat(Q, K)
  bool no_slstm = false;
  bool no_mlstm = false;
};

enum class Kind { kDkt2, kDkt };

struct ModelConfig {
  Kind kind = Kind::kDkt2;
  std::size_t questions = 0;
  std::size_t concepts = 0;
  std::size_t dim = 64;
  double dropout = 0.05;
  cells::ForgetActivation slstm_forget = cells::ForgetActivation::kExp;
  cells::ForgetActivation mlstm_forget = cells::ForgetActivation::kSigmoid;
  bool mlstm_parallel = true;
  Ablation ablation;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
std::string kind_name(Kind k);

/// Named trainable tensors in registration order.
class ParameterSet {
 public:
  void add(std::string name, Tensor t);
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t numel() const;
  /// Throws ContractError when absent.
  Tensor get(const std::string& name) const;
  void zero_grad();
  std::vector<std::vector<real>> snapshot() const;
  void restore(const std::vector<std::vector<real>>& values);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

struct RaschTable {
  Tensor e_c;   // [concepts x d]
  Tensor e_r;   // [2 x d]
  Tensor mu_c;  // [concepts x d]
  Tensor g_r;   // [2 x d]
  Tensor d_q;   // [questions x 1]
};

struct RaschOutput {
  Tensor Q;   // [N x d]
  Tensor S;   // [N x d]
  Tensor dq;  // [N x 1]
};

/// Q = e_c + d_q mu_c and S = e_c + e_r + d_q g_r for each (q, c, r) triple.
RaschOutput rasch_embed(const RaschTable& table, std::span<const int> q, std::span<const int> c,
                        std::span<const int> r);

struct EncoderParams {
  Tensor ln1_gain, ln1_bias;
  cells::LstmParams slstm;
  Tensor ln2_gain, ln2_bias;
  cells::MLstmParams mlstm;
};

struct EncoderOptions {
  bool use_slstm = true;
  bool use_mlstm = true;
  cells::ForgetActivation slstm_forget = cells::ForgetActivation::kExp;
  cells::ForgetActivation mlstm_forget = cells::ForgetActivation::kSigmoid;
  bool mlstm_parallel = true;
};

inline constexpr real kLayerNormEps = real(1e-5);

/// u = S + sLSTM(LN1(S)); A = u + mLSTM(LN2(u)). S is [B x T x d].
Tensor xlstm_encode(const EncoderParams& p, const Tensor& S, const EncoderOptions& opt);

struct Decomposition {
  Tensor K, K_plus, K_minus;
};

/// K = A - d_q; K+ = r K; K- = (1 - r) K. A is [..., d]; dq and r are [..., 1].
Decomposition irt_decompose(const Tensor& A, const Tensor& dq, const Tensor& r);

struct HeadParams {
  Tensor w1, b1;  // [in x 2d], [1 x 2d]
  Tensor w2, b2;  // [2d x n], [1 x n]
};

/// KS = sigmoid(relu(X W1 + b1) W2 + b2) with X = concat(parts). Dropout on
/// the ReLU output when `training`.
Tensor fuse_predict(const HeadParams& p, const std::vector<Tensor>& parts, double dropout, bool training,
                    std::mt19937_64* rng);

struct Mode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

struct ForwardResult {
  Tensor knowledge_state;  // [B(L-1) x n], row (b, t) predicts step t+1
  Tensor predictions;      // [B(L-1) x 1], KS gathered at the target concept
  std::vector<real> labels;
  std::vector<real> weights;  // 1 where step t+1 is a real interaction
};

class KtModel {
 public:
  explicit KtModel(ModelConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~KtModel() = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Knowledge rows [B x L x w]; row t depends only on interactions 0..t.
  virtual Tensor knowledge(const data::SequenceBatch& batch, Mode mode) = 0;
  /// Next-step knowledge states [N x n] from knowledge rows [N x w] and the
  /// next question/concept of each row. A negative question id hides the
  /// next question: its embedding is the all-zero row.
  virtual Tensor readout(const Tensor& rows, std::span<const int> next_question,
                         std::span<const int> next_concept, Mode mode) = 0;

  /// One-step prediction for steps 1..L-1 of every row.
  ForwardResult forward(const data::SequenceBatch& batch, Mode mode);

 protected:
  ModelConfig cfg_;
  ParameterSet params_;
};

class Dkt2Model : public KtModel {
 public:
  Dkt2Model(ModelConfig cfg, std::mt19937_64& rng);

  Tensor knowledge(const data::SequenceBatch& batch, Mode mode) override;
  Tensor readout(const Tensor& rows, std::span<const int> next_question, std::span<const int> next_concept,
                 Mode mode) override;

  const RaschTable& rasch() const { return rasch_; }
  const EncoderParams& encoder() const { return encoder_; }
  const HeadParams& head() const { return head_; }
  HeadParams& mutable_head() { return head_; }
  EncoderOptions encoder_options() const;

 private:
  RaschTable rasch_;
  EncoderParams encoder_;
  HeadParams head_;
};

class DktModel : public KtModel {
 public:
  DktModel(ModelConfig cfg, std::mt19937_64& rng);

  Tensor knowledge(const data::SequenceBatch& batch, Mode mode) override;
  Tensor readout(const Tensor& rows, std::span<const int> next_question, std::span<const int> next_concept,
                 Mode mode) override;

 private:
  Tensor input_table_;  // [2 concepts x d], row 2c + r
  cells::LstmParams lstm_;
  Tensor out_w_, out_b_;
};

std::unique_ptr<KtModel> make_model(const ModelConfig& cfg, std::uint64_t seed);

struct Vocab {
  std::vector<std::string> questions;
  std::vector<std::string> concepts;
};

struct Checkpoint {
  std::unique_ptr<KtModel> model;
  Vocab vocab;
  std::string config_hash;
  nlohmann::json extra;
};

nlohmann::json checkpoint_json(const KtModel& m, const Vocab& vocab, const std::string& config_hash,
                               const nlohmann::json& extra = nlohmann::json::object());
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const KtModel& m, const Vocab& vocab,
                     const std::string& config_hash, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xkt::model

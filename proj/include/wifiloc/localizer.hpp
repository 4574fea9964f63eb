#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "wifiloc/config.hpp"
#include "wifiloc/distribution_map.hpp"
#include "wifiloc/gaussian_location.hpp"
#include "wifiloc/radio_map.hpp"
#include "wifiloc/types.hpp"

namespace wifiloc::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

struct CnnConfig {
  int window = 64;
  int kernel1 = 20;
  int stride1 = 4;
  int kernel2 = 5;
  int stride2 = 2;
  int channels = 16;
  /// Shift and scale each window to zero mean, unit variance.
  bool standardize = true;

  int out1() const { return (window - kernel1) / stride1 + 1; }
  int out2() const { return (out1() - kernel2) / stride2 + 1; }
  int flat() const { return out2() * out2() * channels; }
};

struct LocalizerConfig {
  int d_model = 256;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  double dropout = 0.2;
  CnnConfig cnn;
  std::vector<int> rss_hidden{128, 64};
  std::vector<int> head_hidden{256, 128, 64};
  double sigma_floor = 1e-3;
  bool residual = true;
  bool layer_norm = true;
  double map_cell_size = 1.0;  // meters per distribution-map cell
  std::uint64_t seed = 0;

  int d_k() const { return d_model / n_heads; }
  void validate() const;

  /// Keys: d_model, n_layers, n_heads, d_ff, dropout, head_hidden (comma list),
  /// rss_hidden, sigma_floor, residual, layer_norm, map_cell_size, map_standardize, seed.
  static LocalizerConfig from_config(const KeyValueConfig& cfg);
};

// ---------------------------------------------------------------------------
// Flat parameter vector with named blocks
// ---------------------------------------------------------------------------

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

class ParamLayout {
 public:
  int add(std::string name, int rows, int cols);
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(int i) const { return blocks_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return size_; }
  /// Index of the block owning flat position `offset`.
  int block_of(std::size_t offset) const;

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t size_ = 0;
};

/// x W + b, with W stored in x W orientation (rows = fan-in).
struct LinearIdx {
  int w = -1;
  int b = -1;
};

struct EncoderLayerIdx {
  int wq = -1, wk = -1, wv = -1, wo = -1;
  LinearIdx ff1, ff2;
  int ln1_g = -1, ln1_b = -1, ln2_g = -1, ln2_b = -1;
};

struct ModelIdx {
  LinearIdx conv1, conv2, proj;
  std::vector<LinearIdx> rss;
  std::vector<EncoderLayerIdx> layers;
  std::vector<LinearIdx> mu;
  std::vector<LinearIdx> sigma;
};

/// CNN input for every MAC of a table: the max-resampled distribution map
/// as first-layer im2col patches (positions x kernel1^2).
class MacInputs {
 public:
  MacInputs() = default;
  MacInputs(const RssDistributionMaps& maps, const CnnConfig& cnn);

  const MacTable& mac_table() const { return macs_; }
  int size() const { return static_cast<int>(patches_.size()); }
  const Mat& patches(int mac) const { return patches_[static_cast<std::size_t>(mac)]; }
  const std::vector<double>& window(int mac) const { return windows_[static_cast<std::size_t>(mac)]; }

 private:
  MacTable macs_;
  std::vector<std::vector<double>> windows_;
  std::vector<Mat> patches_;
};

/// Prediction in normalized coordinates.
struct Prediction {
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  double sigma = 1.0;
  double sigma_raw = 1.0;  // sigmoid output before the floor
};

/// Token list of one fingerprint: MAC-table indices and normalized RSS, in
/// canonical (MAC, RSS) order with unknown MACs dropped.
struct TokenSet {
  std::vector<int> macs;
  std::vector<double> rss;
};

TokenSet tokenize(const Fingerprint& fp, const MacTable& table);

class LocalizerModel {
 public:
  LocalizerModel() = default;
  /// Initializes parameters uniformly in +-1/sqrt(fan_in); layer-norm gains at 1.
  explicit LocalizerModel(LocalizerConfig config);

  const LocalizerConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  const ModelIdx& idx() const { return idx_; }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  void set_params(const Vec& p);

  Eigen::Map<Mat> block(int i) { return {params_.data() + layout_.block(i).offset, layout_.block(i).rows, layout_.block(i).cols}; }
  Eigen::Map<const Mat> block(int i) const {
    return {params_.data() + layout_.block(i).offset, layout_.block(i).rows, layout_.block(i).cols};
  }

  /// One d_model row per MAC of `inputs`.
  Mat mac_embeddings(const MacInputs& inputs) const;
  RowVec mac_embedding(const MacInputs& inputs, int mac) const;

  /// rss_mlp output for normalized RSS values, one per entry.
  Vec rss_scale(std::span<const double> rss_normalized) const;

  /// token_j = rss_mlp(rss_j) * embedding(mac_j), rows in `fp` entry order;
  /// unknown MACs are dropped. Throws EmptyFingerprintError when none remain.
  Mat embed_fingerprint(const Fingerprint& fp, const MacInputs& inputs) const;

  /// Eval-mode prediction. `embeddings` from mac_embeddings(inputs).
  Prediction forward(const TokenSet& tokens, const Mat& embeddings) const;
  Prediction forward(const Fingerprint& fp, const MacInputs& inputs) const;

 private:
  LocalizerConfig config_;
  ParamLayout layout_;
  ModelIdx idx_;
  Vec params_;
};

// ---------------------------------------------------------------------------
// Attention primitives (exposed for tests)
// ---------------------------------------------------------------------------

/// Row-wise softmax.
Mat softmax_rows(const Mat& logits);

/// softmax(E Wq (E Wk)^T / sqrt(d_k)) E Wv, with d_k = Wq.cols().
Mat attention_head(const Mat& E, const Mat& Wq, const Mat& Wk, const Mat& Wv);

/// Concat over heads of attention_head on column slices, times Wo.
Mat multi_head(const Mat& E, const Mat& Wq, const Mat& Wk, const Mat& Wv, const Mat& Wo,
               int n_heads);

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// |mu - target| / sigma + ln sigma.
double uncertainty_loss(const Eigen::Vector2d& mu, double sigma, const Eigen::Vector2d& target);

struct TrainingExample {
  TokenSet tokens;
  Eigen::Vector2d target;  // normalized coordinates
};

struct BatchResult {
  double loss = 0.0;  // mean over the batch
  Vec grad;           // same layout as the parameter vector
  std::vector<Prediction> predictions;
};

/// Mean loss and its exact gradient. Dropout is active when `dropout_seed` is
/// set; masks are a pure function of (seed, example index, layer, site).
/// Throws NumericError naming the parameter block of a non-finite gradient.
BatchResult loss_and_gradient(const LocalizerModel& model, const MacInputs& inputs,
                              std::span<const TrainingExample> batch,
                              std::optional<std::uint64_t> dropout_seed);

/// Loss only, with the same dropout masks as loss_and_gradient.
double batch_loss(const LocalizerModel& model, const MacInputs& inputs,
                  std::span<const TrainingExample> batch,
                  std::optional<std::uint64_t> dropout_seed);

/// Sign of every ReLU pre-activation and the sigma-floor branch, in
/// evaluation order. Two parameter vectors with equal patterns lie in the same
/// piecewise-smooth region of the loss.
std::vector<std::uint8_t> activation_pattern(const LocalizerModel& model, const MacInputs& inputs,
                                             std::span<const TrainingExample> batch,
                                             std::optional<std::uint64_t> dropout_seed);

// ---------------------------------------------------------------------------
// Inference in map coordinates
// ---------------------------------------------------------------------------

class WifiLocalizer {
 public:
  WifiLocalizer(LocalizerModel model, MacInputs inputs, CoordinateTransform transform);

  /// mu in meters; sigma scaled by the mean axis extent.
  GaussianLocation localize(const Fingerprint& fp) const;
  Prediction predict_normalized(const Fingerprint& fp) const;

  const LocalizerModel& model() const { return model_; }
  const MacInputs& inputs() const { return inputs_; }
  const CoordinateTransform& transform() const { return transform_; }

 private:
  LocalizerModel model_;
  MacInputs inputs_;
  CoordinateTransform transform_;
  Mat embeddings_;
};

/// `mac,e0,...,e{d-1}`, one row per MAC of the table.
void export_embeddings(const LocalizerModel& model, const MacInputs& inputs, std::ostream& out);

}  // namespace wifiloc::nn

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "wifiloc/config.hpp"
#include "wifiloc/localizer.hpp"

namespace wifiloc::nn {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

/// Decoupled weight decay: p -= lr * wd * p, then the bias-corrected Adam step.
class AdamW {
 public:
  AdamW(std::size_t n, AdamWOptions options);
  void step(Vec& params, const Vec& grad);
  long long steps() const { return t_; }
  double lr() const { return o_.lr; }
  void set_lr(double lr) { o_.lr = lr; }

 private:
  AdamWOptions o_;
  Vec m_, v_;
  long long t_ = 0;
};

struct TrainOptions {
  AdamWOptions adamw;
  int epochs = 200;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool dropout = true;  // train-mode dropout masks
  /// Stop when validation error has not improved for this many epochs; 0 disables.
  int patience = 0;
  /// Cosine decay of the learning rate from lr to lr * lr_final over the epochs.
  bool cosine = false;
  double lr_final = 0.05;

  /// Learning rate used during `epoch` (1-based).
  double lr_at(int epoch) const;

  /// Keys: lr, beta1, beta2, weight_decay, epochs, batch_size, seed, patience, dropout,
  /// schedule (constant|cosine), lr_final.
  static TrainOptions from_config(const KeyValueConfig& cfg);
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_mean_err = 0.0;  // meters
};

struct TrainResult {
  LocalizerModel model;  // best by validation mean error
  int best_epoch = 0;
  double best_val_mean_err = 0.0;
  std::vector<EpochRecord> history;
  bool diverged = false;
};

/// Examples in normalized coordinates. Fingerprints without known MACs are skipped.
std::vector<TrainingExample> make_examples(const RadioMap& map, const MacTable& table,
                                           const CoordinateTransform& transform);

/// Mean Euclidean error in meters over examples.
double mean_error_m(const LocalizerModel& model, const MacInputs& inputs,
                    std::span<const TrainingExample> examples, const CoordinateTransform& transform);

/// Deterministic given the model's initial parameters and options.seed.
/// `train` and `val` must share the MAC table of `inputs`.
TrainResult train(LocalizerModel model, const MacInputs& inputs, const RadioMap& train,
                  const RadioMap& val, const CoordinateTransform& transform,
                  const TrainOptions& options);

/// `epoch,train_loss,val_mean_err`.
void write_history_csv(const std::vector<EpochRecord>& history, std::ostream& out);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "wifiloc-localizer/1";

/// The trained model together with what is needed to rebuild its inputs.
struct Checkpoint {
  LocalizerModel model;
  MacTable mac_table;
  CoordinateTransform transform;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint read_checkpoint(std::istream& in);

/// Rebuilds the localizer from a checkpoint and the radio map it was trained on.
/// Throws when the map's MAC table does not hash to the stored one.
WifiLocalizer make_localizer(const Checkpoint& ckpt, const RadioMap& radio_map);

}  // namespace wifiloc::nn

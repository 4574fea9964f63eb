#include "wifiloc/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>

#include <json.hpp>

#include "wifiloc/random.hpp"

namespace wifiloc::nn {

using nlohmann::ordered_json;

AdamW::AdamW(std::size_t n, AdamWOptions options)
    : o_(options), m_(Vec::Zero(static_cast<Eigen::Index>(n))), v_(Vec::Zero(static_cast<Eigen::Index>(n))) {
  if (o_.lr < 0 || o_.weight_decay < 0) throw ValidationError("lr and weight_decay must be non-negative");
  if (!(o_.beta1 >= 0 && o_.beta1 < 1 && o_.beta2 >= 0 && o_.beta2 < 1))
    throw ValidationError("betas must be in [0, 1)");
}

void AdamW::step(Vec& params, const Vec& grad) {
  ++t_;
  const double bc1 = 1.0 - std::pow(o_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(o_.beta2, static_cast<double>(t_));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    params(i) -= o_.lr * o_.weight_decay * params(i);
    m_(i) = o_.beta1 * m_(i) + (1.0 - o_.beta1) * grad(i);
    v_(i) = o_.beta2 * v_(i) + (1.0 - o_.beta2) * grad(i) * grad(i);
    params(i) -= o_.lr * (m_(i) / bc1) / (std::sqrt(v_(i) / bc2) + o_.eps);
  }
}

TrainOptions TrainOptions::from_config(const KeyValueConfig& cfg) {
  TrainOptions t;
  t.adamw.lr = cfg.get_double("lr", t.adamw.lr);
  t.adamw.beta1 = cfg.get_double("beta1", t.adamw.beta1);
  t.adamw.beta2 = cfg.get_double("beta2", t.adamw.beta2);
  t.adamw.weight_decay = cfg.get_double("weight_decay", t.adamw.weight_decay);
  t.epochs = static_cast<int>(cfg.get_int("epochs", t.epochs));
  t.batch_size = static_cast<int>(cfg.get_int("batch_size", t.batch_size));
  t.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(t.seed)));
  t.patience = static_cast<int>(cfg.get_int("patience", t.patience));
  t.dropout = cfg.get_bool("dropout", t.dropout);
  const std::string schedule = cfg.get_string("schedule", "constant");
  if (schedule == "cosine") {
    t.cosine = true;
  } else if (schedule != "constant") {
    throw ValidationError("schedule must be constant or cosine, got '" + schedule + "'");
  }
  t.lr_final = cfg.get_double("lr_final", t.lr_final);
  if (!(t.lr_final >= 0 && t.lr_final <= 1)) throw ValidationError("lr_final must be in [0, 1]");
  if (t.epochs < 1) throw ValidationError("epochs must be at least 1");
  if (t.batch_size < 1) throw ValidationError("batch_size must be at least 1");
  if (t.patience < 0) throw ValidationError("patience must be non-negative");
  return t;
}

double TrainOptions::lr_at(int epoch) const {
  if (!cosine || epochs <= 1) return adamw.lr;
  const double pi = std::acos(-1.0);
  const double frac = static_cast<double>(epoch - 1) / static_cast<double>(epochs - 1);
  return adamw.lr * (lr_final + 0.5 * (1.0 - lr_final) * (1.0 + std::cos(pi * frac)));
}

std::vector<TrainingExample> make_examples(const RadioMap& map, const MacTable& table,
                                           const CoordinateTransform& transform) {
  std::vector<TrainingExample> out;
  out.reserve(map.size());
  for (const auto& s : map.samples()) {
    TrainingExample ex;
    ex.tokens = tokenize(s.fingerprint, table);
    if (ex.tokens.macs.empty()) continue;
    const Location n = transform.normalize(s.location);
    ex.target = {n.x, n.y};
    out.push_back(std::move(ex));
  }
  return out;
}

double mean_error_m(const LocalizerModel& model, const MacInputs& inputs,
                    std::span<const TrainingExample> examples, const CoordinateTransform& transform) {
  if (examples.empty()) throw ValidationError("no examples to evaluate");
  const Mat emb = model.mac_embeddings(inputs);
  double sum = 0.0;
  for (const auto& ex : examples) {
    const Prediction p = model.forward(ex.tokens, emb);
    sum += distance(transform.denormalize({p.mu(0), p.mu(1)}),
                    transform.denormalize({ex.target(0), ex.target(1)}));
  }
  return sum / static_cast<double>(examples.size());
}

TrainResult train(LocalizerModel model, const MacInputs& inputs, const RadioMap& train_map,
                  const RadioMap& val_map, const CoordinateTransform& transform,
                  const TrainOptions& options) {
  if (!(train_map.mac_table() == inputs.mac_table()) || !(val_map.mac_table() == inputs.mac_table()))
    throw ValidationError("train and validation maps must share the localizer's MAC table");
  const auto train_ex = make_examples(train_map, inputs.mac_table(), transform);
  const auto val_ex = make_examples(val_map, inputs.mac_table(), transform);
  if (train_ex.empty() || val_ex.empty()) throw EmptyMapError("training or validation set is empty");

  AdamW opt(model.layout().size(), options.adamw);
  TrainResult res{model, 0, mean_error_m(model, inputs, val_ex, transform), {}, false};
  Vec last_good = model.params();
  int since_best = 0;
  std::vector<std::size_t> order(train_ex.size());
  std::vector<TrainingExample> batch;

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    opt.set_lr(options.lr_at(epoch));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(options.seed, {0x7a11, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_ex[order[i]]);
      std::optional<std::uint64_t> dseed;
      if (options.dropout) dseed = derive_seed(options.seed, {0xd0, static_cast<std::uint64_t>(epoch), n_batches});
      BatchResult br;
      try {
        br = loss_and_gradient(model, inputs, batch, dseed);
      } catch (const NumericError&) {
        res.diverged = true;
      }
      if (res.diverged || !std::isfinite(br.loss)) {
        res.diverged = true;
        break;
      }
      opt.step(model.params(), br.grad);
      if (!model.params().allFinite()) {
        res.diverged = true;
        break;
      }
      loss_sum += br.loss;
      ++n_batches;
    }
    if (res.diverged) {
      model.set_params(last_good);
      break;
    }
    last_good = model.params();

    const double val_err = mean_error_m(model, inputs, val_ex, transform);
    res.history.push_back({epoch, loss_sum / static_cast<double>(n_batches), val_err});
    if (val_err < res.best_val_mean_err) {
      res.best_val_mean_err = val_err;
      res.best_epoch = epoch;
      res.model = model;
      since_best = 0;
    } else if (options.patience > 0 && ++since_best >= options.patience) {
      break;
    }
  }
  return res;
}

void write_history_csv(const std::vector<EpochRecord>& history, std::ostream& out) {
  out << "epoch,train_loss,val_mean_err\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_mean_err) << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

ordered_json config_to_json(const LocalizerConfig& c) {
  ordered_json j;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["dropout"] = c.dropout;
  j["cnn"] = {{"window", c.cnn.window}, {"kernel1", c.cnn.kernel1}, {"stride1", c.cnn.stride1},
              {"kernel2", c.cnn.kernel2}, {"stride2", c.cnn.stride2}, {"channels", c.cnn.channels},
              {"standardize", c.cnn.standardize}};
  j["rss_hidden"] = c.rss_hidden;
  j["head_hidden"] = c.head_hidden;
  j["sigma_floor"] = c.sigma_floor;
  j["residual"] = c.residual;
  j["layer_norm"] = c.layer_norm;
  j["map_cell_size"] = c.map_cell_size;
  j["seed"] = c.seed;
  return j;
}

LocalizerConfig config_from_json(const ordered_json& j) {
  LocalizerConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.dropout = j.at("dropout").get<double>();
  const auto& n = j.at("cnn");
  c.cnn = {n.at("window").get<int>(), n.at("kernel1").get<int>(), n.at("stride1").get<int>(),
           n.at("kernel2").get<int>(), n.at("stride2").get<int>(), n.at("channels").get<int>(),
           n.at("standardize").get<bool>()};
  c.rss_hidden = j.at("rss_hidden").get<std::vector<int>>();
  c.head_hidden = j.at("head_hidden").get<std::vector<int>>();
  c.sigma_floor = j.at("sigma_floor").get<double>();
  c.residual = j.at("residual").get<bool>();
  c.layer_norm = j.at("layer_norm").get<bool>();
  c.map_cell_size = j.at("map_cell_size").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  ordered_json j;
  j["format"] = kCheckpointFormat;
  j["config"] = config_to_json(ckpt.model.config());
  j["mac_table_hash"] = hex64(ckpt.mac_table.hash());
  std::vector<std::string> macs;
  for (const auto& m : ckpt.mac_table.macs()) macs.push_back(m.str());
  j["macs"] = macs;
  j["transform"] = {{"offset_x", ckpt.transform.offset_x}, {"offset_y", ckpt.transform.offset_y},
                    {"scale_x", ckpt.transform.scale_x}, {"scale_y", ckpt.transform.scale_y}};
  const Vec& p = ckpt.model.params();
  j["parameters"] = std::vector<double>(p.data(), p.data() + p.size());
  out << j.dump() << '\n';
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  write_checkpoint(ckpt, out);
}

Checkpoint read_checkpoint(std::istream& in) {
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError(1, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw ValidationError("unsupported checkpoint format '" + j.at("format").get<std::string>() + "'");
    Checkpoint c{LocalizerModel(config_from_json(j.at("config"))), {}, {}};
    for (const auto& m : j.at("macs")) c.mac_table.intern(MacId::parse(m.get<std::string>()));
    if (hex64(c.mac_table.hash()) != j.at("mac_table_hash").get<std::string>())
      throw ValidationError("checkpoint MAC table hash mismatch");
    const auto& t = j.at("transform");
    c.transform = {t.at("offset_x").get<double>(), t.at("offset_y").get<double>(),
                   t.at("scale_x").get<double>(), t.at("scale_y").get<double>()};
    const auto values = j.at("parameters").get<std::vector<double>>();
    c.model.set_params(Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size())));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  return read_checkpoint(in);
}

WifiLocalizer make_localizer(const Checkpoint& ckpt, const RadioMap& radio_map) {
  if (radio_map.mac_table().hash() != ckpt.mac_table.hash())
    throw ValidationError("radio map MAC table does not match the checkpoint");
  const auto maps = build_rss_distribution_maps(radio_map, ckpt.model.config().map_cell_size);
  return WifiLocalizer(ckpt.model, MacInputs(maps, ckpt.model.config().cnn), ckpt.transform);
}

}  // namespace wifiloc::nn

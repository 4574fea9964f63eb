#include "wifiloc/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "wifiloc/random.hpp"

namespace wifiloc::nn {

namespace {

constexpr double kLayerNormEps = 1e-5;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

thread_local std::vector<std::uint8_t>* g_trace = nullptr;

Mat relu(const Mat& x) {
  if (g_trace) {
    for (Eigen::Index i = 0; i < x.size(); ++i) g_trace->push_back(x.data()[i] > 0.0);
  }
  return x.cwiseMax(0.0);
}

Mat relu_mask(const Mat& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ValidationError("bad integer list '" + text + "'");
    }
  }
  return out;
}

struct LayerNormCache {
  Mat xhat;
  Vec inv_std;
};

Mat layer_norm(const Mat& y, const Eigen::Map<const Mat>& g, const Eigen::Map<const Mat>& b,
               LayerNormCache* cache) {
  const Eigen::Index n = y.rows(), d = y.cols();
  Mat xhat(n, d);
  Vec inv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = y.row(i).mean();
    const RowVec c = y.row(i).array() - mean;
    const double var = c.squaredNorm() / static_cast<double>(d);
    inv(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = c * inv(i);
  }
  Mat out = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) cache->xhat = std::move(xhat), cache->inv_std = std::move(inv);
  return out;
}

Mat layer_norm_backward(const Mat& gout, const LayerNormCache& c, const Eigen::Map<const Mat>& g,
                        Eigen::Map<Mat> gg, Eigen::Map<Mat> gb) {
  gg.row(0) += (gout.array() * c.xhat.array()).colwise().sum().matrix();
  gb.row(0) += gout.colwise().sum();
  const Mat gx = gout.array().rowwise() * g.row(0).array();
  const double d = static_cast<double>(gout.cols());
  Mat gy(gout.rows(), gout.cols());
  for (Eigen::Index i = 0; i < gout.rows(); ++i) {
    const double m1 = gx.row(i).sum() / d;
    const double m2 = gx.row(i).dot(c.xhat.row(i)) / d;
    gy.row(i) = c.inv_std(i) * (gx.row(i).array() - m1 - c.xhat.row(i).array() * m2).matrix();
  }
  return gy;
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::uint64_t seed) {
  SplitMix64 gen(seed);
  Mat m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform(gen, 0.0, 1.0) < p ? 0.0 : keep;
  }
  return m;
}

/// Gradient views mirroring the parameter layout.
class GradView {
 public:
  GradView(const ParamLayout& layout, Vec& g) : layout_(&layout), g_(&g) {}
  Eigen::Map<Mat> block(int i) {
    const auto& b = layout_->block(i);
    return {g_->data() + b.offset, b.rows, b.cols};
  }

 private:
  const ParamLayout* layout_;
  Vec* g_;
};

// ---------------------------------------------------------------------------
// MLP with ReLU hidden layers and a linear last layer
// ---------------------------------------------------------------------------

struct MlpCache {
  std::vector<Mat> inputs;  // input of each layer
  std::vector<Mat> pre;     // pre-activation of each hidden layer
};

Mat mlp_forward(const LocalizerModel& m, const std::vector<LinearIdx>& layers, const Mat& x,
                MlpCache* cache) {
  Mat h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Mat z = (h * m.block(layers[l].w)).rowwise() + m.block(layers[l].b).row(0);
    if (cache) cache->inputs.push_back(h);
    if (l + 1 == layers.size()) return z;
    h = relu(z);
    if (cache) cache->pre.push_back(std::move(z));
  }
  return h;
}

Mat mlp_backward(const LocalizerModel& m, const std::vector<LinearIdx>& layers,
                 const MlpCache& cache, Mat g, GradView& grad) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size()) g = g.cwiseProduct(relu_mask(cache.pre[k]));
    grad.block(layers[k].w) += cache.inputs[k].transpose() * g;
    grad.block(layers[k].b).row(0) += g.colwise().sum();
    g = g * m.block(layers[k].w).transpose();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Per-example forward cache
// ---------------------------------------------------------------------------

struct LayerCache {
  Mat x;
  Mat q, k, v;
  std::vector<Mat> attn;  // per head, n x n
  Mat concat;
  Mat mask1, mask2;  // empty in eval mode
  LayerNormCache ln1, ln2;
  Mat z1;
  Mat ff_pre;
  Mat ff_hidden;
};

struct ExampleCache {
  Mat emb;        // n x d raw MAC embeddings
  Vec scale;      // n rss_mlp outputs
  Vec scale_pre;  // n pre-sigmoid
  MlpCache rss;
  std::vector<LayerCache> layers;
  Mat final_tokens;
  RowVec pooled;
  MlpCache mu, sigma;
};

struct Masks {
  bool active = false;
  std::uint64_t seed = 0;
};

Prediction forward_example(const LocalizerModel& m, const TokenSet& t, const Mat& embeddings,
                           const Masks& masks, ExampleCache* cache) {
  const LocalizerConfig& cfg = m.config();
  const Eigen::Index n = static_cast<Eigen::Index>(t.macs.size());
  if (n == 0) throw EmptyFingerprintError("fingerprint has no known MAC");
  const int d = cfg.d_model, dk = cfg.d_k();
  const ModelIdx& ix = m.idx();

  Mat emb(n, d);
  for (Eigen::Index j = 0; j < n; ++j) emb.row(j) = embeddings.row(t.macs[static_cast<std::size_t>(j)]);
  Mat r(n, 1);
  for (Eigen::Index j = 0; j < n; ++j) r(j, 0) = t.rss[static_cast<std::size_t>(j)];
  MlpCache* rss_cache = cache ? &cache->rss : nullptr;
  const Mat spre = mlp_forward(m, ix.rss, r, rss_cache);
  Vec scale(n);
  for (Eigen::Index j = 0; j < n; ++j) scale(j) = sigmoid(spre(j, 0));
  Mat x = scale.asDiagonal() * emb;
  if (cache) {
    cache->emb = emb;
    cache->scale = scale;
    cache->scale_pre = spre.col(0);
  }

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const EncoderLayerIdx& L = ix.layers[static_cast<std::size_t>(l)];
    LayerCache lc;
    lc.x = x;
    lc.q = x * m.block(L.wq);
    lc.k = x * m.block(L.wk);
    lc.v = x * m.block(L.wv);
    lc.concat.resize(n, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Mat logits = lc.q.middleCols(h * dk, dk) * lc.k.middleCols(h * dk, dk).transpose() * inv_sqrt_dk;
      Mat a = softmax_rows(logits);
      lc.concat.middleCols(h * dk, dk) = a * lc.v.middleCols(h * dk, dk);
      lc.attn.push_back(std::move(a));
    }
    Mat o = lc.concat * m.block(L.wo);
    if (masks.active && cfg.dropout > 0.0) {
      lc.mask1 = dropout_mask(n, d, cfg.dropout, derive_seed(masks.seed, {static_cast<std::uint64_t>(l), 0}));
      o = o.cwiseProduct(lc.mask1);
    }
    Mat y1 = cfg.residual ? Mat(x + o) : o;
    lc.z1 = cfg.layer_norm ? layer_norm(y1, m.block(L.ln1_g), m.block(L.ln1_b), &lc.ln1) : y1;

    lc.ff_pre = (lc.z1 * m.block(L.ff1.w)).rowwise() + m.block(L.ff1.b).row(0);
    lc.ff_hidden = relu(lc.ff_pre);
    Mat f = (lc.ff_hidden * m.block(L.ff2.w)).rowwise() + m.block(L.ff2.b).row(0);
    if (masks.active && cfg.dropout > 0.0) {
      lc.mask2 = dropout_mask(n, d, cfg.dropout, derive_seed(masks.seed, {static_cast<std::uint64_t>(l), 1}));
      f = f.cwiseProduct(lc.mask2);
    }
    Mat y2 = cfg.residual ? Mat(lc.z1 + f) : f;
    x = cfg.layer_norm ? layer_norm(y2, m.block(L.ln2_g), m.block(L.ln2_b), &lc.ln2) : y2;
    if (cache) cache->layers.push_back(std::move(lc));
  }

  const RowVec pooled = x.colwise().sum() / static_cast<double>(n);
  const Mat mu = mlp_forward(m, ix.mu, pooled, cache ? &cache->mu : nullptr);
  const Mat sp = mlp_forward(m, ix.sigma, pooled, cache ? &cache->sigma : nullptr);
  if (cache) {
    cache->final_tokens = x;
    cache->pooled = pooled;
  }
  Prediction p;
  p.mu = Eigen::Vector2d(mu(0, 0), mu(0, 1));
  p.sigma_raw = sigmoid(sp(0, 0));
  p.sigma = std::max(p.sigma_raw, cfg.sigma_floor);
  if (g_trace) g_trace->push_back(p.sigma_raw >= cfg.sigma_floor);
  return p;
}

/// Backpropagates d loss / d (mu, sigma) of one example; returns d loss / d embedding rows.
Mat backward_example(const LocalizerModel& m, const ExampleCache& c, const Prediction& p,
                     const Eigen::Vector2d& gmu, double gsigma, GradView& grad) {
  const LocalizerConfig& cfg = m.config();
  const ModelIdx& ix = m.idx();
  const int dk = cfg.d_k();
  const Eigen::Index n = c.final_tokens.rows();

  Mat gm(1, 2);
  gm << gmu(0), gmu(1);
  Mat gpool = mlp_backward(m, ix.mu, c.mu, gm, grad);
  if (p.sigma_raw >= cfg.sigma_floor) {
    Mat gs(1, 1);
    gs(0, 0) = gsigma * p.sigma_raw * (1.0 - p.sigma_raw);
    gpool += mlp_backward(m, ix.sigma, c.sigma, gs, grad);
  }

  Mat gx = Mat::Ones(n, 1) * (gpool / static_cast<double>(n));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int l = cfg.n_layers; l-- > 0;) {
    const EncoderLayerIdx& L = ix.layers[static_cast<std::size_t>(l)];
    const LayerCache& lc = c.layers[static_cast<std::size_t>(l)];

    Mat gy2 = cfg.layer_norm
                  ? layer_norm_backward(gx, lc.ln2, m.block(L.ln2_g), grad.block(L.ln2_g), grad.block(L.ln2_b))
                  : gx;
    Mat gf = lc.mask2.size() ? Mat(gy2.cwiseProduct(lc.mask2)) : gy2;
    Mat gz1 = cfg.residual ? gy2 : Mat::Zero(n, cfg.d_model);
    grad.block(L.ff2.w) += lc.ff_hidden.transpose() * gf;
    grad.block(L.ff2.b).row(0) += gf.colwise().sum();
    const Mat gh = (gf * m.block(L.ff2.w).transpose()).cwiseProduct(relu_mask(lc.ff_pre));
    grad.block(L.ff1.w) += lc.z1.transpose() * gh;
    grad.block(L.ff1.b).row(0) += gh.colwise().sum();
    gz1 += gh * m.block(L.ff1.w).transpose();

    Mat gy1 = cfg.layer_norm
                  ? layer_norm_backward(gz1, lc.ln1, m.block(L.ln1_g), grad.block(L.ln1_g), grad.block(L.ln1_b))
                  : gz1;
    Mat go = lc.mask1.size() ? Mat(gy1.cwiseProduct(lc.mask1)) : gy1;
    Mat gx_in = cfg.residual ? gy1 : Mat::Zero(n, cfg.d_model);
    grad.block(L.wo) += lc.concat.transpose() * go;
    const Mat gconcat = go * m.block(L.wo).transpose();

    Mat gq(n, cfg.d_model), gk(n, cfg.d_model), gv(n, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Mat& a = lc.attn[static_cast<std::size_t>(h)];
      const Mat gh_out = gconcat.middleCols(h * dk, dk);
      const Mat ga = gh_out * lc.v.middleCols(h * dk, dk).transpose();
      gv.middleCols(h * dk, dk) = a.transpose() * gh_out;
      const Vec rowdot = (ga.array() * a.array()).rowwise().sum();
      const Mat gs = (a.array() * (ga.array().colwise() - rowdot.array())).matrix() * inv_sqrt_dk;
      gq.middleCols(h * dk, dk) = gs * lc.k.middleCols(h * dk, dk);
      gk.middleCols(h * dk, dk) = gs.transpose() * lc.q.middleCols(h * dk, dk);
    }
    grad.block(L.wq) += lc.x.transpose() * gq;
    grad.block(L.wk) += lc.x.transpose() * gk;
    grad.block(L.wv) += lc.x.transpose() * gv;
    gx_in += gq * m.block(L.wq).transpose() + gk * m.block(L.wk).transpose() + gv * m.block(L.wv).transpose();
    gx = std::move(gx_in);
  }

  // x0 = diag(scale) emb
  const Vec gscale = (gx.array() * c.emb.array()).rowwise().sum();
  Mat gpre(n, 1);
  for (Eigen::Index j = 0; j < n; ++j) gpre(j, 0) = gscale(j) * c.scale(j) * (1.0 - c.scale(j));
  mlp_backward(m, ix.rss, c.rss, gpre, grad);
  return c.scale.asDiagonal() * gx;
}

// ---------------------------------------------------------------------------
// CNN over the distribution map window
// ---------------------------------------------------------------------------

struct CnnCache {
  Mat z1, a1;     // positions1 x channels
  Mat p2;         // positions2 x (k2^2 * channels)
  Mat z2;         // positions2 x channels
  RowVec flat;    // position-major, channel-minor
};

Mat im2col2(const Mat& a1, const CnnConfig& c) {
  const int o1 = c.out1(), o2 = c.out2(), k = c.kernel2, ch = c.channels;
  Mat p(o2 * o2, k * k * ch);
  for (int oy = 0; oy < o2; ++oy) {
    for (int ox = 0; ox < o2; ++ox) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int src = (oy * c.stride2 + ky) * o1 + (ox * c.stride2 + kx);
          p.block(oy * o2 + ox, (ky * k + kx) * ch, 1, ch) = a1.row(src);
        }
      }
    }
  }
  return p;
}

Mat col2im2(const Mat& gp, const CnnConfig& c) {
  const int o1 = c.out1(), o2 = c.out2(), k = c.kernel2, ch = c.channels;
  Mat g = Mat::Zero(o1 * o1, ch);
  for (int oy = 0; oy < o2; ++oy) {
    for (int ox = 0; ox < o2; ++ox) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int dst = (oy * c.stride2 + ky) * o1 + (ox * c.stride2 + kx);
          g.row(dst) += gp.block(oy * o2 + ox, (ky * k + kx) * ch, 1, ch);
        }
      }
    }
  }
  return g;
}

RowVec cnn_forward(const LocalizerModel& m, const Mat& patches, CnnCache* cache) {
  const CnnConfig& c = m.config().cnn;
  const ModelIdx& ix = m.idx();
  Mat z1 = (patches * m.block(ix.conv1.w)).rowwise() + m.block(ix.conv1.b).row(0);
  Mat a1 = relu(z1);
  Mat p2 = im2col2(a1, c);
  Mat z2 = (p2 * m.block(ix.conv2.w)).rowwise() + m.block(ix.conv2.b).row(0);
  const Mat a2 = relu(z2);
  RowVec flat(c.flat());
  for (Eigen::Index pos = 0; pos < a2.rows(); ++pos) flat.segment(pos * c.channels, c.channels) = a2.row(pos);
  RowVec e = flat * m.block(ix.proj.w) + m.block(ix.proj.b).row(0);
  if (cache) {
    cache->z1 = std::move(z1);
    cache->a1 = std::move(a1);
    cache->p2 = std::move(p2);
    cache->z2 = std::move(z2);
    cache->flat = std::move(flat);
  }
  return e;
}

void cnn_backward(const LocalizerModel& m, const Mat& patches, const CnnCache& cc, const RowVec& ge,
                  GradView& grad) {
  const CnnConfig& c = m.config().cnn;
  const ModelIdx& ix = m.idx();
  grad.block(ix.proj.w) += cc.flat.transpose() * ge;
  grad.block(ix.proj.b).row(0) += ge;
  const RowVec gflat = ge * m.block(ix.proj.w).transpose();
  Mat gz2(cc.z2.rows(), c.channels);
  for (Eigen::Index pos = 0; pos < gz2.rows(); ++pos) gz2.row(pos) = gflat.segment(pos * c.channels, c.channels);
  gz2 = gz2.cwiseProduct(relu_mask(cc.z2));
  grad.block(ix.conv2.w) += cc.p2.transpose() * gz2;
  grad.block(ix.conv2.b).row(0) += gz2.colwise().sum();
  const Mat gz1 = col2im2(gz2 * m.block(ix.conv2.w).transpose(), c).cwiseProduct(relu_mask(cc.z1));
  grad.block(ix.conv1.w) += patches.transpose() * gz1;
  grad.block(ix.conv1.b).row(0) += gz1.colwise().sum();
}

void check_finite(const ParamLayout& layout, const Vec& g) {
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g(i))) {
      throw NumericError("non-finite gradient in block '" +
                         layout.block(layout.block_of(static_cast<std::size_t>(i))).name + "'");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and layout
// ---------------------------------------------------------------------------

void LocalizerConfig::validate() const {
  if (d_model < 8) throw ValidationError("d_model must be at least 8");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw ValidationError("d_model must be divisible by n_heads");
  if (n_layers < 1) throw ValidationError("n_layers must be at least 1");
  if (d_ff < 1) throw ValidationError("d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
  if (cnn.window < cnn.kernel1 || cnn.out1() < cnn.kernel2 || cnn.out2() < 1)
    throw ValidationError("CNN kernels do not fit the input window");
  if (cnn.channels < 1) throw ValidationError("CNN channel count must be positive");
  for (int w : rss_hidden)
    if (w < 1) throw ValidationError("rss_hidden widths must be positive");
  for (int w : head_hidden)
    if (w < 1) throw ValidationError("head_hidden widths must be positive");
  if (!(sigma_floor > 0.0 && sigma_floor < 1.0)) throw ValidationError("sigma_floor must be in (0, 1)");
  if (!(map_cell_size > 0.0)) throw ValidationError("map_cell_size must be positive");
}

LocalizerConfig LocalizerConfig::from_config(const KeyValueConfig& cfg) {
  LocalizerConfig c;
  c.d_model = static_cast<int>(cfg.get_int("d_model", c.d_model));
  c.n_layers = static_cast<int>(cfg.get_int("n_layers", c.n_layers));
  c.n_heads = static_cast<int>(cfg.get_int("n_heads", c.n_heads));
  c.d_ff = static_cast<int>(cfg.get_int("d_ff", c.d_ff));
  c.dropout = cfg.get_double("dropout", c.dropout);
  if (auto v = cfg.find("head_hidden")) c.head_hidden = parse_int_list(*v);
  if (auto v = cfg.find("rss_hidden")) c.rss_hidden = parse_int_list(*v);
  c.sigma_floor = cfg.get_double("sigma_floor", c.sigma_floor);
  c.residual = cfg.get_bool("residual", c.residual);
  c.layer_norm = cfg.get_bool("layer_norm", c.layer_norm);
  c.map_cell_size = cfg.get_double("map_cell_size", c.map_cell_size);
  c.cnn.standardize = cfg.get_bool("map_standardize", c.cnn.standardize);
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(c.seed)));
  c.validate();
  return c;
}

int ParamLayout::add(std::string name, int rows, int cols) {
  blocks_.push_back({std::move(name), size_, rows, cols});
  size_ += blocks_.back().size();
  return static_cast<int>(blocks_.size()) - 1;
}

int ParamLayout::block_of(std::size_t offset) const {
  auto it = std::upper_bound(blocks_.begin(), blocks_.end(), offset,
                             [](std::size_t o, const ParamBlock& b) { return o < b.offset; });
  return static_cast<int>(it - blocks_.begin()) - 1;
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

namespace {

void standardize_window(std::vector<double>& win) {
  const double n = static_cast<double>(win.size());
  double mean = 0.0;
  for (double v : win) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : win) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : win) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
}

}  // namespace

MacInputs::MacInputs(const RssDistributionMaps& maps, const CnnConfig& cnn) : macs_(maps.mac_table()) {
  const GridGeometry& g = maps.geometry();
  const int w = cnn.window, k = cnn.kernel1, o1 = cnn.out1();
  for (int a = 0; a < maps.size(); ++a) {
    std::vector<double> win = resample_max(maps.grid(a), g.rows, g.cols, w);
    if (cnn.standardize) standardize_window(win);
    Mat p(o1 * o1, k * k);
    for (int oy = 0; oy < o1; ++oy) {
      for (int ox = 0; ox < o1; ++ox) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            p(oy * o1 + ox, ky * k + kx) =
                win[static_cast<std::size_t>(oy * cnn.stride1 + ky) * w + (ox * cnn.stride1 + kx)];
          }
        }
      }
    }
    windows_.push_back(std::move(win));
    patches_.push_back(std::move(p));
  }
}

TokenSet tokenize(const Fingerprint& fp, const MacTable& table) {
  std::vector<std::pair<int, double>> items;
  items.reserve(fp.entries.size());
  for (const auto& obs : fp.entries) {
    if (auto idx = table.find(obs.mac)) items.emplace_back(*idx, normalize_rss(obs.rss));
  }
  std::sort(items.begin(), items.end());
  TokenSet t;
  for (const auto& [m, r] : items) {
    t.macs.push_back(m);
    t.rss.push_back(r);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

LocalizerModel::LocalizerModel(LocalizerConfig config) : config_(std::move(config)) {
  config_.validate();
  const CnnConfig& c = config_.cnn;
  const int d = config_.d_model;
  std::vector<int> fan_in;
  auto linear = [&](const std::string& name, int in, int out) {
    LinearIdx li{layout_.add(name + ".w", in, out), layout_.add(name + ".b", 1, out)};
    fan_in.push_back(in);
    fan_in.push_back(in);
    return li;
  };
  auto mlp = [&](const std::string& name, int in, const std::vector<int>& hidden, int out) {
    std::vector<LinearIdx> layers;
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers.push_back(linear(name + "." + std::to_string(i), prev, hidden[i]));
      prev = hidden[i];
    }
    layers.push_back(linear(name + "." + std::to_string(hidden.size()), prev, out));
    return layers;
  };
  auto square = [&](const std::string& name) {
    fan_in.push_back(d);
    return layout_.add(name, d, d);
  };
  auto gain = [&](const std::string& name) {
    fan_in.push_back(0);  // constant init
    return layout_.add(name, 1, d);
  };

  idx_.conv1 = linear("cnn.conv1", c.kernel1 * c.kernel1, c.channels);
  idx_.conv2 = linear("cnn.conv2", c.kernel2 * c.kernel2 * c.channels, c.channels);
  idx_.proj = linear("cnn.proj", c.flat(), d);
  idx_.rss = mlp("rss", 1, config_.rss_hidden, 1);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    EncoderLayerIdx L;
    L.wq = square(p + "wq");
    L.wk = square(p + "wk");
    L.wv = square(p + "wv");
    L.wo = square(p + "wo");
    L.ff1 = linear(p + "ff1", d, config_.d_ff);
    L.ff2 = linear(p + "ff2", config_.d_ff, d);
    L.ln1_g = gain(p + "ln1.g");
    L.ln1_b = gain(p + "ln1.b");
    L.ln2_g = gain(p + "ln2.g");
    L.ln2_b = gain(p + "ln2.b");
    idx_.layers.push_back(L);
  }
  idx_.mu = mlp("mu", d, config_.head_hidden, 2);
  idx_.sigma = mlp("sigma", d, config_.head_hidden, 1);

  params_ = Vec::Zero(static_cast<Eigen::Index>(layout_.size()));
  Rng rng = make_rng(config_.seed, {0x1417});
  for (std::size_t b = 0; b < layout_.blocks().size(); ++b) {
    const ParamBlock& blk = layout_.blocks()[b];
    const bool is_gain = blk.name.size() > 2 && blk.name.compare(blk.name.size() - 2, 2, ".g") == 0;
    for (std::size_t i = 0; i < blk.size(); ++i) {
      double v = 0.0;
      if (is_gain) {
        v = 1.0;
      } else if (fan_in[b] > 0) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in[b]));
        v = uniform(rng, -bound, bound);
      }
      params_(static_cast<Eigen::Index>(blk.offset + i)) = v;
    }
  }
}

void LocalizerModel::set_params(const Vec& p) {
  if (static_cast<std::size_t>(p.size()) != layout_.size())
    throw ValidationError("parameter vector has " + std::to_string(p.size()) + " entries, expected " +
                          std::to_string(layout_.size()));
  params_ = p;
}

RowVec LocalizerModel::mac_embedding(const MacInputs& inputs, int mac) const {
  return cnn_forward(*this, inputs.patches(mac), nullptr);
}

Mat LocalizerModel::mac_embeddings(const MacInputs& inputs) const {
  Mat e(inputs.size(), config_.d_model);
  for (int a = 0; a < inputs.size(); ++a) e.row(a) = mac_embedding(inputs, a);
  return e;
}

Vec LocalizerModel::rss_scale(std::span<const double> rss_normalized) const {
  Mat r(static_cast<Eigen::Index>(rss_normalized.size()), 1);
  for (std::size_t j = 0; j < rss_normalized.size(); ++j) r(static_cast<Eigen::Index>(j), 0) = rss_normalized[j];
  const Mat pre = mlp_forward(*this, idx_.rss, r, nullptr);
  Vec s(pre.rows());
  for (Eigen::Index j = 0; j < pre.rows(); ++j) s(j) = sigmoid(pre(j, 0));
  return s;
}

Mat LocalizerModel::embed_fingerprint(const Fingerprint& fp, const MacInputs& inputs) const {
  std::vector<int> macs;
  std::vector<double> rss;
  for (const auto& obs : fp.entries) {
    if (auto idx = inputs.mac_table().find(obs.mac)) {
      macs.push_back(*idx);
      rss.push_back(normalize_rss(obs.rss));
    }
  }
  if (macs.empty()) throw EmptyFingerprintError("fingerprint has no known MAC");
  const Vec s = rss_scale(rss);
  Mat tokens(static_cast<Eigen::Index>(macs.size()), config_.d_model);
  for (std::size_t j = 0; j < macs.size(); ++j) {
    tokens.row(static_cast<Eigen::Index>(j)) = s(static_cast<Eigen::Index>(j)) * mac_embedding(inputs, macs[j]);
  }
  return tokens;
}

Prediction LocalizerModel::forward(const TokenSet& tokens, const Mat& embeddings) const {
  return forward_example(*this, tokens, embeddings, Masks{}, nullptr);
}

Prediction LocalizerModel::forward(const Fingerprint& fp, const MacInputs& inputs) const {
  const TokenSet t = tokenize(fp, inputs.mac_table());
  if (t.macs.empty()) throw EmptyFingerprintError("fingerprint has no known MAC");
  Mat emb = Mat::Zero(inputs.size(), config_.d_model);
  for (int m : t.macs) emb.row(m) = mac_embedding(inputs, m);
  return forward(t, emb);
}

// ---------------------------------------------------------------------------
// Attention primitives
// ---------------------------------------------------------------------------

Mat softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const RowVec e = (logits.row(i).array() - mx).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

Mat attention_head(const Mat& E, const Mat& Wq, const Mat& Wk, const Mat& Wv) {
  const Mat q = E * Wq, k = E * Wk;
  const Mat a = softmax_rows(q * k.transpose() / std::sqrt(static_cast<double>(Wq.cols())));
  return a * (E * Wv);
}

Mat multi_head(const Mat& E, const Mat& Wq, const Mat& Wk, const Mat& Wv, const Mat& Wo,
               int n_heads) {
  const Eigen::Index dk = Wq.cols() / n_heads;
  Mat concat(E.rows(), Wq.cols());
  for (int h = 0; h < n_heads; ++h) {
    concat.middleCols(h * dk, dk) =
        attention_head(E, Wq.middleCols(h * dk, dk), Wk.middleCols(h * dk, dk), Wv.middleCols(h * dk, dk));
  }
  return concat * Wo;
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

double uncertainty_loss(const Eigen::Vector2d& mu, double sigma, const Eigen::Vector2d& target) {
  return (mu - target).norm() / sigma + std::log(sigma);
}

namespace {

Masks example_masks(std::optional<std::uint64_t> seed, std::size_t i) {
  if (!seed) return {};
  return {true, derive_seed(*seed, {static_cast<std::uint64_t>(i)})};
}

std::vector<int> used_macs(std::span<const TrainingExample> batch) {
  std::vector<int> used;
  for (const auto& ex : batch) used.insert(used.end(), ex.tokens.macs.begin(), ex.tokens.macs.end());
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  return used;
}

}  // namespace

BatchResult loss_and_gradient(const LocalizerModel& model, const MacInputs& inputs,
                              std::span<const TrainingExample> batch,
                              std::optional<std::uint64_t> dropout_seed) {
  if (batch.empty()) throw ValidationError("empty training batch");
  const int d = model.config().d_model;
  const std::vector<int> used = used_macs(batch);

  Mat emb = Mat::Zero(inputs.size(), d);
  std::vector<CnnCache> cnn(static_cast<std::size_t>(inputs.size()));
  for (int m : used) emb.row(m) = cnn_forward(model, inputs.patches(m), &cnn[static_cast<std::size_t>(m)]);

  BatchResult res;
  res.grad = Vec::Zero(static_cast<Eigen::Index>(model.layout().size()));
  GradView grad(model.layout(), res.grad);
  Mat gemb = Mat::Zero(inputs.size(), d);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainingExample& ex = batch[i];
    ExampleCache cache;
    const Prediction p = forward_example(model, ex.tokens, emb, example_masks(dropout_seed, i), &cache);
    const Eigen::Vector2d diff = p.mu - ex.target;
    const double e = diff.norm();
    res.loss += (e / p.sigma + std::log(p.sigma)) * inv_b;
    const Eigen::Vector2d gmu = e > 0.0 ? Eigen::Vector2d(diff / (e * p.sigma) * inv_b) : Eigen::Vector2d::Zero();
    const double gsigma = (-e / (p.sigma * p.sigma) + 1.0 / p.sigma) * inv_b;
    const Mat gx = backward_example(model, cache, p, gmu, gsigma, grad);
    for (std::size_t j = 0; j < ex.tokens.macs.size(); ++j) {
      gemb.row(ex.tokens.macs[j]) += gx.row(static_cast<Eigen::Index>(j));
    }
    res.predictions.push_back(p);
  }
  for (int m : used) cnn_backward(model, inputs.patches(m), cnn[static_cast<std::size_t>(m)], gemb.row(m), grad);
  check_finite(model.layout(), res.grad);
  return res;
}

double batch_loss(const LocalizerModel& model, const MacInputs& inputs,
                  std::span<const TrainingExample> batch,
                  std::optional<std::uint64_t> dropout_seed) {
  if (batch.empty()) throw ValidationError("empty training batch");
  Mat emb = Mat::Zero(inputs.size(), model.config().d_model);
  for (int m : used_macs(batch)) emb.row(m) = model.mac_embedding(inputs, m);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Prediction p = forward_example(model, batch[i].tokens, emb, example_masks(dropout_seed, i), nullptr);
    loss += uncertainty_loss(p.mu, p.sigma, batch[i].target) / static_cast<double>(batch.size());
  }
  return loss;
}

std::vector<std::uint8_t> activation_pattern(const LocalizerModel& model, const MacInputs& inputs,
                                             std::span<const TrainingExample> batch,
                                             std::optional<std::uint64_t> dropout_seed) {
  std::vector<std::uint8_t> pattern;
  g_trace = &pattern;
  try {
    batch_loss(model, inputs, batch, dropout_seed);
  } catch (...) {
    g_trace = nullptr;
    throw;
  }
  g_trace = nullptr;
  return pattern;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

WifiLocalizer::WifiLocalizer(LocalizerModel model, MacInputs inputs, CoordinateTransform transform)
    : model_(std::move(model)), inputs_(std::move(inputs)), transform_(transform) {
  embeddings_ = model_.mac_embeddings(inputs_);
}

Prediction WifiLocalizer::predict_normalized(const Fingerprint& fp) const {
  const TokenSet t = tokenize(fp, inputs_.mac_table());
  if (t.macs.empty()) throw EmptyFingerprintError("fingerprint has no known MAC");
  return model_.forward(t, embeddings_);
}

GaussianLocation WifiLocalizer::localize(const Fingerprint& fp) const {
  const Prediction p = predict_normalized(fp);
  return {transform_.denormalize({p.mu(0), p.mu(1)}), p.sigma * transform_.mean_extent()};
}

void export_embeddings(const LocalizerModel& model, const MacInputs& inputs, std::ostream& out) {
  out << "mac";
  for (int k = 0; k < model.config().d_model; ++k) out << ",e" << k;
  out << '\n';
  const Mat e = model.mac_embeddings(inputs);
  for (int a = 0; a < inputs.size(); ++a) {
    out << inputs.mac_table().at(a).str();
    for (Eigen::Index k = 0; k < e.cols(); ++k) out << ',' << format_double(e(a, k));
    out << '\n';
  }
}

}  // namespace wifiloc::nn

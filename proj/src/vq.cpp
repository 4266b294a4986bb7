#include "volrep/vq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace volrep::vq {

namespace {

using Indices = std::shared_ptr<const std::vector<std::int32_t>>;

constexpr Shape3 kKernel1{4, 4, 2};
constexpr Shape3 kKernel2{2, 2, 2};

std::size_t flat3(const Shape3& s, int i, int j, int k) { return (static_cast<std::size_t>(i) * s.d1 + j) * s.d2 + k; }

// Patch gather for the first convolution: row (b, g1), column kernel voxel.
Indices conv1_index(int batch, const Shape3& patch, const Shape3& g1) {
  auto idx = std::make_shared<std::vector<std::int32_t>>();
  idx->reserve(static_cast<std::size_t>(batch) * patch.size());
  const auto n = static_cast<std::int32_t>(patch.size());
  for (int b = 0; b < batch; ++b) {
    for (int a0 = 0; a0 < g1.d0; ++a0)
      for (int a1 = 0; a1 < g1.d1; ++a1)
        for (int a2 = 0; a2 < g1.d2; ++a2)
          for (int u0 = 0; u0 < kKernel1.d0; ++u0)
            for (int u1 = 0; u1 < kKernel1.d1; ++u1)
              for (int u2 = 0; u2 < kKernel1.d2; ++u2) {
                const auto v = flat3(patch, a0 * kKernel1.d0 + u0, a1 * kKernel1.d1 + u1, a2 * kKernel1.d2 + u2);
                idx->push_back(b * n + static_cast<std::int32_t>(v));
              }
  }
  return idx;
}

// Row (b, g2), column (kernel position w, channel c) over the (b, g1) x c1 map.
Indices conv2_index(int batch, const Shape3& g1, const Shape3& g2, int c1) {
  auto idx = std::make_shared<std::vector<std::int32_t>>();
  const auto n1 = static_cast<std::int32_t>(g1.size());
  for (int b = 0; b < batch; ++b) {
    for (int a0 = 0; a0 < g2.d0; ++a0)
      for (int a1 = 0; a1 < g2.d1; ++a1)
        for (int a2 = 0; a2 < g2.d2; ++a2)
          for (int w0 = 0; w0 < kKernel2.d0; ++w0)
            for (int w1 = 0; w1 < kKernel2.d1; ++w1)
              for (int w2 = 0; w2 < kKernel2.d2; ++w2) {
                const auto p1 = static_cast<std::int32_t>(
                    flat3(g1, a0 * kKernel2.d0 + w0, a1 * kKernel2.d1 + w1, a2 * kKernel2.d2 + w2));
                for (int c = 0; c < c1; ++c) idx->push_back((b * n1 + p1) * c1 + c);
              }
  }
  return idx;
}

// Inverse layouts for the decoder: position-major maps back to grid order.
Indices invert(const std::vector<std::int32_t>& forward) {
  auto inv = std::make_shared<std::vector<std::int32_t>>(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) (*inv)[static_cast<std::size_t>(forward[i])] = static_cast<std::int32_t>(i);
  return inv;
}

double cosine(const Matrix& a, const Matrix& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  return a.cwiseProduct(b).sum() / (na * nb);
}

}  // namespace

io::json VqConfig::to_json() const {
  return {{"patch", {patch.d0, patch.d1, patch.d2}},
          {"codebook_size", codebook_size},
          {"code_dim", code_dim},
          {"channels1", channels1},
          {"channels2", channels2},
          {"beta", beta},
          {"permute", permute},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"seed", seed},
          {"reseed_every", reseed_every},
          {"collapse_window", collapse_window},
          {"collapse_fraction", collapse_fraction},
          {"eval_every", eval_every},
          {"quantized_latents", quantized_latents}};
}

VqConfig VqConfig::from_json(const io::json& j) {
  VqConfig c;
  const auto p = j.at("patch");
  c.patch = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
  c.codebook_size = j.at("codebook_size").get<int>();
  c.code_dim = j.at("code_dim").get<int>();
  c.channels1 = j.at("channels1").get<int>();
  c.channels2 = j.at("channels2").get<int>();
  c.beta = j.at("beta").get<double>();
  c.permute = j.at("permute").get<bool>();
  c.steps = j.at("steps").get<long>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.reseed_every = j.at("reseed_every").get<long>();
  c.collapse_window = j.at("collapse_window").get<long>();
  c.collapse_fraction = j.at("collapse_fraction").get<double>();
  c.eval_every = j.at("eval_every").get<long>();
  c.quantized_latents = j.value("quantized_latents", c.quantized_latents);
  return c;
}

QuantizeResult quantize(const Matrix& latents, const Matrix& codebook) {
  if (codebook.rows() == 0) throw VqError("empty codebook");
  if (latents.cols() != codebook.cols()) throw VqError("latent and code dims differ");
  QuantizeResult r;
  r.indices.resize(static_cast<std::size_t>(latents.rows()));
  r.vectors.resize(latents.rows(), latents.cols());
  const auto dim = latents.cols();
  for (ad::Index i = 0; i < latents.rows(); ++i) {
    const double* z = latents.row(i).data();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (ad::Index k = 0; k < codebook.rows(); ++k) {
      const double* e = codebook.row(k).data();
      double d = 0.0;
      for (ad::Index c = 0; c < dim; ++c) {
        const double t = z[c] - e[c];
        d += t * t;
      }
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    r.indices[static_cast<std::size_t>(i)] = best;
    r.vectors.row(i) = codebook.row(best);
  }
  return r;
}

std::vector<float> canonical_voxels(const SubvolumeToken& t) {
  const auto order = tokens::canonical_order(t.shape);
  if (order == tokens::AxisOrder{1, 2, 3}) return t.voxels;
  return tokens::permute_token_axes(t, order).voxels;
}

VqModel::VqModel(const VqConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  const Shape3& p = cfg.patch;
  if (p[0] % (kKernel1.d0 * kKernel2.d0) || p[1] % (kKernel1.d1 * kKernel2.d1) || p[2] % (kKernel1.d2 * kKernel2.d2)) {
    throw VqError("canonical patch dims must be divisible by 8, 8 and 4");
  }
  if (cfg.codebook_size < 1 || cfg.code_dim < 1) throw VqError("codebook size and code dim must be positive");
  grid1_ = {p.d0 / kKernel1.d0, p.d1 / kKernel1.d1, p.d2 / kKernel1.d2};
  grid2_ = {grid1_.d0 / kKernel2.d0, grid1_.d1 / kKernel2.d1, grid1_.d2 / kKernel2.d2};
  const int k1 = static_cast<int>(kKernel1.size());
  const int k2 = static_cast<int>(kKernel2.size());
  const int flat = static_cast<int>(grid2_.size()) * cfg.channels2;
  const double relu_gain = std::sqrt(2.0);
  enc1_ = nn::Linear(k1, cfg.channels1, rng, true, relu_gain);
  enc2_ = nn::Linear(k2 * cfg.channels1, cfg.channels2, rng, true, relu_gain);
  enc3_ = nn::Linear(flat, cfg.code_dim, rng);
  dec3_ = nn::Linear(cfg.code_dim, flat, rng, true, relu_gain);
  dec2_ = nn::Linear(cfg.channels2, k2 * cfg.channels1, rng, true, relu_gain);
  dec1_ = nn::Linear(cfg.channels1, k1, rng);
  codebook_ = ad::parameter(nn::randn(cfg.codebook_size, cfg.code_dim, 1.0, rng));
  usage_.assign(static_cast<std::size_t>(cfg.codebook_size), 0);
}

void VqModel::reset_usage() { std::fill(usage_.begin(), usage_.end(), 0); }

Var VqModel::encode(const Var& x) const {
  if (x.cols() != voxels()) throw VqError("encoder input has wrong voxel count");
  if (!x.value().allFinite()) throw VqError("non-finite voxels in encoder input");
  const int batch = static_cast<int>(x.rows());
  const int k1 = static_cast<int>(kKernel1.size());
  const int k2 = static_cast<int>(kKernel2.size());
  const auto g1 = static_cast<ad::Index>(grid1_.size());
  const auto g2 = static_cast<ad::Index>(grid2_.size());
  auto p1 = ad::gather_flat(x, conv1_index(batch, cfg_.patch, grid1_), batch * g1, k1);
  auto h1 = ad::relu(enc1_(p1));
  auto p2 = ad::gather_flat(h1, conv2_index(batch, grid1_, grid2_, cfg_.channels1), batch * g2, k2 * cfg_.channels1);
  auto h2 = ad::relu(enc2_(p2));
  return enc3_(ad::reshape(h2, batch, g2 * cfg_.channels2));
}

Var VqModel::decode(const Var& q) const {
  if (q.cols() != cfg_.code_dim) throw VqError("decoder input has wrong width");
  const int batch = static_cast<int>(q.rows());
  const auto g1 = static_cast<ad::Index>(grid1_.size());
  const auto g2 = static_cast<ad::Index>(grid2_.size());
  auto h2 = ad::relu(dec3_(q));
  auto d2 = ad::relu(dec2_(ad::reshape(h2, batch * g2, cfg_.channels2)));
  // d2 rows are (b, g2) with columns (w, c); conv2_index maps exactly that
  // layout onto the (b, g1) x c grid, so its inverse undoes it.
  const auto fwd2 = conv2_index(batch, grid1_, grid2_, cfg_.channels1);
  auto h1 = ad::gather_flat(d2, invert(*fwd2), batch * g1, cfg_.channels1);
  auto d1 = dec1_(h1);
  const auto fwd1 = conv1_index(batch, cfg_.patch, grid1_);
  return ad::sigmoid(ad::gather_flat(d1, invert(*fwd1), batch, voxels()));
}

Matrix VqModel::stack(const std::vector<SubvolumeToken>& tokens) const {
  Matrix x(static_cast<ad::Index>(tokens.size()), voxels());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto v = canonical_voxels(tokens[i]);
    if (static_cast<int>(v.size()) != voxels()) throw VqError("token size does not match the patch");
    for (int c = 0; c < voxels(); ++c) x(static_cast<ad::Index>(i), c) = v[static_cast<std::size_t>(c)];
  }
  return x;
}

Matrix VqModel::encode_tokens(const std::vector<SubvolumeToken>& tokens) const {
  ad::NoGradGuard guard;
  Matrix out(static_cast<ad::Index>(tokens.size()), cfg_.code_dim);
  constexpr std::size_t chunk = 256;
  for (std::size_t s = 0; s < tokens.size(); s += chunk) {
    const std::vector<SubvolumeToken> part(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                                           tokens.begin() + static_cast<std::ptrdiff_t>(std::min(tokens.size(), s + chunk)));
    out.middleRows(static_cast<ad::Index>(s), static_cast<ad::Index>(part.size())) = encode(ad::constant(stack(part))).value();
  }
  return out;
}

std::vector<double> VqModel::vq_encode(const SubvolumeToken& token) const {
  const auto z = encode_tokens({token});
  return std::vector<double>(z.data(), z.data() + z.size());
}

Matrix VqModel::downstream_latents(const std::vector<SubvolumeToken>& tokens) const {
  const auto z = encode_tokens(tokens);
  return cfg_.quantized_latents ? quantize(z, codebook_.value()).vectors : z;
}

SubvolumeToken VqModel::vq_decode(const std::vector<double>& quantized, const Shape3& shape) const {
  if (static_cast<int>(quantized.size()) != cfg_.code_dim) throw VqError("latent width mismatch");
  ad::NoGradGuard guard;
  Matrix q(1, cfg_.code_dim);
  for (int c = 0; c < cfg_.code_dim; ++c) q(0, c) = quantized[static_cast<std::size_t>(c)];
  const auto x = decode(ad::constant(q)).value();
  SubvolumeToken t;
  t.shape = cfg_.patch;
  t.voxels.resize(static_cast<std::size_t>(voxels()));
  for (int c = 0; c < voxels(); ++c) t.voxels[static_cast<std::size_t>(c)] = static_cast<float>(x(0, c));
  const auto order = tokens::canonical_order(shape);
  if (tokens::permute_shape(shape, order) != cfg_.patch) throw VqError("requested shape is not a bucket shape");
  return tokens::permute_token_axes(t, tokens::inverse(order));
}

nn::ParamList VqModel::encoder_params() const {
  nn::ParamList out;
  enc1_.collect(out, "vq.enc1");
  enc2_.collect(out, "vq.enc2");
  enc3_.collect(out, "vq.enc3");
  return out;
}

nn::ParamList VqModel::params() const {
  auto out = encoder_params();
  dec3_.collect(out, "vq.dec3");
  dec2_.collect(out, "vq.dec2");
  dec1_.collect(out, "vq.dec1");
  out.push_back({"vq.codebook", codebook_});
  return out;
}

void VqModel::save(const std::filesystem::path& path, const io::json& extra) const {
  io::json meta = {{"kind", "vq"}, {"config", cfg_.to_json()}, {"usage", usage_}};
  if (!extra.is_null()) meta["extra"] = extra;
  io::save_archive(path, meta, params());
}

VqModel VqModel::load(const std::filesystem::path& path) {
  const auto archive = io::load_archive(path);
  if (archive.meta.value("kind", "") != "vq") throw io::IoError("not a VQ checkpoint: " + path.string());
  std::mt19937_64 rng(0);
  VqModel m(VqConfig::from_json(archive.meta.at("config")), rng);
  io::assign_params(archive, m.params());
  m.usage_ = archive.meta.at("usage").get<std::vector<long>>();
  return m;
}

// ---- training ----------------------------------------------------------

ValLog validate(const VqModel& model, const std::vector<SubvolumeToken>& tokens) {
  ValLog v;
  if (tokens.empty()) return v;
  ad::NoGradGuard guard;
  std::vector<char> used(static_cast<std::size_t>(model.config().codebook_size), 0);
  double recon = 0.0, quant = 0.0;
  std::size_t n = 0;
  for (const auto& order : tokens::all_axis_orders()) {
    std::vector<SubvolumeToken> views;
    for (const auto& t : tokens) views.push_back(tokens::permute_token_axes(t, order));
    const Matrix x = model.stack(views);
    const Matrix z = model.encode(ad::constant(x)).value();
    const auto q = quantize(z, model.codebook().value());
    for (int i : q.indices) used[static_cast<std::size_t>(i)] = 1;
    const Matrix xhat = model.decode(ad::constant(q.vectors)).value();
    recon += (xhat - x).squaredNorm() / static_cast<double>(x.cols());
    quant += (1.0 + model.config().beta) * (z - q.vectors).squaredNorm() / static_cast<double>(z.cols());
    n += views.size();
  }
  v.recon = recon / static_cast<double>(n);
  v.quant = quant / static_cast<double>(n);
  v.used_fraction = static_cast<double>(std::count(used.begin(), used.end(), 1)) / static_cast<double>(used.size());
  return v;
}

VqTrainResult train_vqvae(const std::vector<SubvolumeToken>& train_tokens, const std::vector<SubvolumeToken>& val_tokens,
                          const VqConfig& cfg) {
  if (train_tokens.empty()) throw VqError("no training tokens");
  std::mt19937_64 rng(cfg.seed);
  VqTrainResult result{VqModel(cfg, rng), {}, {}, {}};
  VqModel& model = result.model;

  const auto shapes = tokens::bucket_shapes(cfg.patch);
  std::vector<std::vector<std::size_t>> pools(shapes.size());
  for (std::size_t i = 0; i < train_tokens.size(); ++i) {
    pools[static_cast<std::size_t>(tokens::bucket_index(shapes, train_tokens[i].shape))].push_back(i);
  }
  std::vector<int> live;
  for (std::size_t b = 0; b < pools.size(); ++b) {
    if (!pools[b].empty()) live.push_back(static_cast<int>(b));
  }

  auto random_tokens = [&](std::size_t count) {
    std::uniform_int_distribution<std::size_t> pick(0, train_tokens.size() - 1);
    std::vector<SubvolumeToken> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(train_tokens[pick(rng)]);
    return out;
  };
  auto seed_codes = [&](const std::vector<int>& codes) {
    if (codes.empty()) return;
    const Matrix z = model.encode_tokens(random_tokens(codes.size()));
    const double spread = 0.01 * std::sqrt(z.array().square().mean());
    std::normal_distribution<double> noise(0.0, spread > 0 ? spread : 1e-3);
    auto& cb = model.codebook().mutable_value();
    for (std::size_t i = 0; i < codes.size(); ++i) {
      for (int c = 0; c < cfg.code_dim; ++c) cb(codes[i], c) = z(static_cast<ad::Index>(i), c) + noise(rng);
    }
  };

  // Codebook starts on encoder outputs so early steps already have live codes.
  std::vector<int> all_codes(static_cast<std::size_t>(cfg.codebook_size));
  std::iota(all_codes.begin(), all_codes.end(), 0);
  seed_codes(all_codes);

  nn::Adam opt(model.params(), {cfg.lr});
  std::vector<long> reseed_usage(static_cast<std::size_t>(cfg.codebook_size), 0);
  std::vector<long> window_usage(static_cast<std::size_t>(cfg.codebook_size), 0);

  for (long step = 1; step <= cfg.steps; ++step) {
    // Pick a native shape bucket, draw the batch from it, then (if enabled)
    // permute the whole stack with one random axis order.
    const int bucket = live[std::uniform_int_distribution<std::size_t>(0, live.size() - 1)(rng)];
    const auto& pool = pools[static_cast<std::size_t>(bucket)];
    tokens::AxisOrder order{1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<SubvolumeToken> batch;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int i = 0; i < cfg.batch_size; ++i) {
      const auto& t = train_tokens[pool[pick(rng)]];
      batch.push_back(cfg.permute ? tokens::permute_token_axes(t, order) : t);
    }

    const Var x = ad::constant(model.stack(batch));
    const Var z = model.encode(x);
    const auto q = quantize(z.value(), model.codebook().value());
    for (int i : q.indices) {
      ++model.usage()[static_cast<std::size_t>(i)];
      ++reseed_usage[static_cast<std::size_t>(i)];
      ++window_usage[static_cast<std::size_t>(i)];
    }
    const Var e = ad::gather_rows(model.codebook(), std::vector<std::int32_t>(q.indices.begin(), q.indices.end()));
    const Var zq = z + ad::detach(e - z);
    const Var recon = ad::mse(model.decode(zq), x);
    const Var codebook_term = ad::mse(ad::detach(z), e);
    const Var commit = ad::mse(z, ad::detach(e));
    const Var loss = recon + codebook_term + cfg.beta * commit;
    if (!std::isfinite(loss.item())) throw VqError("non-finite VQ loss at step " + std::to_string(step));
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
    result.train.push_back({step, loss.item(), recon.item(), codebook_term.item(), commit.item(), bucket});

    if (cfg.collapse_window > 0 && step % cfg.collapse_window == 0) {
      const auto dead = std::count(window_usage.begin(), window_usage.end(), 0L);
      const double frac = static_cast<double>(dead) / cfg.codebook_size;
      if (frac >= cfg.collapse_fraction) {
        result.events.push_back({{"step", step}, {"event", "codebook_collapse_warning"}, {"dead_fraction", frac}});
      }
      std::fill(window_usage.begin(), window_usage.end(), 0L);
    }
    if (cfg.reseed_every > 0 && step % cfg.reseed_every == 0 && step < cfg.steps) {
      std::vector<int> dead;
      for (int k = 0; k < cfg.codebook_size; ++k) {
        if (reseed_usage[static_cast<std::size_t>(k)] == 0) dead.push_back(k);
      }
      seed_codes(dead);
      if (!dead.empty()) result.events.push_back({{"step", step}, {"event", "reseed"}, {"codes", dead.size()}});
      std::fill(reseed_usage.begin(), reseed_usage.end(), 0L);
    }
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
      auto v = validate(model, val_tokens);
      v.step = step;
      result.val.push_back(v);
    }
  }
  return result;
}

void write_train_csv(const VqTrainResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io::IoError("cannot write " + path.string());
  out << std::setprecision(10) << "step,loss,recon,codebook,commit,bucket\n";
  for (const auto& s : r.train) {
    out << s.step << ',' << s.loss << ',' << s.recon << ',' << s.codebook << ',' << s.commit << ',' << s.bucket << '\n';
  }
}

void write_val_csv(const VqTrainResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io::IoError("cannot write " + path.string());
  out << std::setprecision(10) << "step,val_recon,val_quant,used_fraction\n";
  for (const auto& v : r.val) out << v.step << ',' << v.recon << ',' << v.quant << ',' << v.used_fraction << '\n';
}

InvarianceReport orientation_invariance_report(const VqModel& model, const std::vector<SubvolumeToken>& tokens) {
  InvarianceReport rep;
  ad::NoGradGuard guard;
  const auto& orders = tokens::all_axis_orders();
  double total = 0.0;
  for (std::size_t ti = 0; ti < tokens.size(); ++ti) {
    std::vector<SubvolumeToken> views;
    for (const auto& o : orders) views.push_back(tokens::permute_token_axes(tokens[ti], o));
    const Matrix z = model.encode(ad::constant(model.stack(views))).value();
    const auto q = quantize(z, model.codebook().value());
    const Matrix xhat = model.decode(ad::constant(q.vectors)).value();
    // Reconstructions back in the token's own layout.
    std::vector<std::vector<float>> restored;
    for (std::size_t v = 0; v < views.size(); ++v) {
      SubvolumeToken canon;
      canon.shape = model.config().patch;
      canon.voxels.resize(static_cast<std::size_t>(xhat.cols()));
      for (ad::Index c = 0; c < xhat.cols(); ++c) canon.voxels[static_cast<std::size_t>(c)] = static_cast<float>(xhat(static_cast<ad::Index>(v), c));
      const auto in_view = tokens::permute_token_axes(canon, tokens::inverse(tokens::canonical_order(views[v].shape)));
      restored.push_back(tokens::permute_token_axes(in_view, tokens::inverse(orders[v])).voxels);
    }
    TokenInvariance ti_rep;
    ti_rep.min_cosine = 1.0;
    double sum = 0.0;
    int pairs = 0;
    for (ad::Index a = 0; a < z.rows(); ++a) {
      for (ad::Index b = a + 1; b < z.rows(); ++b) {
        const double c = cosine(z.row(a), z.row(b));
        sum += c;
        ++pairs;
        ti_rep.min_cosine = std::min(ti_rep.min_cosine, c);
        ti_rep.max_latent_distance = std::max(ti_rep.max_latent_distance, (z.row(a) - z.row(b)).norm());
      }
      for (std::size_t b = 0; b < restored.size(); ++b) {
        for (std::size_t c = 0; c < restored[b].size(); ++c) {
          ti_rep.max_recon_difference = std::max(
              ti_rep.max_recon_difference, static_cast<double>(std::abs(restored[static_cast<std::size_t>(a)][c] - restored[b][c])));
        }
      }
    }
    ti_rep.mean_cosine = sum / pairs;
    total += ti_rep.mean_cosine;
    rep.per_token.push_back(ti_rep);
    if (ti == 0) {
      for (const auto& r : restored) {
        std::vector<float> diff(r.size());
        for (std::size_t c = 0; c < r.size(); ++c) diff[c] = std::abs(r[c] - restored[0][c]);
        rep.difference_maps.push_back(std::move(diff));
      }
    }
  }
  rep.mean_cosine = tokens.empty() ? 0.0 : total / static_cast<double>(tokens.size());
  return rep;
}

}  // namespace volrep::vq

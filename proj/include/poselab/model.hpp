#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poselab/geometry.hpp"
#include "poselab/io_util.hpp"
#include "poselab/rng.hpp"
#include "poselab/tape.hpp"

namespace poselab {

struct ModelConfig {
  int feature_dim = 32;    // D
  int num_keypoints = 16;  // K_kpt
  int num_groups = 1;      // G: number of correspondence branches
  std::map<int, char> capacity = {{1, 'H'}};  // group -> 'H' | 'L'
  int knn = 8;             // K_n neighbors for local aggregation
  int attn_heads = 2;      // low-branch attention heads
  int geo_dim = 16;        // low-branch geometric descriptor width
  int enc_hidden = 32;
  int head_hidden = 32;
  int dec_hidden = 64;
  int recon_points = 64;   // decoder output point count M

  void validate() const {
    if (feature_dim < 1 || num_keypoints < 2 || num_groups < 1 || knn < 1 ||
        geo_dim < 1 || enc_hidden < 1 || head_hidden < 1 || dec_hidden < 1 ||
        recon_points < 1)
      throw ConfigError("model config: nonpositive dimension");
    if (attn_heads < 1 || feature_dim % attn_heads != 0)
      throw ConfigError("model config: feature_dim must be divisible by attn_heads");
    if (static_cast<int>(capacity.size()) != num_groups)
      throw ConfigError("model config: capacity must cover groups 1..G");
    for (const auto& [g, c] : capacity) {
      if (g < 1 || g > num_groups)
        throw ConfigError("model config: capacity key " + std::to_string(g) +
                          " outside 1..G");
      if (c != 'H' && c != 'L')
        throw ConfigError("model config: capacity must be 'H' or 'L'");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json cap = nlohmann::json::object();
    for (const auto& [g, c] : capacity) cap[std::to_string(g)] = std::string(1, c);
    return {{"feature_dim", feature_dim}, {"num_keypoints", num_keypoints},
            {"num_groups", num_groups},   {"capacity", cap},
            {"knn", knn},                 {"attn_heads", attn_heads},
            {"geo_dim", geo_dim},         {"enc_hidden", enc_hidden},
            {"head_hidden", head_hidden}, {"dec_hidden", dec_hidden},
            {"recon_points", recon_points}};
  }

  // fields default when absent; validate() still guards the combination
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.feature_dim = j.value("feature_dim", c.feature_dim);
      c.num_keypoints = j.value("num_keypoints", c.num_keypoints);
      c.num_groups = j.value("num_groups", c.num_groups);
      c.knn = j.value("knn", c.knn);
      c.attn_heads = j.value("attn_heads", c.attn_heads);
      c.geo_dim = j.value("geo_dim", c.geo_dim);
      c.enc_hidden = j.value("enc_hidden", c.enc_hidden);
      c.head_hidden = j.value("head_hidden", c.head_hidden);
      c.dec_hidden = j.value("dec_hidden", c.dec_hidden);
      c.recon_points = j.value("recon_points", c.recon_points);
      if (j.contains("capacity")) {
        c.capacity.clear();
        for (const auto& [k, v] : j.at("capacity").items())
          c.capacity[std::stoi(k)] = v.get<std::string>().at(0);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }

  std::uint32_t hash() const { return crc32_of(to_json().dump()); }
};

// deterministic kNN: ties broken toward the lower point index. If margin is
// given it receives the smallest gap between the k-th and (k+1)-th neighbor
// distance over all queries (used to detect selection-boundary kinks).
inline std::vector<int> knn_indices(const Tensor& queries, const Tensor& pts,
                                    int k, double* margin = nullptr) {
  const int nq = queries.shape[0], np = pts.shape[0];
  if (k > np) throw ShapeError("knn: k exceeds point count");
  std::vector<int> out;
  out.reserve(static_cast<size_t>(nq) * k);
  if (margin) *margin = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, int>> d(static_cast<size_t>(np));
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < np; ++j) {
      double acc = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double diff = queries.at(i, a) - pts.at(j, a);
        acc += diff * diff;
      }
      d[j] = {acc, j};
    }
    std::sort(d.begin(), d.end());
    for (int j = 0; j < k; ++j) out.push_back(d[j].second);
    if (margin && k < np)
      *margin = std::min(*margin, std::sqrt(d[k].first) - std::sqrt(d[k - 1].first));
  }
  return out;
}

struct KeypointExtraction {
  Value weights;    // [K, N] row-stochastic correspondence
  Value kpt_xyz;    // [K, 3]
  Value kpt_feat;   // [K, D]
};

struct BranchOutput {
  KeypointExtraction ext;
  Value fhat;       // [K, D] refined keypoint features
  Value nocs;       // [K, 3] predicted canonical coordinates
  int group = 1;
  double knn_margin = 0.0;
};

struct PosePrediction {
  Value rot;    // [3,3]
  Value raw6;   // [6] pre-orthogonalization
  Value trans;  // [3]
  Value scale;  // [3]
  bool degenerate = false;
};

namespace detail {

inline Value linear(Tape& t, const ParamStore& s, Value x,
                    const std::string& prefix) {
  return add(matmul(x, t.param(s, prefix + ".w")), t.param(s, prefix + ".b"));
}

inline Value mlp2(Tape& t, const ParamStore& s, Value x,
                  const std::string& prefix) {
  return linear(t, s, relu(linear(t, s, x, prefix + ".0")), prefix + ".1");
}

// replicate each of k rows n times: [0,0,...,1,1,...]
inline std::vector<int> repeat_index(int k, int n) {
  std::vector<int> idx(static_cast<size_t>(k) * n);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j) idx[static_cast<size_t>(i) * n + j] = i;
  return idx;
}

// [k, k*n] averaging matrix: row i averages the i-th contiguous group of n
inline Tensor eye3(double v) {
  Tensor t = Tensor::zeros({3, 3});
  t.at(0, 0) = t.at(1, 1) = t.at(2, 2) = v;
  return t;
}

// 3x3 symmetric Jacobi eigendecomposition; eigenvectors in columns of v
inline void jacobi3(double a[3][3], double w[3], double v[3][3]) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) v[i][j] = i == j ? 1.0 : 0.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    const double off =
        std::fabs(a[0][1]) + std::fabs(a[0][2]) + std::fabs(a[1][2]);
    if (off < 1e-15) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (std::fabs(a[p][q]) < 1e-18) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (int k = 0; k < 3; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (int k = 0; k < 3; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (int k = 0; k < 3; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
  }
  for (int i = 0; i < 3; ++i) w[i] = a[i][i];
}

struct InputFrame {
  Tensor axes;  // [3,3] estimated canonical axes as columns [x,y,z], det +1
  Tensor stats; // [1,12] per-axis sigma, skewness, +/- polar cap radii
};

// deterministic orientation frame for the observed cloud. PCA supplies axis
// directions; the labeling comes from the generator's shape markers. The +z
// polar dimple is a radius deficit and the one-sided +x bulge a radius
// excess, both measured as the mean cap radius of the whitened cloud around
// each signed eigenvector. A joint argmax over (dent, bulge) candidate pairs
// picks the labeling and y completes the right-handed frame. The stats row
// carries the evidence so downstream layers can weigh ambiguous cases.
inline InputFrame input_frame(const Tensor& pts) {
  const int n = pts.shape[0];
  double m[3] = {0, 0, 0};
  for (int r = 0; r < n; ++r)
    for (int a = 0; a < 3; ++a) m[a] += pts.at(r, a) / n;
  double cov[3][3] = {};
  for (int r = 0; r < n; ++r)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        cov[a][b] += (pts.at(r, a) - m[a]) * (pts.at(r, b) - m[b]) / n;
  double w[3], v[3][3];
  jacobi3(cov, w, v);
  std::vector<double> q(static_cast<size_t>(3) * n), qn(n);
  for (int r = 0; r < n; ++r) {
    double s = 0.0;
    for (int j = 0; j < 3; ++j) {
      double p = 0.0;
      for (int a = 0; a < 3; ++a) p += v[a][j] * (pts.at(r, a) - m[a]);
      q[3 * r + j] = p / std::sqrt(std::max(w[j], 1e-18));
      s += q[3 * r + j] * q[3 * r + j];
    }
    qn[r] = std::sqrt(s);
  }
  std::vector<double> buf = qn;
  std::nth_element(buf.begin(), buf.begin() + n / 2, buf.end());
  const double med = std::max(buf[n / 2], 1e-12);
  double cv[3][2];
  int cn[3][2];
  for (int j = 0; j < 3; ++j) cn[j][0] = cn[j][1] = 0;
  for (int j = 0; j < 3; ++j) cv[j][0] = cv[j][1] = 0.0;
  for (int r = 0; r < n; ++r) {
    if (qn[r] < 1e-12) continue;
    for (int j = 0; j < 3; ++j) {
      const double ca = q[3 * r + j] / qn[r];
      if (ca > 0.85) { cv[j][0] += qn[r]; ++cn[j][0]; }
      if (-ca > 0.85) { cv[j][1] += qn[r]; ++cn[j][1]; }
    }
  }
  for (int j = 0; j < 3; ++j)
    for (int sg = 0; sg < 2; ++sg)
      cv[j][sg] = cn[j][sg] >= 5 ? cv[j][sg] / cn[j][sg] / med : 1.0;
  double gam[3];
  for (int j = 0; j < 3; ++j) {
    double mu2 = 0.0, mu3 = 0.0;
    for (int r = 0; r < n; ++r) {
      const double p = q[3 * r + j];
      mu2 += p * p / n;
      mu3 += p * p * p / n;
    }
    gam[j] = mu2 > 0.0 ? mu3 / std::pow(mu2, 1.5) : 0.0;
  }
  int jz = 0, szi = 0, jx = 1, sxi = 0;
  double best = -1e18;
  for (int a = 0; a < 3; ++a)
    for (int sa = 0; sa < 2; ++sa)
      for (int b = 0; b < 3; ++b)
        for (int sb = 0; sb < 2; ++sb) {
          if (a == b) continue;
          const double sc = cv[b][sb] - cv[a][sa];
          if (sc > best) { best = sc; jz = a; szi = sa; jx = b; sxi = sb; }
        }
  const double sz = szi == 0 ? 1.0 : -1.0;
  const double sx = sxi == 0 ? 1.0 : -1.0;
  InputFrame out;
  out.axes = Tensor::zeros({3, 3});
  out.stats = Tensor::zeros({1, 12});
  for (int a = 0; a < 3; ++a) {
    out.axes.at(a, 0) = sx * v[a][jx];
    out.axes.at(a, 2) = sz * v[a][jz];
  }
  for (int a = 0; a < 3; ++a)
    out.axes.at(a, 1) = out.axes.at((a + 1) % 3, 2) * out.axes.at((a + 2) % 3, 0) -
                        out.axes.at((a + 2) % 3, 2) * out.axes.at((a + 1) % 3, 0);
  const int jy = 3 - jz - jx;
  double sy = 0.0;
  for (int a = 0; a < 3; ++a) sy += out.axes.at(a, 1) * v[a][jy];
  sy = sy >= 0.0 ? 1.0 : -1.0;
  const int ordj[3] = {jx, jy, jz};
  const double ords[3] = {sx, sy, sz};
  for (int slot = 0; slot < 3; ++slot) {
    const int j = ordj[slot];
    out.stats[slot] = std::sqrt(std::max(w[j], 0.0));
    out.stats[3 + slot] = ords[slot] * gam[j];
    out.stats[6 + 2 * slot] = cv[j][ords[slot] > 0.0 ? 0 : 1];
    out.stats[6 + 2 * slot + 1] = cv[j][ords[slot] > 0.0 ? 1 : 0];
  }
  return out;
}

inline Tensor group_pool(int k, int n, bool mean) {
  Tensor t = Tensor::zeros({k, k * n});
  const double w = mean ? 1.0 / n : 1.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j) t.at(i, i * n + j) = w;
  return t;
}

}  // namespace detail

class PoseModel {
 public:
  explicit PoseModel(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  static std::string block_of(int group) { return "phi_" + std::to_string(group); }

  void init_params(ParamStore& store, std::uint64_t seed) const {
    const int d = cfg_.feature_dim;
    add_linear(store, seed, "psi", "psi.enc.0", 22, cfg_.enc_hidden);
    add_linear(store, seed, "psi", "psi.enc.1", 3 * cfg_.enc_hidden, cfg_.enc_hidden);
    add_linear(store, seed, "psi", "psi.enc.2", cfg_.enc_hidden, d - 3);
    for (int g = 1; g <= cfg_.num_groups; ++g) {
      const std::string b = block_of(g);
      add_matrix(store, seed, b, b + ".q", cfg_.num_keypoints, d);
      add_matrix(store, seed, b, b + ".ca.wq", d, d);
      add_matrix(store, seed, b, b + ".ca.wk", d, d);
      add_matrix(store, seed, b, b + ".ca.wv", d, d);
      store.add(b + ".ca.ln.g", b, Tensor::full({d}, 1.0));
      store.add(b + ".ca.ln.b", b, Tensor::zeros({d}));
      if (cfg_.capacity.at(g) == 'H') {
        add_linear(store, seed, b, b + ".hi.loc.0", 3, d);
        add_linear(store, seed, b, b + ".hi.loc.1", d, d);
        add_linear(store, seed, b, b + ".hi.q.0", 2 * d, d);
        add_linear(store, seed, b, b + ".hi.q.1", d, d);
        add_linear(store, seed, b, b + ".hi.post.0", d, d);
        add_linear(store, seed, b, b + ".hi.post.1", d, d);
        add_linear(store, seed, b, b + ".hi.geo.0", 3, d);
        add_linear(store, seed, b, b + ".hi.geo.1", d, d);
        add_linear(store, seed, b, b + ".hi.fuse.0", 3 * d, d);
        add_linear(store, seed, b, b + ".hi.fuse.1", d, d);
        add_linear(store, seed, b, b + ".hi.nocs.0", d, d);
        add_linear(store, seed, b, b + ".hi.nocs.1", d, 3);
      } else {
        add_linear(store, seed, b, b + ".lo.g.0", 3, cfg_.geo_dim);
        add_linear(store, seed, b, b + ".lo.bl", cfg_.geo_dim, cfg_.attn_heads);
        add_linear(store, seed, b, b + ".lo.bg", cfg_.geo_dim, cfg_.attn_heads);
        add_matrix(store, seed, b, b + ".lo.wq", d, d);
        add_matrix(store, seed, b, b + ".lo.wk", d, d);
        add_linear(store, seed, b, b + ".lo.nocs", d, 3);
      }
      add_linear(store, seed, b, b + ".dec.0", d, cfg_.dec_hidden);
      add_linear(store, seed, b, b + ".dec.1", cfg_.dec_hidden, 3 * cfg_.recon_points);
    }
    const int pd = d + 42;  // mean [feat|kpt|nocs] + M + cross-cov + spreads + frame
    add_linear(store, seed, "omega", "omega.rot.0", pd, cfg_.head_hidden);
    add_linear(store, seed, "omega", "omega.rot.1", cfg_.head_hidden, 6);
    add_linear(store, seed, "omega", "omega.tr.0", pd, cfg_.head_hidden);
    add_linear(store, seed, "omega", "omega.tr.1", cfg_.head_hidden, 3);
    add_linear(store, seed, "omega", "omega.sc.0", pd, cfg_.head_hidden);
    add_linear(store, seed, "omega", "omega.sc.1", cfg_.head_hidden, 3);
  }

  // observed points [N,3] -> per-point features [N,D]. Per-point inputs are
  // augmented with coordinates in a deterministic PCA frame of the cloud plus
  // its eigenvalue/skewness stats (data normalization, no parameters), and
  // pooled features are fed back before the second layer. Canonical
  // coordinates cannot be predicted from isolated points, so the scene
  // context has to enter here.
  Value encode(Tape& t, const ParamStore& s, Value pts) const {
    const int n = pts.shape()[0];
    Value ones_n = t.constant(Tensor::full({n, 1}, 1.0));
    Value centroid = mean_reduce(pts, 0);
    Value pc = add(pts, scalar_mul(centroid, -1.0));
    Value nr = sqrt(sum_reduce(mul(pc, pc), 1));
    detail::InputFrame fr = detail::input_frame(pts.tensor());
    Tensor axw = fr.axes;  // whiten the frame coords so they approximate nocs
    for (int a = 0; a < 3; ++a)
      for (int j = 0; j < 3; ++j)
        axw.at(a, j) /= std::max(fr.stats[j], 1e-9);
    Value x_pca = matmul(pc, t.constant(axw));
    Value x = concat({concat({pts, pc, reshape(nr, {n, 1})}),
                      x_pca, matmul(ones_n, t.constant(fr.stats))});
    Value h = relu(detail::linear(t, s, x, "psi.enc.0"));
    Value gmean = reshape(mean_reduce(h, 0), {1, cfg_.enc_hidden});
    Value gmax = scalar_mul(reshape(min_reduce(scalar_mul(h, -1.0), 0),
                                    {1, cfg_.enc_hidden}), -1.0);
    Value tiled = matmul(ones_n, concat(gmean, gmax));
    h = relu(detail::linear(t, s, concat({h, tiled}), "psi.enc.1"));
    // frame coords ride along unmixed; the nocs heads read them directly
    return concat(detail::linear(t, s, h, "psi.enc.2"), x_pca);
  }

  KeypointExtraction extract_keypoints(Tape& t, const ParamStore& s, Value feat,
                                       Value pts, int group) const {
    const std::string b = block_of(group);
    const int d = cfg_.feature_dim;
    Value queries = t.param(s, b + ".q");
    Value q = matmul(queries, t.param(s, b + ".ca.wq"));
    Value k = matmul(feat, t.param(s, b + ".ca.wk"));
    Value v = matmul(feat, t.param(s, b + ".ca.wv"));
    Value attn = row_softmax(scalar_mul(matmul(q, transpose(k)),
                                        1.0 / std::sqrt(static_cast<double>(d))));
    Value q_ins = layer_norm(add(queries, matmul(attn, v)),
                             t.param(s, b + ".ca.ln.g"), t.param(s, b + ".ca.ln.b"));
    // temperature sharpens point selection; diffuse weights average the
    // whole cloud and keypoints collapse to the centroid
    Value w = row_softmax(scalar_mul(matmul(q_ins, transpose(feat)), 4.0));
    return {w, matmul(w, pts), matmul(w, feat)};
  }

  BranchOutput branch_forward(Tape& t, const ParamStore& s, Value feat,
                              Value pts, int group) const {
    KeypointExtraction ext = extract_keypoints(t, s, feat, pts, group);
    const char cap = cfg_.capacity.at(group);
    BranchOutput out;
    out.ext = ext;
    out.group = group;

    const int kk = cfg_.num_keypoints, kn = cfg_.knn, d = cfg_.feature_dim;
    const std::string b = block_of(group);
    std::vector<int> nn =
        knn_indices(ext.kpt_xyz.tensor(), pts.tensor(), kn, &out.knn_margin);
    std::vector<int> rep = detail::repeat_index(kk, kn);
    Value pn = gather_rows(pts, nn);
    Value fn = gather_rows(feat, nn);
    Value dp = sub(pn, gather_rows(ext.kpt_xyz, rep));
    Value pool_mean = t.constant(detail::group_pool(kk, kn, true));
    Value pool_sum = t.constant(detail::group_pool(kk, kn, false));

    if (cap == 'H') {
      Value alpha = detail::mlp2(t, s, dp, b + ".hi.loc");
      Value f_l = matmul(pool_mean, alpha);
      Value q = detail::mlp2(t, s, concat(ext.kpt_feat, f_l), b + ".hi.q");
      Value logits = reshape(sum_reduce(mul(gather_rows(q, rep), fn), 1), {kk, kn});
      Value sm = row_softmax(logits);
      Value sb = matmul(reshape(sm, {kk * kn, 1}), t.constant(Tensor::full({1, d}, 1.0)));
      Value agg = matmul(pool_sum, mul(sb, fn));
      Value f_local = detail::mlp2(t, s, add(agg, ext.kpt_feat), b + ".hi.post");

      std::vector<int> pi(static_cast<size_t>(kk) * kk), pj(pi.size());
      for (int i = 0; i < kk; ++i)
        for (int j = 0; j < kk; ++j) {
          pi[static_cast<size_t>(i) * kk + j] = i;
          pj[static_cast<size_t>(i) * kk + j] = j;
        }
      Value rel = sub(gather_rows(ext.kpt_xyz, pj), gather_rows(ext.kpt_xyz, pi));
      Value beta = detail::mlp2(t, s, rel, b + ".hi.geo");
      Value f_g = matmul(t.constant(detail::group_pool(kk, kk, true)), beta);

      Value gmean = reshape(mean_reduce(f_local, 0), {1, d});
      Value grep = matmul(t.constant(Tensor::full({kk, 1}, 1.0)), gmean);
      out.fhat = detail::mlp2(t, s, concat({f_local, grep, f_g}), b + ".hi.fuse");
      // nocs from per-point features pooled by the assignment weights; the
      // affine canonical map commutes with the convex combination, so this
      // matches a dense prediction evaluated at the keypoints
      out.nocs = matmul(ext.weights, detail::mlp2(t, s, feat, b + ".hi.nocs"));
    } else {
      const int heads = cfg_.attn_heads, dh = d / heads;
      Value gdesc = relu(detail::linear(t, s, dp, b + ".lo.g.0"));
      Value b_local = detail::linear(t, s, gdesc, b + ".lo.bl");
      Value b_global = detail::linear(t, s, matmul(pool_mean, gdesc), b + ".lo.bg");

      Value q = matmul(ext.kpt_feat, t.param(s, b + ".lo.wq"));
      Value keys = matmul(fn, t.param(s, b + ".lo.wk"));
      Value prod = mul(gather_rows(q, rep), keys);
      Tensor head_sum = Tensor::zeros({d, heads});
      for (int c = 0; c < d; ++c)
        head_sum.at(c, c / dh) = 1.0 / std::sqrt(static_cast<double>(dh));
      Value logits = add(matmul(prod, t.constant(head_sum)), b_local);

      Value logits_t = transpose(logits);  // [heads, K*kn]
      Value fn_t = transpose(fn);          // [d, K*kn]
      Value agg;  // concat of per-head aggregations -> [K, d]
      for (int h = 0; h < heads; ++h) {
        Value lh = reshape(gather_rows(logits_t, {h}), {kk, kn});
        Value sm = row_softmax(lh);
        Value sb = matmul(reshape(sm, {kk * kn, 1}),
                          t.constant(Tensor::full({1, dh}, 1.0)));
        std::vector<int> chan(static_cast<size_t>(dh));
        for (int c = 0; c < dh; ++c) chan[c] = h * dh + c;
        Value fn_h = transpose(gather_rows(fn_t, chan));
        Value agg_h = matmul(pool_sum, mul(sb, fn_h));
        agg = h == 0 ? agg_h : concat(agg, agg_h);
      }
      Value f_local = add(agg, ext.kpt_feat);
      Tensor head_expand = Tensor::zeros({heads, d});
      for (int c = 0; c < d; ++c) head_expand.at(c / dh, c) = 1.0;
      out.fhat = add(f_local, matmul(b_global, t.constant(head_expand)));
      out.nocs = matmul(ext.weights, detail::linear(t, s, feat, b + ".lo.nocs"));
    }
    return out;
  }

  // decoder lives in the branch block; used by the reconstruction loss
  Value decode(Tape& t, const ParamStore& s, Value fhat, int group) const {
    const std::string b = block_of(group);
    Value pooled = reshape(mean_reduce(fhat, 0), {1, cfg_.feature_dim});
    Value h = relu(detail::linear(t, s, pooled, b + ".dec.0"));
    return reshape(detail::linear(t, s, h, b + ".dec.1"), {cfg_.recon_points, 3});
  }

  PosePrediction pose_head(Tape& t, const ParamStore& s,
                           const BranchOutput& br, Value frame,
                           Value frame_axes) const {
    const int kk = cfg_.num_keypoints;
    Value feats = concat({br.fhat, br.ext.kpt_xyz, br.nocs});
    Value base = reshape(mean_reduce(feats, 0), {1, cfg_.feature_dim + 6});

    // under kpt = R diag(s) nocs + t the cross/auto covariance ratio
    // M = cov(k,n) inv(cov(n,n)) recovers R diag(s) in closed form; the MLP
    // heads only learn small corrections on top of that estimate
    Value mk = reshape(mean_reduce(br.ext.kpt_xyz, 0), {1, 3});
    Value mn = reshape(mean_reduce(br.nocs, 0), {1, 3});
    Value ones_k = t.constant(Tensor::full({kk, 1}, 1.0));
    Value ck = sub(br.ext.kpt_xyz, matmul(ones_k, mk));
    Value cn = sub(br.nocs, matmul(ones_k, mn));
    Value cov = scalar_mul(matmul(transpose(ck), cn), 1.0 / kk);
    Value sk = reshape(mean_reduce(mul(ck, ck), 0), {1, 3});
    Value sn = reshape(mean_reduce(mul(cn, cn), 0), {1, 3});
    // ridge eps keeps cov(n,n) invertible whatever the branch emits
    Value sig = add(scalar_mul(matmul(transpose(cn), cn), 1.0 / kk),
                    t.constant(detail::eye3(1e-4)));
    Value m = matmul(cov, inverse3(t, sig));
    Value mf = reshape(m, {9});
    Value fp = concat({concat(base, reshape(mf, {1, 9})),
                       reshape(cov, {1, 9}),
                       concat({concat(sk, sn), frame})});

    // the estimated input frame is the rotation prior; corrections read the
    // keypoint evidence (M carries the correspondence-based estimate)
    Value fa = reshape(frame_axes, {9});
    Value fx = gather_rows(fa, {0, 3, 6});
    Value fy = gather_rows(fa, {1, 4, 7});
    Value rot_h = relu(detail::linear(t, s, fp, "omega.rot.0"));
    Value corr6 = reshape(detail::linear(t, s, rot_h, "omega.rot.1"), {6});
    Value raw6 = add(concat(fx, fy), scalar_mul(corr6, 0.25));
    PosePrediction pred;
    pred.raw6 = raw6;

    Value a1 = gather_rows(raw6, {0, 1, 2});
    Value a2 = gather_rows(raw6, {3, 4, 5});
    Value b1 = scalar_mul(a1, safe_rnorm(t, a1));
    Value d = dot(b1, a2);
    Value u2 = sub(a2, scalar_mul(b1, d));
    if (std::sqrt(squared_l2(u2).tensor()[0]) < 1e-9) {
      // a2 (numerically) parallel to a1: orthogonalize a basis vector least
      // aligned with b1 instead
      const Tensor& b1v = b1.tensor();
      int axis = 0;
      for (int k = 1; k < 3; ++k)
        if (std::fabs(b1v[k]) < std::fabs(b1v[axis])) axis = k;
      Tensor e = Tensor::zeros({3});
      e[axis] = 1.0;
      Value ev = t.constant(e);
      u2 = sub(ev, scalar_mul(b1, dot(b1, ev)));
      pred.degenerate = true;
    }
    Value b2 = scalar_mul(u2, safe_rnorm(t, u2));
    Value b3 = cross(b1, b2);
    Value rows = concat({reshape(b1, {1, 3}), reshape(b2, {1, 3}), reshape(b3, {1, 3})});
    pred.rot = transpose(reshape(rows, {3, 3}));  // columns are b1, b2, b3

    // observed per-axis sigma over the canonical per-axis spread gives the
    // scale; the canonical spread depends on shape alone (per-axis extent is
    // normalized), so the log head only regresses a narrow shape factor
    Value sc_h = relu(detail::linear(t, s, fp, "omega.sc.0"));
    Value sc_log = reshape(detail::linear(t, s, sc_h, "omega.sc.1"), {3});
    Value sigma = gather_rows(reshape(frame, {12}), {0, 1, 2});
    pred.scale = mul(sigma, exp(sc_log));

    // mean identity: t = mean(k) - R (s * mean(n))
    Value tr_h = relu(detail::linear(t, s, fp, "omega.tr.0"));
    Value tr_corr = scalar_mul(reshape(detail::linear(t, s, tr_h, "omega.tr.1"), {3}), 0.1);
    Value rsm = reshape(
        matmul(pred.rot, reshape(mul(pred.scale, reshape(mn, {3})), {3, 1})), {3});
    pred.trans = add(sub(reshape(mk, {3}), rsm), tr_corr);
    return pred;
  }

  // closed form 3x3 inverse (adjugate over determinant), stays on the tape
  static Value inverse3(Tape& t, Value a) {
    Value f = reshape(a, {9});
    auto e = [&](int i) { return gather_rows(f, std::vector<int>{i}); };
    Value c00 = sub(mul(e(4), e(8)), mul(e(5), e(7)));
    Value c01 = sub(mul(e(2), e(7)), mul(e(1), e(8)));
    Value c02 = sub(mul(e(1), e(5)), mul(e(2), e(4)));
    Value c10 = sub(mul(e(5), e(6)), mul(e(3), e(8)));
    Value c11 = sub(mul(e(0), e(8)), mul(e(2), e(6)));
    Value c12 = sub(mul(e(2), e(3)), mul(e(0), e(5)));
    Value c20 = sub(mul(e(3), e(7)), mul(e(4), e(6)));
    Value c21 = sub(mul(e(1), e(6)), mul(e(0), e(7)));
    Value c22 = sub(mul(e(0), e(4)), mul(e(1), e(3)));
    Value det = sum_reduce(
        add(add(mul(e(0), c00), mul(e(1), c10)), mul(e(2), c20)));
    Value adj = concat({concat({c00, c01, c02}), concat({c10, c11, c12}),
                        concat({c20, c21, c22})});
    return reshape(scalar_mul(adj, reciprocal(det)), {3, 3});
  }

  static Value safe_norm(Tape& t, Value v) {
    return sqrt(add(squared_l2(v), t.scalar_const(1e-18)));
  }

  static Value safe_rnorm(Tape& t, Value v) {
    return reciprocal(safe_norm(t, v));
  }

  struct Forward {
    BranchOutput branch;
    PosePrediction pose;
  };

  Forward forward_instance(Tape& t, const ParamStore& s, const Tensor& observed,
                           int group) const {
    Value pts = t.constant(observed);
    Value feat = encode(t, s, pts);
    Forward f;
    // the estimated frame feeds the pose head: stats row as features and
    // axes as the rotation prior
    detail::InputFrame fr = detail::input_frame(observed);
    f.branch = branch_forward(t, s, feat, pts, group);
    f.pose = pose_head(t, s, f.branch, t.constant(fr.stats),
                       t.constant(fr.axes));
    return f;
  }

 private:
  ModelConfig cfg_;

  static void add_linear(ParamStore& store, std::uint64_t seed,
                         const std::string& block, const std::string& prefix,
                         int in, int out) {
    add_matrix(store, seed, block, prefix + ".w", in, out);
    store.add(prefix + ".b", block, Tensor::zeros({out}));
  }

  static void add_matrix(ParamStore& store, std::uint64_t seed,
                         const std::string& block, const std::string& name,
                         int rows, int cols) {
    Rng rng(derive_seed(seed, fnv1a(name)));
    const double a = std::sqrt(6.0 / rows);
    Tensor w = Tensor::zeros({rows, cols});
    for (auto& v : w.data) v = rng.uniform(-a, a);
    store.add(name, block, std::move(w));
  }
};

// pose prediction values -> plain geometry pose (for evaluation)
inline Pose pose_from_prediction(const PosePrediction& p) {
  Pose out;
  const Tensor& r = p.rot.tensor();
  for (int i = 0; i < 9; ++i) out.R.m[i] = r[i];
  for (int i = 0; i < 3; ++i) out.t[i] = p.trans.tensor()[i];
  for (int i = 0; i < 3; ++i) out.s[i] = p.scale.tensor()[i];
  return out;
}

}  // namespace poselab

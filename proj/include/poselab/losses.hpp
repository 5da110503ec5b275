#pragma once

#include <nlohmann/json.hpp>

#include "poselab/model.hpp"
#include "poselab/synthdata.hpp"
#include "poselab/tape.hpp"

namespace poselab {

struct LossWeights {
  double cd = 3.0;
  double div = 10.0;
  double recon = 15.0;
  double nocs = 3.0;
  double div_threshold = 0.01;
  double smooth_l1_beta = 1.0;
  double lambda_main = 0.6;
  double lambda_group = 1.0;

  void validate() const {
    for (double v : {cd, div, recon, nocs, lambda_main, lambda_group})
      if (!std::isfinite(v) || v < 0.0)
        throw ConfigError("loss weights must be finite and nonnegative");
    if (!(div_threshold > 0.0) || !(smooth_l1_beta > 0.0))
      throw ConfigError("div_threshold and smooth_l1_beta must be positive");
  }

  nlohmann::json to_json() const {
    return {{"lambda_cd", cd},
            {"lambda_div", div},
            {"lambda_recon", recon},
            {"lambda_nocs", nocs},
            {"th", div_threshold},
            {"beta", smooth_l1_beta},
            {"lambda_main", lambda_main},
            {"lambda_g", lambda_group}};
  }

  static LossWeights from_json(const nlohmann::json& j) {
    LossWeights w;
    w.cd = j.value("lambda_cd", w.cd);
    w.div = j.value("lambda_div", w.div);
    w.recon = j.value("lambda_recon", w.recon);
    w.nocs = j.value("lambda_nocs", w.nocs);
    w.div_threshold = j.value("th", w.div_threshold);
    w.smooth_l1_beta = j.value("beta", w.smooth_l1_beta);
    w.lambda_main = j.value("lambda_main", w.lambda_main);
    w.lambda_group = j.value("lambda_g", w.lambda_group);
    return w;
  }
};

// mean over keypoints of squared distance to the nearest scene point
inline Value chamfer_keypoints(Value kpts, Value pts) {
  return mean_reduce(min_reduce(pairwise_sq_distances(kpts, pts), 1));
}

// hinge on pairwise keypoint separation, averaged over ordered pairs i != j.
// The distance-matrix diagonal is masked with a constant (1 - I) so the
// sqrt-at-zero subgradient clamp never carries signal.
inline Value diversity_loss(Tape& t, Value kpts, double threshold) {
  const int k = kpts.shape()[0];
  Value dist = sqrt(pairwise_sq_distances(kpts, kpts));
  Value hinge = max_with_zero(sub(t.constant(Tensor::full({k, k}, threshold)), dist));
  Tensor mask = Tensor::full({k, k}, 1.0);
  for (int i = 0; i < k; ++i) mask.at(i, i) = 0.0;
  Value masked = mul(hinge, t.constant(mask));
  return scalar_mul(sum_reduce(masked), 1.0 / (static_cast<double>(k) * (k - 1)));
}

// symmetric chamfer (sum of means in both directions) between the decoded
// cloud and the observed points; decoder parameters live in the branch block
inline Value reconstruction_loss(Tape& t, const ParamStore& s,
                                 const PoseModel& model, Value fhat, Value pts,
                                 int group) {
  Value dec = model.decode(t, s, fhat, group);
  Value d2 = pairwise_sq_distances(dec, pts);
  return add(mean_reduce(min_reduce(d2, 1)), mean_reduce(min_reduce(d2, 0)));
}

// smooth-l1 between predicted NOCS and the canonical coordinates of the
// predicted keypoints under the ground-truth pose; the target stays on the
// tape, so keypoint positions receive gradient from both sides
inline Value nocs_loss(Tape& t, Value nocs_pred, Value kpt_xyz, const Pose& gt,
                       double beta) {
  for (double v : gt.s)
    if (!(v > 0.0))
      throw std::invalid_argument("nocs_loss: nonpositive ground-truth scale");
  // row-vector transform: nocs_i = (x_i - t)^T R diag(1/s)
  Tensor rs = Tensor::zeros({3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rs.at(r, c) = gt.R(r, c) / gt.s[c];
  Tensor toff = Tensor::zeros({1, 3});
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) toff[c] += gt.t[r] * gt.R(r, c) / gt.s[c];
  const int k = kpt_xyz.shape()[0];
  Value target = sub(matmul(kpt_xyz, t.constant(rs)),
                     matmul(t.constant(Tensor::full({k, 1}, 1.0)),
                            t.constant(toff)));
  return mean_reduce(smooth_l1(nocs_pred, target, beta));
}

// || R - R_gt ||_F + || t - t_gt ||_2 + || s - s_gt ||_2
inline Value main_pose_loss(Tape& t, const PosePrediction& pred, const Pose& gt) {
  Tensor rg = Tensor::zeros({3, 3});
  for (int i = 0; i < 9; ++i) rg[i] = gt.R.m[i];
  Tensor tg = Tensor::zeros({3});
  Tensor sg = Tensor::zeros({3});
  for (int i = 0; i < 3; ++i) {
    tg[i] = gt.t[i];
    sg[i] = gt.s[i];
  }
  Value lr = l2_norm(sub(pred.rot, t.constant(rg)));
  Value lt = l2_norm(sub(pred.trans, t.constant(tg)));
  Value ls = l2_norm(sub(pred.scale, t.constant(sg)));
  return add(add(lr, lt), ls);
}

struct LossBreakdown {
  Value total, main, group, cd, div, recon, nocs;
};

inline LossBreakdown instance_loss(Tape& t, const ParamStore& s,
                                   const PoseModel& model, Value pts,
                                   const PoseModel::Forward& fwd, const Pose& gt,
                                   const LossWeights& w) {
  LossBreakdown out;
  out.cd = chamfer_keypoints(fwd.branch.ext.kpt_xyz, pts);
  out.div = diversity_loss(t, fwd.branch.ext.kpt_xyz, w.div_threshold);
  out.recon = reconstruction_loss(t, s, model, fwd.branch.fhat, pts, fwd.branch.group);
  out.nocs = nocs_loss(t, fwd.branch.nocs, fwd.branch.ext.kpt_xyz, gt, w.smooth_l1_beta);
  out.group = add(add(scalar_mul(out.cd, w.cd), scalar_mul(out.div, w.div)),
                  add(scalar_mul(out.recon, w.recon), scalar_mul(out.nocs, w.nocs)));
  out.main = main_pose_loss(t, fwd.pose, gt);
  out.total = add(scalar_mul(out.main, w.lambda_main),
                  scalar_mul(out.group, w.lambda_group));
  return out;
}

}  // namespace poselab

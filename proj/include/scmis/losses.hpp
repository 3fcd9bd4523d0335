#pragma once

#include <torch/torch.h>

#include <functional>
#include <map>
#include <random>
#include <vector>

#include "scmis/dataio.hpp"

namespace scmis::losses {

/// Floor applied to probabilities before taking logarithms.
inline constexpr double kProbFloor = 1e-8;

/// Inverse per-pixel class frequency, averaged over the maps of a batch in
/// which the class occurs:
///   alpha_c = mean_{maps with c} (H * W / count_c)
/// Classes absent from the whole batch get 0. Returned as an N-vector of
/// doubles.
struct ClassWeights {
  torch::Tensor alpha;
};

ClassWeights class_weights(const torch::Tensor& labels, int64_t num_classes);

/// Discriminator objective over N+1 classes. Real pixels are scored against
/// their label with weight alpha_c, fake pixels against the extra class N.
/// Each term is averaged over an image's non-VOID pixels, then over the batch.
torch::Tensor d_adversarial_loss(const torch::Tensor& real_logits,
                                 const torch::Tensor& labels,
                                 const torch::Tensor& fake_logits,
                                 const ClassWeights& weights);

/// Generator counterpart: the weighted real-class term applied to the logits
/// of generated images.
torch::Tensor g_adversarial_loss(const torch::Tensor& fake_logits,
                                 const torch::Tensor& labels,
                                 const ClassWeights& weights);

/// Mean over layers of the mean absolute difference between discriminator
/// features of real and generated images. Real features are detached.
torch::Tensor adaptive_perceptual_loss(const std::vector<torch::Tensor>& real_taps,
                                       const std::vector<torch::Tensor>& fake_taps);

struct MaskedL1 {
  torch::Tensor value;
  bool empty = false;  // no valid pixel: value is 0
};

/// Mean |generated - real| over pixels where the real depth is valid.
/// `validity` is B x H x W (or H x W for a single map).
MaskedL1 depth_l1_loss(const torch::Tensor& generated,
                       const torch::Tensor& real,
                       const torch::Tensor& validity);

struct MixMask {
  torch::Tensor mask;                  // H x W float in {0, 1}
  std::map<int64_t, bool> assignment;  // per present class; VOID under kVoidLabel
};

/// One fair coin per class present in the map (plus one for VOID pixels, if
/// any); the mask is painted from the coins so it is constant on each class
/// region.
MixMask labelmix_mask(const LabelMap& label, std::mt19937_64& rng);

/// B x 1 x H x W masks, one labelmix_mask per batch entry in order.
torch::Tensor labelmix_masks(const torch::Tensor& labels, int64_t num_classes,
                             std::mt19937_64& rng);

/// M * x + (1 - M) * xhat, with M broadcast over channels.
torch::Tensor labelmix(const torch::Tensor& x, const torch::Tensor& xhat,
                       const torch::Tensor& mask);

using LogitsFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// mean( (D(labelmix(x, xhat, M)) - labelmix(D(x), D(xhat), M))^2 )
torch::Tensor labelmix_consistency_loss(const LogitsFn& discriminator,
                                        const torch::Tensor& x,
                                        const torch::Tensor& xhat,
                                        const torch::Tensor& mask);

/// Same as above with the three logit maps already computed.
torch::Tensor labelmix_consistency_from_logits(const torch::Tensor& mixed_logits,
                                               const torch::Tensor& real_logits,
                                               const torch::Tensor& fake_logits,
                                               const torch::Tensor& mask);

struct LossWeights {
  double adversarial = 1.0;
  double perceptual = 1.0;
  double depth = 1.0;
  double labelmix = 1.0;
};

/// Weighted generator objective; throws NumericError naming the first
/// non-finite component.
torch::Tensor generator_total(const torch::Tensor& g_adversarial,
                              const torch::Tensor& perceptual,
                              const torch::Tensor& depth_l1,
                              const LossWeights& weights);

/// Weighted discriminator objective; throws NumericError naming the first
/// non-finite component.
torch::Tensor discriminator_total(const torch::Tensor& d_adversarial,
                                  const torch::Tensor& labelmix_consistency,
                                  const LossWeights& weights);

struct LossParts {
  double g_adversarial = 0;
  double perceptual = 0;
  double depth_l1 = 0;
  double d_adversarial = 0;
  double labelmix = 0;
};

struct TotalLosses {
  double generator = 0;
  double discriminator = 0;
};

TotalLosses total_losses(const LossParts& parts, const LossWeights& weights = {});

}  // namespace scmis::losses

#include "scmis/losses.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cmath>

#include "scmis/errors.hpp"

namespace scmis::losses {
namespace {

void require_finite(const torch::Tensor& t, const char* name) {
  if (!torch::isfinite(t.detach()).all().item<bool>()) {
    throw NumericError(fmt::format("non-finite values in {}", name));
  }
}

void check_logits(const torch::Tensor& logits, const torch::Tensor& labels,
                  const char* name) {
  if (logits.dim() != 4 || labels.dim() != 3 || logits.size(0) != labels.size(0) ||
      logits.size(2) != labels.size(1) || logits.size(3) != labels.size(2)) {
    throw ContractViolation(fmt::format(
        "{}: logits {} do not match labels {}", name,
        fmt::join(logits.sizes(), "x"), fmt::join(labels.sizes(), "x")));
  }
  require_finite(logits, name);
}

// -sum_p w(p) log softmax(logits)_{class(p)} / |valid|, averaged over images.
torch::Tensor mean_image_nll(const torch::Tensor& log_probs,
                             const torch::Tensor& weights,
                             const torch::Tensor& valid) {
  auto validf = valid.to(log_probs.scalar_type());
  auto count = validf.sum({1, 2}).clamp_min(1.0);
  return (-(weights * log_probs * validf).sum({1, 2}) / count).mean();
}

torch::Tensor floored_log_softmax(const torch::Tensor& logits) {
  return torch::log_softmax(logits, 1).clamp_min(std::log(kProbFloor));
}

torch::Tensor real_class_term(const torch::Tensor& logits,
                              const torch::Tensor& labels,
                              const ClassWeights& weights) {
  const int64_t n = logits.size(1) - 1;
  if (weights.alpha.numel() != n) {
    throw ContractViolation(fmt::format(
        "class weights have {} entries, logits describe {} classes",
        weights.alpha.numel(), n));
  }
  auto valid = labels.ne(kVoidLabel);
  auto safe = labels.masked_fill(valid.logical_not(), 0).to(torch::kInt64);
  auto log_probs = floored_log_softmax(logits).gather(1, safe.unsqueeze(1)).squeeze(1);
  auto alpha = weights.alpha.to(logits.scalar_type());
  auto w = alpha.index_select(0, safe.flatten()).view_as(safe);
  return mean_image_nll(log_probs, w, valid);
}

}  // namespace

ClassWeights class_weights(const torch::Tensor& labels, int64_t num_classes) {
  if (labels.dim() != 3 || labels.size(0) == 0) {
    throw ContractViolation("class_weights: expected a non-empty B x H x W batch");
  }
  const int64_t batch = labels.size(0);
  const double pixels = static_cast<double>(labels.size(1) * labels.size(2));
  auto sum = torch::zeros({num_classes}, torch::kFloat64);
  auto maps = torch::zeros({num_classes}, torch::kFloat64);
  for (int64_t b = 0; b < batch; ++b) {
    auto counts = torch::bincount(labels[b].flatten().to(torch::kInt64), {},
                                  kVoidLabel + 1)
                      .slice(0, 0, num_classes)
                      .to(torch::kFloat64);
    auto present = counts.gt(0);
    sum += torch::where(present, pixels / counts, torch::zeros_like(counts));
    maps += present.to(torch::kFloat64);
  }
  auto alpha = torch::where(maps.gt(0), sum / maps.clamp_min(1.0),
                            torch::zeros_like(sum));
  return {alpha};
}

torch::Tensor d_adversarial_loss(const torch::Tensor& real_logits,
                                 const torch::Tensor& labels,
                                 const torch::Tensor& fake_logits,
                                 const ClassWeights& weights) {
  check_logits(real_logits, labels, "d_adversarial_loss real logits");
  check_logits(fake_logits, labels, "d_adversarial_loss fake logits");
  auto real_term = real_class_term(real_logits, labels, weights);
  const int64_t fake_class = fake_logits.size(1) - 1;
  auto fake_log_probs = floored_log_softmax(fake_logits).select(1, fake_class);
  auto fake_term = mean_image_nll(fake_log_probs, torch::ones_like(fake_log_probs),
                                  labels.ne(kVoidLabel));
  return real_term + fake_term;
}

torch::Tensor g_adversarial_loss(const torch::Tensor& fake_logits,
                                 const torch::Tensor& labels,
                                 const ClassWeights& weights) {
  check_logits(fake_logits, labels, "g_adversarial_loss logits");
  return real_class_term(fake_logits, labels, weights);
}

torch::Tensor adaptive_perceptual_loss(const std::vector<torch::Tensor>& real_taps,
                                       const std::vector<torch::Tensor>& fake_taps) {
  if (real_taps.empty() || real_taps.size() != fake_taps.size()) {
    throw ContractViolation(fmt::format(
        "adaptive_perceptual_loss: {} real vs {} fake layers", real_taps.size(),
        fake_taps.size()));
  }
  torch::Tensor total;
  for (size_t i = 0; i < real_taps.size(); ++i) {
    if (real_taps[i].sizes() != fake_taps[i].sizes()) {
      throw ContractViolation(fmt::format(
          "adaptive_perceptual_loss: layer {} shapes {} vs {}", i,
          fmt::join(real_taps[i].sizes(), "x"),
          fmt::join(fake_taps[i].sizes(), "x")));
    }
    auto term = (real_taps[i].detach() - fake_taps[i]).abs().mean();
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(real_taps.size());
}

MaskedL1 depth_l1_loss(const torch::Tensor& generated, const torch::Tensor& real,
                       const torch::Tensor& validity) {
  if (generated.sizes() != real.sizes()) {
    throw ContractViolation(fmt::format("depth_l1_loss: shapes {} vs {}",
                                        fmt::join(generated.sizes(), "x"),
                                        fmt::join(real.sizes(), "x")));
  }
  auto mask = validity.to(torch::kBool);
  if (generated.dim() == mask.dim() + 1) mask = mask.unsqueeze(-3);
  mask = mask.expand_as(generated);
  auto count = mask.sum().item<int64_t>();
  if (count == 0) {
    return {(generated * 0.0).sum(), true};
  }
  auto diff = (generated - real).abs() * mask.to(generated.scalar_type());
  return {diff.sum() / static_cast<double>(count), false};
}

MixMask labelmix_mask(const LabelMap& label, std::mt19937_64& rng) {
  MixMask out;
  auto classes = label.classes();
  // Top bit of the raw engine output as the coin.
  auto coin = [&rng] { return (rng() >> 63) != 0; };
  auto table = torch::zeros({kVoidLabel + 1}, torch::kFloat32);
  for (int64_t c : label.present_classes()) {
    bool bit = coin();
    out.assignment[c] = bit;
    table[c] = bit ? 1.0f : 0.0f;
  }
  if (classes.eq(kVoidLabel).any().item<bool>()) {
    bool bit = coin();
    out.assignment[kVoidLabel] = bit;
    table[kVoidLabel] = bit ? 1.0f : 0.0f;
  }
  out.mask = table.index_select(0, classes.flatten()).view_as(classes);
  return out;
}

torch::Tensor labelmix_masks(const torch::Tensor& labels, int64_t num_classes,
                             std::mt19937_64& rng) {
  std::vector<torch::Tensor> masks;
  for (int64_t b = 0; b < labels.size(0); ++b) {
    masks.push_back(labelmix_mask(LabelMap(labels[b], num_classes), rng).mask);
  }
  return torch::stack(masks).unsqueeze(1);
}

torch::Tensor labelmix(const torch::Tensor& x, const torch::Tensor& xhat,
                       const torch::Tensor& mask) {
  if (x.sizes() != xhat.sizes()) {
    throw ContractViolation("labelmix: x and xhat shapes differ");
  }
  auto m = mask.to(x.scalar_type());
  while (m.dim() < x.dim()) m = m.unsqueeze(-3);
  return m * x + (1.0 - m) * xhat;
}

torch::Tensor labelmix_consistency_from_logits(const torch::Tensor& mixed_logits,
                                               const torch::Tensor& real_logits,
                                               const torch::Tensor& fake_logits,
                                               const torch::Tensor& mask) {
  auto target = labelmix(real_logits, fake_logits, mask);
  return (mixed_logits - target).pow(2).mean();
}

torch::Tensor labelmix_consistency_loss(const LogitsFn& discriminator,
                                        const torch::Tensor& x,
                                        const torch::Tensor& xhat,
                                        const torch::Tensor& mask) {
  auto mixed = discriminator(labelmix(x, xhat, mask));
  return labelmix_consistency_from_logits(mixed, discriminator(x),
                                          discriminator(xhat), mask);
}

torch::Tensor generator_total(const torch::Tensor& g_adversarial,
                              const torch::Tensor& perceptual,
                              const torch::Tensor& depth_l1,
                              const LossWeights& w) {
  require_finite(g_adversarial, "g_adversarial");
  require_finite(perceptual, "perceptual");
  require_finite(depth_l1, "depth_l1");
  return w.adversarial * g_adversarial + w.perceptual * perceptual +
         w.depth * depth_l1;
}

torch::Tensor discriminator_total(const torch::Tensor& d_adversarial,
                                  const torch::Tensor& labelmix_consistency,
                                  const LossWeights& w) {
  require_finite(d_adversarial, "d_adversarial");
  require_finite(labelmix_consistency, "labelmix");
  return w.adversarial * d_adversarial + w.labelmix * labelmix_consistency;
}

TotalLosses total_losses(const LossParts& p, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {
      {"g_adversarial", p.g_adversarial}, {"perceptual", p.perceptual},
      {"depth_l1", p.depth_l1},           {"d_adversarial", p.d_adversarial},
      {"labelmix", p.labelmix}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw NumericError(fmt::format("non-finite values in {}", name));
    }
  }
  return {w.adversarial * p.g_adversarial + w.perceptual * p.perceptual +
              w.depth * p.depth_l1,
          w.adversarial * p.d_adversarial + w.labelmix * p.labelmix};
}

}  // namespace scmis::losses

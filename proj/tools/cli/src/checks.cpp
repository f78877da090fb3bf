#include "eptlab_cli/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "eptlab/calibration.hpp"
#include "eptlab/errors.hpp"
#include "eptlab/fewshot.hpp"
#include "eptlab/rng.hpp"

namespace eptlab::cli {

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::size_t random_dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

CheckResult softmax_check(const CheckContext&) {
  Rng rng = Rng::stream(0, "verify.softmax");
  CheckResult r{"softmax", true, 0.0, 1e-12, ""};
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor m = random_matrix(random_dim(rng, 1, 8), random_dim(rng, 1, 8), -50.0, 50.0, rng);
    const Tensor s = dense::softmax_columns(m);
    for (std::size_t j = 0; j < s.cols(); ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < s.rows(); ++i) {
        if (!(s(i, j) >= 0.0)) r.passed = false;
        total += s(i, j);
      }
      r.worst = std::max(r.worst, std::abs(total - 1.0));
    }
  }
  r.passed = r.passed && r.worst < r.limit;
  r.detail = "column sums of 200 random score matrices";
  return r;
}

CheckResult proportionality_check(const CheckContext& ctx) {
  Rng rng = Rng::stream(0, "verify.proportionality");
  CheckResult r{"proportionality", true, 0.0, 1e-12, ""};
  double c_lo = 1.0, c_hi = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = random_dim(rng, 1, 8), cols = random_dim(rng, 1, 8), dp = random_dim(rng, 1, 4);
    const Tensor ktq = random_matrix(n, cols, -2.0, 2.0, rng);
    const Tensor prompt = random_matrix(dp, cols, -2.0, 2.0, rng);
    const Tensor plain = dense::softmax_columns(ktq);
    for (EmbeddingWay way : {EmbeddingWay::PureCat, EmbeddingWay::MultiCat}) {
      const Tensor prompted = ctx.prompted_softmax(ktq, prompt, way);
      if (prompted.shape() != plain.shape()) {
        r.passed = false;
        r.worst = INFINITY;
        continue;
      }
      const Vector factors = measure_scaling_factors(ktq, prompt, way);
      for (std::size_t j = 0; j < cols; ++j) {
        double mass = 0.0, pn = 0.0, qn = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          mass += prompted(i, j);
          pn += prompted(i, j) * prompted(i, j);
          qn += plain(i, j) * plain(i, j);
        }
        c_lo = std::min(c_lo, mass);
        c_hi = std::max(c_hi, mass);
        if (!(mass > 0.0 && mass < 1.0)) r.passed = false;
        double dev = std::abs(mass - factors[j]);
        dev = std::max(dev, std::abs(std::sqrt(pn / qn) - factors[j]));
        for (std::size_t i = 0; i < n; ++i) dev = std::max(dev, std::abs(prompted(i, j) - factors[j] * plain(i, j)));
        r.worst = std::max(r.worst, dev);
      }
    }
  }
  r.passed = r.passed && r.worst < r.limit;
  char buf[160];
  std::snprintf(buf, sizeof buf, "1000 pairs x {pure_cat, multi_cat}; c in [%.3e, %.3e]", c_lo, c_hi);
  r.detail = buf;
  return r;
}

CheckResult limit_check(const CheckContext& ctx) {
  Rng rng = Rng::stream(0, "verify.limit");
  CheckResult r{"limit", true, 0.0, 1e-9, "P_E = -1e9 on 100 instances"};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = random_dim(rng, 1, 8), cols = random_dim(rng, 1, 8), dp = random_dim(rng, 1, 4);
    const Tensor ktq = random_matrix(n, cols, -2.0, 2.0, rng);
    const Tensor prompt = Tensor::matrix(dp, cols, -1e9);
    const Tensor prompted = ctx.prompted_softmax(ktq, prompt, EmbeddingWay::PureCat);
    const Tensor plain = dense::softmax_columns(ktq);
    if (prompted.shape() != plain.shape()) {
      r.worst = INFINITY;
      continue;
    }
    r.worst = std::max(r.worst, max_abs_diff(prompted, plain));
  }
  r.passed = r.worst < r.limit;
  return r;
}

CheckResult gradcheck_check(const CheckContext& ctx) {
  CheckResult r{"gradcheck", true, 0.0, kGradTolerance, ""};
  const BackboneConfig cfg;
  std::string worst_method;
  GradCheckReport worst;
  for (const auto& m : gradient_check_methods()) {
    const auto rep = method_gradient_check(cfg, m, ctx.threads);
    if (rep.max_relative_error >= r.worst) {
      r.worst = rep.max_relative_error;
      worst_method = m.label();
      worst = rep;
    }
  }
  r.passed = r.worst < r.limit;
  r.detail = std::to_string(gradient_check_methods().size()) + " methods; worst " + worst_method + " " +
             worst.worst_parameter + "[" + std::to_string(worst.worst_index) + "]";
  return r;
}

CheckResult prop1_check(const CheckContext&) {
  CheckResult r{"prop1", true, 0.0, 1e-12, ""};
  double prev = INFINITY;
  bool decreasing = true;
  for (int i = -50; i <= 50; ++i) {
    const double c = prop1_factor(0.1 * i, 1.0);
    if (!(c < prev)) decreasing = false;
    prev = c;
  }
  Rng rng = Rng::stream(0, "verify.prop1");
  bool ordered = true;
  for (int trial = 0; trial < 100; ++trial) {
    const auto rep = check_prop1(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), 1.0);
    ordered = ordered && rep.holds;
    r.worst = std::max(r.worst, rep.ratio_discrepancy);
  }
  const double e = std::numbers::e;
  r.worst = std::max(r.worst, std::abs(prop1_factor(0.0, 1.0) - 2.0 / 3.0));
  r.worst = std::max(r.worst, std::abs(prop1_factor(1.0, 1.0) - (1.0 + e) / (1.0 + 2.0 * e)));
  r.passed = decreasing && ordered && r.worst < r.limit;
  r.detail = std::string("grid ") + (decreasing ? "strictly decreasing" : "NOT decreasing") +
             "; closed form vs norm ratio at 100 points; c(0), c(1) spot values";
  return r;
}

CheckResult lemma1_check(const CheckContext&) {
  Rng rng = Rng::stream(0, "verify.lemma1");
  CheckResult r{"lemma1", true, INFINITY, -1e-9, ""};
  int per_sample_fail = 0, trace_fail = 0;
  double worst_trace = INFINITY;
  constexpr int kTrials = 1000;
  for (int trial = 0; trial < kTrials; ++trial) {
    LabeledFeatures f;
    f.num_classes = static_cast<int>(random_dim(rng, 1, 3));
    const std::size_t d = random_dim(rng, 1, 5);
    for (int k = 0; k < f.num_classes; ++k) {
      const std::size_t count = random_dim(rng, 2, 6);
      for (std::size_t i = 0; i < count; ++i) {
        Vector x(d);
        for (double& v : x) v = std::abs(rng.normal());
        f.features.push_back(std::move(x));
        f.labels.push_back(k);
      }
    }
    const auto rep = check_lemma1(f, reciprocal_norm_scaling(f));
    if (!rep.per_sample_holds) ++per_sample_fail;
    if (!rep.trace_holds) ++trace_fail;
    r.worst = std::min(r.worst, rep.per_sample_margin);
    worst_trace = std::min(worst_trace, rep.trace_margin);
  }
  r.passed = per_sample_fail == 0 && trace_fail == 0;
  char buf[200];
  std::snprintf(buf, sizeof buf, "per-sample form failed %d/%d, trace form failed %d/%d (min trace margin %.3e)",
                per_sample_fail, kTrials, trace_fail, kTrials, worst_trace);
  r.detail = buf;
  return r;
}

CheckResult intra_class_check(const CheckContext&) {
  Rng rng = Rng::stream(0, "verify.intra_class");
  CheckResult r{"intra-class", true, 0.0, 1e-10, "trace identity and PSD diagonal on 100 random sets"};
  for (int trial = 0; trial < 100; ++trial) {
    LabeledFeatures f;
    f.num_classes = static_cast<int>(random_dim(rng, 1, 3));
    const std::size_t d = random_dim(rng, 1, 6);
    for (int k = 0; k < f.num_classes; ++k)
      for (std::size_t i = 0, c = random_dim(rng, 1, 8); i < c; ++i) {
        Vector x(d);
        for (double& v : x) v = rng.normal(0.0, 3.0);
        f.features.push_back(std::move(x));
        f.labels.push_back(k);
      }
    const auto rep = intra_class_distance(f);
    double mean_sq = 0.0;
    for (double v : rep.deviation_norms) mean_sq += v * v;
    mean_sq /= static_cast<double>(f.features.size());
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      trace += rep.sigma_w(a, a);
      if (rep.sigma_w(a, a) < -1e-10) r.passed = false;
      for (std::size_t b = 0; b < d; ++b) r.worst = std::max(r.worst, std::abs(rep.sigma_w(a, b) - rep.sigma_w(b, a)));
    }
    r.worst = std::max({r.worst, std::abs(trace - mean_sq), std::abs(rep.trace - mean_sq)});
  }
  r.passed = r.passed && r.worst < r.limit;
  return r;
}

BackboneConfig vit_base() {
  BackboneConfig cfg;
  cfg.image_side = 224;
  cfg.patch_side = 16;
  cfg.channels = 3;
  cfg.embed_dim = 768;
  cfg.num_layers = 12;
  cfg.num_heads = 12;
  cfg.mlp_hidden_dim = 3072;
  cfg.num_classes = 2;
  return cfg;
}

CheckResult param_ratio_check(const CheckContext&) {
  const BackboneConfig cfg = vit_base();
  const auto layers = static_cast<double>(cfg.num_layers);
  const double vpt = static_cast<double>(count_prompt_parameters(cfg, PeftMethod::vpt(1))) / layers;
  const double ept = static_cast<double>(count_prompt_parameters(cfg, PeftMethod::ept(1))) / layers;
  const double vpt_trainable = static_cast<double>(count_trainable(cfg, PeftMethod::vpt(1)) -
                                                   count_trainable(cfg, PeftMethod::simple(MethodTag::Linear)));
  const double ratio = vpt / ept;
  CheckResult r{"param-ratio", false, ratio, 4.0, ""};
  r.passed = vpt == 768.0 && ept == 197.0 && vpt_trainable == 768.0 * layers && ratio >= 3.8 && ratio <= 4.0;
  char buf[160];
  std::snprintf(buf, sizeof buf, "ViT-Base per layer: VPT L=1 -> %.0f, EPT L=1 -> %.0f, ratio in [3.8, 4.0]", vpt, ept);
  r.detail = buf;
  return r;
}

CheckResult zero_init_check(const CheckContext&) {
  const BackboneConfig cfg;
  const Dataset data = synth_dataset(SynthSpec::toy_colon(), 0);
  CheckResult r{"zero-init", true, 0.0, 1e-9, ""};
  bool bit_equal = true;
  auto compare = [&](const Model& model, bool exact) {
    const Model plain = plain_backbone(model);
    for (std::size_t i = 0; i < 4; ++i) {
      Graph ga, gb;
      const auto a = model.forward(ga, data.samples[i].image);
      const auto b = plain.forward(gb, data.samples[i].image);
      const double diff = std::max(max_abs_diff(a.logits().value(), b.logits().value()),
                                   max_abs_diff(a.cls().value(), b.cls().value()));
      if (exact && diff != 0.0) bit_equal = false;
      if (!exact) r.worst = std::max(r.worst, diff);
    }
  };
  compare(Model::create(cfg, PeftMethod::lora(4), 7, 1), true);
  compare(Model::create(cfg, PeftMethod::adapter(4), 7, 1), true);
  compare(Model::create(cfg, PeftMethod::vpt(0), 7, 1), false);
  Model ept = Model::create(cfg, PeftMethod::ept(2), 7, 1);
  for (auto& [name, t] : ept.parameters())
    if (name.rfind("ept.", 0) == 0) std::fill(t.data().begin(), t.data().end(), -1e9);
  compare(ept, false);
  r.passed = bit_equal && r.worst < r.limit;
  r.detail = std::string("LoRA/Adapter ") + (bit_equal ? "bit-identical" : "DIFFER") + "; VPT n_p=0 and EPT P_E=-1e9 within limit";
  return r;
}

}  // namespace

const std::vector<Check>& all_checks() {
  static const std::vector<Check> checks = {
      {"softmax", "column softmax yields probability vectors", softmax_check},
      {"proportionality", "prompted softmax column = c * plain column", proportionality_check},
      {"limit", "very negative prompts recover the plain softmax", limit_check},
      {"gradcheck", "analytic vs central-difference gradients for every method", gradcheck_check},
      {"prop1", "closed-form scaling factor vs prompted softmax", prop1_check},
      {"lemma1", "scaled intra-class distance bound, per-sample and trace forms", lemma1_check},
      {"intra-class", "intra-class matrix trace identity", intra_class_check},
      {"param-ratio", "VPT vs EPT prompt parameters at ViT-Base dims", param_ratio_check},
      {"zero-init", "zero-impact initializations match the frozen backbone", zero_init_check},
  };
  return checks;
}

Tensor sign_fault_prompted_softmax(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way) {
  Tensor flipped = ktq;
  for (double& v : flipped.data()) v = -v;
  return prompted_softmax(flipped, prompt, way);
}

std::string format_check(const CheckResult& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%-4s  %-16s worst=%.3e limit=%.0e  ", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.worst, r.limit);
  return buf + r.detail;
}

std::vector<PeftMethod> gradient_check_methods() {
  std::vector<PeftMethod> out;
  for (EmbeddingWay w : kAllEmbeddingWays) out.push_back(PeftMethod::ept(2, w, PromptMode::Deep));
  out.push_back(PeftMethod::vpt(2, PromptMode::Shallow));
  out.push_back(PeftMethod::vpt(2, PromptMode::Deep));
  out.push_back(PeftMethod::vp());
  out.push_back(PeftMethod::lora(2));
  out.push_back(PeftMethod::adapter(4));
  for (MethodTag t : {MethodTag::Bias, MethodTag::Linear, MethodTag::MLP3, MethodTag::Full}) {
    out.push_back(PeftMethod::simple(t));
  }
  return out;
}

GradCheckReport method_gradient_check(const BackboneConfig& cfg, const PeftMethod& method, unsigned threads) {
  static const Dataset data = synth_dataset(SynthSpec::toy_colon(), 0);
  Model model = Model::create(cfg, method, 11, 12);
  const TrainableMask mask = model.trainable();
  Rng rng = Rng::stream(0, "gradcheck.offset");
  for (const auto& name : mask)
    for (double& v : model.parameters().at(name).data()) v += 0.05 * rng.normal();
  const std::vector<std::size_t> batch = {0, 1};
  const Objective full = [&](const ParameterStore& p) {
    return batch_objective(model, p, data, batch, mask, LossKind::CrossEntropy);
  };
  const LossOnly loss = [&](const ParameterStore& p) {
    return batch_objective(model, p, data, batch, {}, LossKind::CrossEntropy).loss;
  };
  return finite_diff_check(full, loss, model.parameters(), mask, kGradStep, threads);
}

}  // namespace eptlab::cli

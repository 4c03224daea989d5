#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "btok/condensation.hpp"
#include "btok/trainer.hpp"

namespace btok {

struct VerifyOptions {
  std::uint64_t seed = 0;
  Index layouts = 20;
  Index shortcut_cases = 10;
  bool finite_differences = true;
  // Swapped by tests to prove the shortcut probe can fail.
  MaskBuilder mask_builder = build_mask;
};

// One line of `btok verify`. Most checks pass when delta <= tolerance;
// `expect_nonzero` checks pass when delta > tolerance.
struct CheckResult {
  std::string name;
  double delta = 0.0;
  double tolerance = 0.0;
  bool expect_nonzero = false;
  bool passed = false;
  std::string detail;
};

struct LayoutDelta {
  SegmentLayout layout;
  Index d_model = 0;
  Index n_layers = 0;
  double logit_delta = 0.0;
  double hidden_delta = 0.0;
  double grad_delta = 0.0;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  std::vector<LayoutDelta> layouts;

  bool all_passed() const;
  std::string to_text() const;
  std::string equivalence_table() const;
};

// Random f64 model with weights spread well beyond the init scale so that
// attention patterns are far from uniform.
Parameters<double> random_parameters(const ModelConfig& cfg, std::uint64_t seed);

CheckResult check_mode_equivalence(std::uint64_t seed, Index layouts, std::vector<LayoutDelta>* rows = nullptr);
CheckResult check_two_pass_kernels(std::uint64_t seed);
// Two results: detached gradient exactly zero, connected gradient nonzero.
std::vector<CheckResult> check_shortcut_gradients(std::uint64_t seed, Index cases);
// Dense path: hold BTok K/V fixed, zero the query, compare target hidden states.
CheckResult check_shortcut_freeze(std::uint64_t seed, Index cases, const MaskBuilder& builder);
CheckResult check_mask_blocks(std::uint64_t seed, const MaskBuilder& builder);
CheckResult check_finite_differences(std::uint64_t seed);
CheckResult check_gradient_cache(std::uint64_t seed);
CheckResult check_loss_oracles();

VerifyReport run_verify(const VerifyOptions& options);

}  // namespace btok

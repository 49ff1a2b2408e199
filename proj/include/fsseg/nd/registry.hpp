#pragma once

#include <algorithm>
#include <string>
#include <vector>

namespace fsseg::nd {

struct OpDescriptor {
  std::string name;
  std::string signature;
};

// The closed set of array primitives everything else in this codebase
// composes. Anything not listed here is intentionally unsupported.
inline const std::vector<OpDescriptor>& required_op_set() {
  static const std::vector<OpDescriptor> ops = {
      {"add", "elementwise broadcast add"},
      {"sub", "elementwise broadcast subtract"},
      {"mul", "elementwise broadcast multiply"},
      {"div", "elementwise broadcast divide"},
      {"neg", "elementwise negate"},
      {"sin", "elementwise sine"},
      {"cos", "elementwise cosine"},
      {"exp", "elementwise exponential"},
      {"log", "elementwise natural log"},
      {"sqrt", "elementwise square root"},
      {"rsqrt", "elementwise reciprocal square root"},
      {"sigmoid", "elementwise logistic"},
      {"softplus", "elementwise log(1+exp)"},
      {"gelu", "elementwise gaussian error linear unit"},
      {"clamp", "elementwise clamp to [lo,hi]"},
      {"scale", "multiply by scalar constant"},
      {"add_scalar", "add scalar constant"},
      {"reshape", "view with new shape, same element count"},
      {"transpose", "axis permutation"},
      {"concat", "concatenate along an axis"},
      {"slice", "rectangular subregion"},
      {"pad_zero", "zero padding per axis"},
      {"flip", "reverse one axis"},
      {"sum", "full or per-axis sum"},
      {"mean", "full or per-axis mean"},
      {"matmul", "2-d or batched 3-d matrix product"},
      {"conv2d", "NHWC convolution with stride and zero padding"},
      {"conv2d_transpose", "NHWC transposed convolution for learned upsampling"},
      {"bilinear_upsample", "bilinear resize, half-pixel centers"},
      {"layer_norm", "normalize over last axis with affine"},
      {"softmax", "softmax over last axis"},
      {"l2_normalize", "unit-norm rows over last axis"},
      {"masked_mean", "mean over positions selected by a mask"},
      {"avg_pool", "average pooling over selected axes"},
      {"attention", "multi-head self/cross attention"},
      {"ssm_recurrence", "sequential selective state-space recurrence"},
      {"selective_scan", "input-dependent state-space scan over sequences"},
  };
  return ops;
}

inline bool op_present(const std::string& name) {
  const auto& ops = required_op_set();
  return std::any_of(ops.begin(), ops.end(),
                     [&](const OpDescriptor& d) { return d.name == name; });
}

}  // namespace fsseg::nd

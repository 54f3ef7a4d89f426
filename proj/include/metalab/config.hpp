#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace metalab {

// Dimensions and learning rates of the two-layer teacher-student setup.
// N is the input dimension, K/M the student/teacher hidden widths, P/V the
// per-task support and query sample counts, eta_w/eta_J the inner and outer
// learning rates.
struct ModelConfig {
  std::int64_t N = 1000;
  int K = 3;
  int M = 3;
  std::int64_t P = 100;
  std::int64_t V = 100;
  double eta_w = 1.0;
  double eta_J = 1.0;

  void validate() const {
    if (N < 1) throw std::invalid_argument("model.N must be a positive integer");
    if (K < 1) throw std::invalid_argument("model.K must be a positive integer");
    if (M < 1) throw std::invalid_argument("model.M must be a positive integer");
    if (P < 1) throw std::invalid_argument("model.P must be a positive integer");
    if (V < 1) throw std::invalid_argument("model.V must be a positive integer");
    if (!(eta_w >= 0.0)) throw std::invalid_argument("model.eta_w must be >= 0");
    if (!(eta_J >= 0.0)) throw std::invalid_argument("model.eta_J must be >= 0");
  }
};

enum class Activation { Erf, Linear };

inline std::string to_string(Activation a) {
  return a == Activation::Erf ? "erf" : "linear";
}

// Variant knobs layered on the base model: task-to-task teacher variability
// gamma in (0,1], ridge decay lambda >= 0 on the outer loop, and additive
// label noise with variance sigma_noise2 >= 0.
struct VariantConfig {
  Activation activation = Activation::Erf;
  double gamma = 1.0;
  double lambda = 0.0;
  double sigma_noise2 = 0.0;

  void validate() const {
    if (!(gamma > 0.0) || gamma > 1.0)
      throw std::invalid_argument("variant.gamma must lie in (0, 1]");
    if (!(lambda >= 0.0))
      throw std::invalid_argument("variant.lambda must be >= 0");
    if (!(sigma_noise2 >= 0.0))
      throw std::invalid_argument("variant.sigma_noise2 must be >= 0");
    if (activation == Activation::Linear) {
      if (gamma != 1.0 || lambda != 0.0 || sigma_noise2 != 0.0)
        throw std::invalid_argument(
            "variant.activation=linear supports only gamma=1, lambda=0, "
            "sigma_noise2=0");
    }
    if (gamma < 1.0 && (lambda > 0.0 || sigma_noise2 > 0.0))
      throw std::invalid_argument(
          "variant.gamma < 1 cannot be combined with lambda > 0 or "
          "sigma_noise2 > 0");
  }
};

}  // namespace metalab

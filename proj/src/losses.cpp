#include "uqaug/losses.hpp"

namespace uqaug {

std::string to_string(Likelihood l) { return l == Likelihood::Gaussian ? "gaussian" : "laplace"; }

Likelihood parse_likelihood(const std::string& s) {
  if (s == "gaussian") return Likelihood::Gaussian;
  if (s == "laplace") return Likelihood::Laplace;
  throw ConfigError("unknown likelihood '" + s + "'");
}

}  // namespace uqaug

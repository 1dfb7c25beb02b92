#include "telapa/common.hpp"

#include <algorithm>

namespace telapa {

double quantile(std::vector<double> data, double p) {
  if (data.empty()) throw config_error("quantile: empty data");
  if (p < 0.0 || p > 1.0) throw config_error("quantile: p outside [0,1]");
  std::sort(data.begin(), data.end());
  const double h = p * double(data.size() - 1);
  const auto lo = std::size_t(std::floor(h));
  if (lo + 1 >= data.size()) return data.back();
  const double frac = h - double(lo);
  return data[lo] + frac * (data[lo + 1] - data[lo]);
}

}  // namespace telapa

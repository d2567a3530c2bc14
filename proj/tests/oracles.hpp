// SPDX-License-Identifier: Apache-2.0
//
// Independent scalar recomputation of the rate formulas, written with plain
// loops over std::complex and no shared code with src/. Used to cross-check
// the library implementations term by term.
#pragma once

#include <cmath>
#include <complex>
#include <vector>

namespace oracle {

using cd = std::complex<double>;
using cvec = std::vector<cd>;

inline double abs2(cd v) { return v.real() * v.real() + v.imag() * v.imag(); }

inline cd inner(const cvec& a, const cvec& b) {  // conj(a) . b
  cd s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
  return s;
}

inline double norm2(const cvec& a) {
  double s = 0.0;
  for (const cd& v : a) s += abs2(v);
  return s;
}

// Downlink rate of user k. h_dl[k2] is the full stacked channel of user k2
// seen... no: h_dl is the channel of user k; beams[k2] the stacked beam of
// user k2; iui[j] the scalar leakage channel from uplink user j into user k.
inline double dl_rate(const cvec& h_k, const std::vector<cvec>& beams, int k,
                      const std::vector<double>& ul_power, const std::vector<cd>& iui_into_k,
                      double noise_w) {
  double sig = abs2(inner(h_k, beams[k]));
  double itf = noise_w;
  for (size_t k2 = 0; k2 < beams.size(); ++k2)
    if ((int)k2 != k) itf += abs2(inner(h_k, beams[k2]));
  for (size_t j = 0; j < ul_power.size(); ++j) itf += ul_power[j] * abs2(iui_into_k[j]);
  return std::log2(1.0 + sig / itf);
}

// Uplink rate of user j at its serving R-RAU. h_ul[j2] is the channel from
// uplink user j2 into that R-RAU, u the combiner there, iri_w the total
// residual inter-RAU interference power per combiner-norm at that R-RAU.
inline double ul_rate(const cvec& u, const std::vector<cvec>& h_ul, int j,
                      const std::vector<double>& ul_power, double iri_w, double noise_w) {
  double un = norm2(u);
  if (un == 0.0) return 0.0;
  double sig = ul_power[j] * abs2(inner(u, h_ul[j]));
  double itf = (noise_w + iri_w) * un;
  for (size_t j2 = 0; j2 < h_ul.size(); ++j2)
    if ((int)j2 != j) itf += ul_power[j2] * abs2(inner(u, h_ul[j2]));
  return std::log2(1.0 + sig / itf);
}

}  // namespace oracle

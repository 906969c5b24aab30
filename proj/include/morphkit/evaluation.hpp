// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphkit/core.hpp"

namespace morphkit {

struct TrialOutcome {
  long long successes = 0;  // k
  long long trials = 0;     // n
};

struct IntervalResult {
  double sr = 0.0;          // empirical proportion k / n
  double lo = 0.0;
  double hi = 0.0;
  double half_width = 0.0;  // (hi - lo) / 2
};

// Acklam's rational approximation of the standard normal quantile
// (|relative error| < 1.2e-9 over (0, 1)).
inline double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, "normal_quantile: p must be in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > phigh) {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5, r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

// Pinned two-sided z for the 95% level used throughout the result tables.
inline constexpr double kZ95 = 1.959963985;

// Wilson score interval for a binomial proportion, with the half-width
// Delta = (upper - lower) / 2.
inline IntervalResult wilson_interval(const TrialOutcome& o,
                                      double confidence = 0.95) {
  require(o.trials >= 1, "wilson_interval: need at least one trial");
  require(o.successes >= 0 && o.successes <= o.trials,
          "wilson_interval: successes out of range");
  require(confidence > 0.0 && confidence < 1.0,
          "wilson_interval: confidence must be in (0, 1)");
  const double z =
      confidence == 0.95 ? kZ95 : normal_quantile(0.5 * (1.0 + confidence));
  const double n = static_cast<double>(o.trials);
  const double p = static_cast<double>(o.successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  IntervalResult r;
  r.sr = p;
  r.lo = std::max(0.0, center - half);
  r.hi = std::min(1.0, center + half);
  // At the boundaries the Wilson bound coincides with the estimate exactly;
  // pin it so rounding residue cannot leak through.
  if (o.successes == 0) r.lo = 0.0;
  if (o.successes == o.trials) r.hi = 1.0;
  r.half_width = (r.hi - r.lo) / 2.0;
  return r;
}

// Macro success rate: plain arithmetic mean of per-embodiment rates.
inline double macro_sr(std::span<const double> srs) {
  require(!srs.empty(), "macro_sr: empty list");
  double sum = 0.0;
  for (double s : srs) sum += s;
  return sum / static_cast<double>(srs.size());
}

struct SummaryRow {
  std::string name;
  double final_val_loss_mean = 0.0;
  double final_train_loss = 0.0;
  int steps = 0;
  std::string mask_mode;
  bool kt_enabled = false;
  bool film_enabled = false;
  int chunks = 1;
  int aux_tokens = 0;
  uint64_t seed = 0;
  bool best = false;
  bool second_best = false;
};

struct SummaryTable {
  std::vector<SummaryRow> rows;

  std::string to_csv() const {
    std::string out =
        "name,final_val_loss_mean,final_train_loss,steps,mask_mode,"
        "kt_enabled,film_enabled,chunks,aux_tokens,seed,best,second_best\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%d,%s,%d,%d,%d,%d,%llu,%d,%d\n",
                    r.final_val_loss_mean, r.final_train_loss, r.steps,
                    r.mask_mode.c_str(), r.kt_enabled ? 1 : 0,
                    r.film_enabled ? 1 : 0, r.chunks, r.aux_tokens,
                    static_cast<unsigned long long>(r.seed), r.best ? 1 : 0,
                    r.second_best ? 1 : 0);
      out += r.name + buf;
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
      arr.push_back({{"name", r.name},
                     {"final_val_loss_mean", r.final_val_loss_mean},
                     {"final_train_loss", r.final_train_loss},
                     {"steps", r.steps},
                     {"mask_mode", r.mask_mode},
                     {"kt_enabled", r.kt_enabled},
                     {"film_enabled", r.film_enabled},
                     {"chunks", r.chunks},
                     {"aux_tokens", r.aux_tokens},
                     {"seed", r.seed},
                     {"best", r.best},
                     {"second_best", r.second_best}});
    }
    return {{"schema_version", 1}, {"rows", std::move(arr)}};
  }
};

// Aggregates run reports into one summary table. The metric is the final
// mean validation loss (lower is better); ties are flagged, never broken.
inline SummaryTable aggregate_report(const std::vector<nlohmann::json>& reports) {
  SummaryTable table;
  if (reports.empty()) return table;
  const auto version = reports.front().at("schema_version");
  for (const auto& r : reports) {
    const auto v = r.at("schema_version");
    if (v != version) {
      throw std::invalid_argument(
          "report schema version mismatch: " + version.dump() + " vs " +
          v.dump());
    }
  }
  for (const auto& r : reports) {
    SummaryRow row;
    row.name = r.value("name", std::string("run"));
    const auto& metrics = r.at("metrics");
    row.final_val_loss_mean = metrics.at("final_val_loss_mean").get<double>();
    row.final_train_loss = metrics.at("final_train_loss").get<double>();
    const auto& cfg = r.at("config");
    row.steps = cfg.at("train").value("steps", 0);
    const auto& pol = cfg.at("policy");
    row.mask_mode = pol.value("mask_mode", std::string("no_mask"));
    row.kt_enabled = pol.value("kt_enabled", false);
    row.film_enabled = pol.value("film_enabled", false);
    row.chunks = pol.value("chunks", 1);
    row.aux_tokens = pol.value("aux_tokens", 0);
    row.seed = r.value("seed", 0ULL);
    table.rows.push_back(std::move(row));
  }
  std::sort(table.rows.begin(), table.rows.end(),
            [](const SummaryRow& a, const SummaryRow& b) { return a.name < b.name; });
  double best = table.rows.front().final_val_loss_mean;
  for (const auto& r : table.rows) best = std::min(best, r.final_val_loss_mean);
  double second = std::numeric_limits<double>::infinity();
  for (const auto& r : table.rows) {
    if (r.final_val_loss_mean > best) {
      second = std::min(second, r.final_val_loss_mean);
    }
  }
  for (auto& r : table.rows) {
    r.best = r.final_val_loss_mean == best;
    r.second_best = r.final_val_loss_mean == second;
  }
  return table;
}

}  // namespace morphkit

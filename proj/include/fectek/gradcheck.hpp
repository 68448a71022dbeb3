#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fectek/model.hpp"

namespace fectek {

struct GradCheckConfig {
  std::uint64_t seed = 42;
  double eps = 1e-3;
  double tolerance = 1e-4;
  // Entries whose gradients are both below this magnitude are compared
  // against it instead of against themselves.
  double magnitude_floor = 1e-6;
  // The default model redraws every parameter uniformly from
  // [-init_range, init_range]. Training-scale init (std 0.02) feeds layer norm
  // inputs so small that an eps step is a large relative perturbation.
  double init_range = 0.5;
  // Probe workers; 0 uses every hardware thread. Results do not depend on it.
  std::size_t threads = 0;
  // Test hook: perturbs one analytic gradient entry before comparison.
  bool corrupt_gradient = false;
};

struct GroupReport {
  std::string group;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Checked entries with |analytic| above the magnitude floor; a group with
  // none fails, since an all-zero gradient proves nothing.
  std::size_t nonzero = 0;
  // Probes whose +/-eps evaluations took a different relu/max branch than the
  // base point; central differences are undefined across a kink.
  std::size_t skipped_kinks = 0;
};

struct GradCheckReport {
  std::vector<GroupReport> groups;  // encoder, fcm, projector1, projector2
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const;
  const GroupReport& worst() const;
};

// Relative error |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

// Central finite differences of total_loss for every entry of every
// parameter of a small model on a 2-triple batch.
GradCheckReport run_gradcheck(const GradCheckConfig& config);

// Same check on a caller-provided model and batch.
GradCheckReport run_gradcheck(const FecTekModel& model, std::span<const EncodedTriple> batch,
                              const LossConfig& losses, const GradCheckConfig& config);

}  // namespace fectek

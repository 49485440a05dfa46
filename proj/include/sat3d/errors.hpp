#pragma once

#include <stdexcept>
#include <string>

namespace sat3d {

// Every library failure derives from Error so callers (CLI, HTTP layer) can
// map the category to an exit code or a status without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define SAT3D_DEFINE_ERROR(Name, tag)                 \
  class Name : public Error {                         \
   public:                                            \
    using Error::Error;                               \
    const char* kind() const noexcept override {      \
      return tag;                                     \
    }                                                 \
  };

SAT3D_DEFINE_ERROR(FormatError, "format")
SAT3D_DEFINE_ERROR(IntegrityError, "integrity")
SAT3D_DEFINE_ERROR(DegenerateInputError, "degenerate_input")
SAT3D_DEFINE_ERROR(SpecError, "spec")
SAT3D_DEFINE_ERROR(ConfigError, "config")
SAT3D_DEFINE_ERROR(ShapeError, "shape")
SAT3D_DEFINE_ERROR(PromptBoundsError, "prompt_bounds")
SAT3D_DEFINE_ERROR(BudgetExceededError, "budget_exceeded")
SAT3D_DEFINE_ERROR(NoForegroundError, "no_foreground")
SAT3D_DEFINE_ERROR(UndefinedMetricError, "undefined_metric")
SAT3D_DEFINE_ERROR(MetadataError, "metadata")
SAT3D_DEFINE_ERROR(CheckpointError, "checkpoint")
SAT3D_DEFINE_ERROR(TrainingError, "training")
SAT3D_DEFINE_ERROR(GapError, "gap")

#undef SAT3D_DEFINE_ERROR

}  // namespace sat3d

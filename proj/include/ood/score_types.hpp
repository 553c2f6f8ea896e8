#pragma once

#include <string>

namespace ood::scores {

// One test sample as seen by a detector. id_score is oriented so that higher
// means more in-distribution, whatever the method; is_ood is ground truth and
// is filled by the caller, not by the scoring functions.
struct ScoredSample {
  double id_score = 0.0;
  bool is_ood = false;
  int predicted_class = -1;
  std::string method;
};

} // namespace ood::scores

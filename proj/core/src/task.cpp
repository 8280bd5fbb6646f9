#include "nodulenet/task.hpp"

#include "nodulenet/error.hpp"

namespace nodulenet {

std::string_view to_string(Task t) {
  switch (t) {
    case Task::multiclass4: return "multiclass4";
    case Task::multiclass5: return "multiclass5";
    case Task::binary: return "binary";
  }
  return "?";
}

Task parse_task(std::string_view s) {
  if (s == "multiclass4") return Task::multiclass4;
  if (s == "multiclass5") return Task::multiclass5;
  if (s == "binary") return Task::binary;
  throw ValidationError("unknown task: " + std::string(s));
}

std::string_view to_string(Aggregation a) { return a == Aggregation::sum ? "sum" : "max"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "sum") return Aggregation::sum;
  if (s == "max") return Aggregation::max;
  throw ValidationError("unknown aggregation: " + std::string(s));
}

int num_outputs(Task t) {
  switch (t) {
    case Task::multiclass4: return 4;
    case Task::multiclass5: return 5;
    case Task::binary: return 1;
  }
  return 0;
}

int num_classes(Task t) { return t == Task::binary ? 2 : num_outputs(t); }

std::vector<std::string> class_names(Task t) {
  switch (t) {
    case Task::multiclass4:
      return {"HighlyUnlikely", "ModeratelyUnlikely", "ModeratelySuspicious", "HighlySuspicious"};
    case Task::multiclass5:
      return {"HighlyUnlikely", "ModeratelyUnlikely", "Indeterminate", "ModeratelySuspicious", "HighlySuspicious"};
    case Task::binary:
      return {"NotDangerous", "Dangerous"};
  }
  return {};
}

int class_index(SuspicionLevel s, Task t) {
  switch (t) {
    case Task::binary:
      return static_cast<int>(binarize_label(s));
    case Task::multiclass5:
      return code_of(s);
    case Task::multiclass4:
      if (s == SuspicionLevel::Indeterminate) throw ValidationError("Indeterminate has no class in multiclass4");
      return code_of(s) < 2 ? code_of(s) : code_of(s) - 1;
  }
  return 0;
}

SuspicionLevel level_of_class(int index, Task t) {
  switch (t) {
    case Task::binary:
      throw ValidationError("binary classes do not map back to a single suspicion level");
    case Task::multiclass5:
      return suspicion_from_code(index);
    case Task::multiclass4:
      if (index < 0 || index > 3) throw ValidationError("class index out of range");
      return suspicion_from_code(index < 2 ? index : index + 1);
  }
  return SuspicionLevel::Indeterminate;
}

}  // namespace nodulenet

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "nodulenet/annotations.hpp"

namespace nodulenet {

/// multiclass4 drops Indeterminate, multiclass5 keeps it, binary predicts
/// P(Dangerous) from a single logit.
enum class Task { multiclass4, multiclass5, binary };

enum class Aggregation { sum, max };

std::string_view to_string(Task t);
Task parse_task(std::string_view s);
std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);

/// Logit count of the model head.
int num_outputs(Task t);
/// Classes used for metrics (2 for binary).
int num_classes(Task t);
std::vector<std::string> class_names(Task t);

/// Training target of an aggregated label. Throws for Indeterminate unless
/// the task is multiclass5.
int class_index(SuspicionLevel s, Task t);
SuspicionLevel level_of_class(int index, Task t);

}  // namespace nodulenet

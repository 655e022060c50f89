#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npstream/models.hpp"

namespace npstream {

// Task containers: magic "NPTK", version u32, task count, feature dims, then
// per task the context/target sizes and little-endian f64 arrays in the order
// X_c | Y_c | X_t | Y_t. A plain CSV writer is provided for inspection.

inline constexpr std::uint32_t kTaskFileVersion = 1;

struct TaskRecord {
    Tensor xc, yc;  // (N_c, d_x), (N_c, d_y)
    Tensor xt, yt;  // (N_t, d_x), (N_t, d_y)
};

struct TaskFile {
    i64 d_x = 1;
    i64 d_y = 1;
    std::vector<TaskRecord> tasks;

    void validate() const;
};

void write_task_file(const TaskFile& file, const std::string& path);
TaskFile read_task_file(const std::string& path);

// One row per point: task, role (ctx|tgt), idx, x..., y...
void write_task_csv(const TaskFile& file, const std::string& path);

// Single-task batch (B = 1) for the forward pass.
TaskBatch record_to_batch(const TaskRecord& rec);

}  // namespace npstream

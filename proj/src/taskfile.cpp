#include "npstream/taskfile.hpp"

#include <bit>
#include <fstream>
#include <locale>
#include <sstream>

#include "npstream/error.hpp"

namespace npstream {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>(static_cast<std::uint8_t>(v >> (8 * i))));
}

void put_u64(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>(static_cast<std::uint8_t>(v >> (8 * i))));
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        const int c = in.get();
        if (c == EOF) throw ValueError("task file: truncated");
        v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(c)) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(std::istream& in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        const int c = in.get();
        if (c == EOF) throw ValueError("task file: truncated");
        v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(c)) << (8 * i);
    }
    return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

void put_matrix(std::ostream& out, const Tensor& t) {
    for (double v : t.data) put_f64(out, v);
}

Tensor get_matrix(std::istream& in, i64 rows, i64 cols) {
    Tensor t({rows, cols});
    for (double& v : t.data) v = get_f64(in);
    return t;
}

void check_record(const TaskRecord& rec, i64 d_x, i64 d_y, std::size_t idx) {
    const std::string who = "task file: task " + std::to_string(idx);
    if (rec.xc.rank() != 2 || rec.yc.rank() != 2 || rec.xt.rank() != 2 || rec.yt.rank() != 2)
        throw ShapeError(who + ": all arrays must be rank 2");
    if (rec.xc.dim(1) != d_x || rec.xt.dim(1) != d_x) throw ShapeError(who + ": d_x mismatch");
    if (rec.yc.dim(1) != d_y || rec.yt.dim(1) != d_y) throw ShapeError(who + ": d_y mismatch");
    if (rec.xc.dim(0) != rec.yc.dim(0)) throw ShapeError(who + ": context x/y row mismatch");
    if (rec.xt.dim(0) != rec.yt.dim(0)) throw ShapeError(who + ": target x/y row mismatch");
    if (rec.xc.dim(0) < 1 || rec.xt.dim(0) < 1) throw ValueError(who + ": needs context and target points");
}

void write_point_row(std::ostream& out, std::size_t task, const char* role, i64 idx, const Tensor& X,
                     const Tensor& Y) {
    std::ostringstream row;
    row.imbue(std::locale::classic());
    row.precision(17);
    row << task << ',' << role << ',' << idx;
    for (i64 j = 0; j < X.dim(1); ++j) row << ',' << X.at(idx, j);
    for (i64 j = 0; j < Y.dim(1); ++j) row << ',' << Y.at(idx, j);
    out << row.str() << '\n';
}

}  // namespace

void TaskFile::validate() const {
    if (d_x < 1 || d_y < 1) throw ValueError("task file: d_x/d_y must be >= 1");
    if (tasks.empty()) throw ValueError("task file: no tasks");
    for (std::size_t i = 0; i < tasks.size(); ++i) check_record(tasks[i], d_x, d_y, i);
}

void write_task_file(const TaskFile& file, const std::string& path) {
    file.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValueError("task file: cannot open '" + path + "' for writing");
    out.write("NPTK", 4);
    put_u32(out, kTaskFileVersion);
    put_u64(out, file.tasks.size());
    put_u64(out, static_cast<std::uint64_t>(file.d_x));
    put_u64(out, static_cast<std::uint64_t>(file.d_y));
    for (const TaskRecord& rec : file.tasks) {
        put_u64(out, static_cast<std::uint64_t>(rec.xc.dim(0)));
        put_u64(out, static_cast<std::uint64_t>(rec.xt.dim(0)));
        put_matrix(out, rec.xc);
        put_matrix(out, rec.yc);
        put_matrix(out, rec.xt);
        put_matrix(out, rec.yt);
    }
    if (!out) throw ValueError("task file: write failed for '" + path + "'");
}

TaskFile read_task_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("task file: cannot open '" + path + "'");
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string(magic, 4) != "NPTK")
        throw ValueError("task file: bad magic, not a task file");
    const std::uint32_t version = get_u32(in);
    if (version != kTaskFileVersion)
        throw ValueError("task file: unsupported format version " + std::to_string(version));
    const std::uint64_t n_tasks = get_u64(in);
    TaskFile file;
    file.d_x = static_cast<i64>(get_u64(in));
    file.d_y = static_cast<i64>(get_u64(in));
    if (file.d_x < 1 || file.d_y < 1 || n_tasks < 1) throw ValueError("task file: bad header counts");
    for (std::uint64_t t = 0; t < n_tasks; ++t) {
        const i64 n_c = static_cast<i64>(get_u64(in));
        const i64 n_t = static_cast<i64>(get_u64(in));
        if (n_c < 1 || n_t < 1) throw ValueError("task file: bad point counts in task " + std::to_string(t));
        TaskRecord rec;
        rec.xc = get_matrix(in, n_c, file.d_x);
        rec.yc = get_matrix(in, n_c, file.d_y);
        rec.xt = get_matrix(in, n_t, file.d_x);
        rec.yt = get_matrix(in, n_t, file.d_y);
        file.tasks.push_back(std::move(rec));
    }
    if (in.peek() != EOF) throw ValueError("task file: trailing bytes");
    return file;
}

void write_task_csv(const TaskFile& file, const std::string& path) {
    file.validate();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValueError("task file: cannot open '" + path + "' for writing");
    out << "task,role,idx";
    for (i64 j = 0; j < file.d_x; ++j) out << ",x" << j;
    for (i64 j = 0; j < file.d_y; ++j) out << ",y" << j;
    out << '\n';
    for (std::size_t t = 0; t < file.tasks.size(); ++t) {
        const TaskRecord& rec = file.tasks[t];
        for (i64 i = 0; i < rec.xc.dim(0); ++i) write_point_row(out, t, "ctx", i, rec.xc, rec.yc);
        for (i64 i = 0; i < rec.xt.dim(0); ++i) write_point_row(out, t, "tgt", i, rec.xt, rec.yt);
    }
    if (!out) throw ValueError("task file: write failed for '" + path + "'");
}

TaskBatch record_to_batch(const TaskRecord& rec) {
    const auto lift = [](const Tensor& m) {
        Tensor out({1, m.dim(0), m.dim(1)});
        out.data = m.data;
        return out;
    };
    TaskBatch task;
    task.xc = lift(rec.xc);
    task.yc = lift(rec.yc);
    task.xt = lift(rec.xt);
    task.yt = lift(rec.yt);
    return task;
}

}  // namespace npstream

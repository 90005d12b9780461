#include "treecss/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace treecss::data {

const Vector& ClientTable::at(SampleId id) const {
    auto it = rows.find(id);
    if (it == rows.end())
        throw std::out_of_range("client " + std::to_string(client_id) + ": unknown sample id " +
                                std::to_string(id));
    return it->second;
}

std::vector<SampleId> ClientTable::ids() const {
    std::vector<SampleId> out;
    out.reserve(rows.size());
    for (const auto& [id, _] : rows) out.push_back(id);
    return out;
}

Scalar LabelTable::at(SampleId id) const {
    auto it = rows.find(id);
    if (it == rows.end()) throw std::out_of_range("unknown label id " + std::to_string(id));
    return it->second;
}

Index VerticalDataset::total_dim() const {
    Index d = 0;
    for (const auto& c : clients) d += c.dim;
    return d;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

Scalar parse_number(const std::string& s, std::size_t line_no, const std::string& col) {
    try {
        std::size_t used = 0;
        Scalar v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("csv line " + std::to_string(line_no) + ", column '" + col +
                                 "': not a number: '" + s + "'");
    }
}

}  // namespace

VerticalDataset parse_csv_dataset(std::istream& in, const std::string& label_column, Task task) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("csv: empty input");
    const auto header = split_csv_line(line);

    std::ptrdiff_t label_idx = -1, id_idx = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == label_column) label_idx = static_cast<std::ptrdiff_t>(i);
        if (header[i] == "id") id_idx = static_cast<std::ptrdiff_t>(i);
    }
    if (label_idx < 0) throw std::runtime_error("csv: missing label column '" + label_column + "'");

    VerticalDataset ds;
    ds.task = task;
    ClientTable table;
    table.client_id = 1;
    table.dim = static_cast<Index>(header.size()) - 1 - (id_idx >= 0 ? 1 : 0);
    if (table.dim <= 0) throw std::runtime_error("csv: no feature columns");

    std::size_t line_no = 1;
    SampleId next_id = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("csv line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(header.size()) + " cells, got " +
                                     std::to_string(cells.size()));
        SampleId id = id_idx >= 0
                          ? static_cast<SampleId>(parse_number(cells[id_idx], line_no,
                                                               header[static_cast<std::size_t>(id_idx)]))
                          : next_id++;
        Vector x(table.dim);
        Index k = 0;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (static_cast<std::ptrdiff_t>(i) == label_idx || static_cast<std::ptrdiff_t>(i) == id_idx)
                continue;
            x[k++] = parse_number(cells[i], line_no, header[i]);
        }
        if (table.rows.count(id))
            throw std::runtime_error("csv line " + std::to_string(line_no) + ": duplicate id " +
                                     std::to_string(id));
        table.rows.emplace(id, std::move(x));
        ds.labels.rows[id] =
            parse_number(cells[static_cast<std::size_t>(label_idx)], line_no,
                         header[static_cast<std::size_t>(label_idx)]);
    }
    if (table.rows.empty()) throw std::runtime_error("csv: no data rows");

    if (task.kind == TaskKind::Classification) {
        Scalar max_label = 0;
        for (const auto& [id, y] : ds.labels.rows) {
            if (y < 0 || y != std::floor(y))
                throw std::runtime_error("classification labels must be non-negative integers, got " +
                                         std::to_string(y));
            max_label = std::max(max_label, y);
        }
        int inferred = static_cast<int>(max_label) + 1;
        if (ds.task.num_classes == 0) ds.task.num_classes = inferred;
        if (inferred > ds.task.num_classes)
            throw std::runtime_error("label " + std::to_string(max_label) + " exceeds num_classes " +
                                     std::to_string(ds.task.num_classes));
    }

    ds.clients.push_back(std::move(table));
    return ds;
}

VerticalDataset load_csv_dataset(const std::string& path, const std::string& label_column, Task task) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv: " + path);
    return parse_csv_dataset(in, label_column, task);
}

void dump_csv(const VerticalDataset& ds, std::ostream& out) {
    out << "id";
    for (const auto& c : ds.clients)
        for (Index j = 0; j < c.dim; ++j) out << ",x" << c.client_id << "_" << j;
    out << ",label\n";
    out.precision(17);
    for (const auto& [id, y] : ds.labels.rows) {
        out << id;
        for (const auto& c : ds.clients) {
            const Vector& x = c.at(id);
            for (Index j = 0; j < c.dim; ++j) out << "," << x[j];
        }
        out << "," << y << "\n";
    }
}

void dump_csv_file(const VerticalDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write csv: " + path);
    dump_csv(ds, out);
}

VerticalDataset vertical_partition(const VerticalDataset& single, int m, std::uint64_t seed) {
    (void)seed;  // columns are assigned contiguously; the seed is reserved
    if (single.clients.size() != 1)
        throw std::invalid_argument("vertical_partition expects a single-client dataset");
    if (m < 1) throw std::invalid_argument("vertical_partition: m must be >= 1");
    const ClientTable& src = single.clients[0];
    const Index d = src.dim;
    if (d < m)
        throw std::invalid_argument("vertical_partition: fewer feature columns than clients");

    const Index hi = (d + m - 1) / m;  // ceil
    const Index lo = d / m;
    const Index n_hi = d % m;  // first n_hi clients take hi columns

    VerticalDataset out;
    out.labels = single.labels;
    out.task = single.task;
    Index col = 0;
    for (int i = 0; i < m; ++i) {
        ClientTable t;
        t.client_id = i + 1;
        t.dim = (i < n_hi) ? hi : lo;
        for (const auto& [id, x] : src.rows) t.rows.emplace(id, x.segment(col, t.dim));
        col += t.dim;
        out.clients.push_back(std::move(t));
    }
    return out;
}

std::vector<std::vector<SampleId>> synthesize_id_sets(std::size_t n_base, int m, double overlap,
                                                      std::uint64_t seed) {
    if (m < 2) throw std::invalid_argument("synthesize_id_sets: need at least 2 parties");
    if (overlap < 0.0 || overlap > 1.0)
        throw std::invalid_argument("synthesize_id_sets: overlap must be in [0,1]");
    std::size_t n_common = static_cast<std::size_t>(std::ceil(overlap * static_cast<double>(n_base)));
    if (n_common > n_base) n_common = n_base;
    const std::size_t n_private = n_base - n_common;

    // Ids are drawn from disjoint ranges so private paddings can never collide.
    std::vector<std::vector<SampleId>> sets(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        auto& s = sets[static_cast<std::size_t>(i)];
        s.reserve(n_base);
        for (std::size_t j = 0; j < n_common; ++j) s.push_back(static_cast<SampleId>(j));
        const SampleId base = static_cast<SampleId>(n_base) * static_cast<SampleId>(i + 1);
        for (std::size_t j = 0; j < n_private; ++j) s.push_back(base + static_cast<SampleId>(j));
        std::mt19937_64 rng(mix_seed(seed, "idset", static_cast<std::uint64_t>(i)));
        std::shuffle(s.begin(), s.end(), rng);
    }
    return sets;
}

VerticalDataset generate_blobs(std::size_t n, Index d, int m, int l, Scalar separation,
                               std::uint64_t seed, TaskKind kind, int modes) {
    if (n == 0 || d < 1 || m < 1 || l < 1) throw std::invalid_argument("generate_blobs: bad shape");
    if (kind == TaskKind::Regression) l = 1;
    if (modes == 0) modes = l;
    if (modes < l) throw std::invalid_argument("generate_blobs: modes < classes");

    std::mt19937_64 rng(mix_seed(seed, "blobs"));
    std::normal_distribution<Scalar> noise(0.0, 1.0);
    const Vector u = Vector::Ones(d) / std::sqrt(static_cast<Scalar>(d));

    VerticalDataset single;
    single.task.kind = kind;
    single.task.num_classes = (kind == TaskKind::Classification) ? l : 0;
    ClientTable t;
    t.client_id = 1;
    t.dim = d;
    for (std::size_t i = 0; i < n; ++i) {
        const int mode = static_cast<int>(i % static_cast<std::size_t>(modes));
        Vector x = separation * static_cast<Scalar>(mode) * u;
        for (Index j = 0; j < d; ++j) x[j] += noise(rng);
        const SampleId id = static_cast<SampleId>(i);
        if (kind == TaskKind::Classification)
            single.labels.rows[id] = static_cast<Scalar>(mode % l);
        else
            single.labels.rows[id] = x.dot(u);
        t.rows.emplace(id, std::move(x));
    }
    single.clients.push_back(std::move(t));
    return m == 1 ? single : vertical_partition(single, m, seed);
}

VerticalDataset restrict_to(const VerticalDataset& ds, const std::vector<SampleId>& ids) {
    VerticalDataset out;
    out.task = ds.task;
    for (const auto& c : ds.clients) {
        ClientTable t;
        t.client_id = c.client_id;
        t.dim = c.dim;
        for (SampleId id : ids) t.rows.emplace(id, c.at(id));
        out.clients.push_back(std::move(t));
    }
    for (SampleId id : ids) out.labels.rows[id] = ds.labels.at(id);
    return out;
}

Matrix gather_rows(const ClientTable& t, const std::vector<SampleId>& ids) {
    Matrix x(static_cast<Index>(ids.size()), t.dim);
    for (std::size_t i = 0; i < ids.size(); ++i) x.row(static_cast<Index>(i)) = t.at(ids[i]).transpose();
    return x;
}

Vector gather_labels(const LabelTable& t, const std::vector<SampleId>& ids) {
    Vector y(static_cast<Index>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) y[static_cast<Index>(i)] = t.at(ids[i]);
    return y;
}

}  // namespace treecss::data

#pragma once

#include "treecss/types.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace treecss::data {

enum class TaskKind { Classification, Regression };

struct Task {
    TaskKind kind = TaskKind::Classification;
    int num_classes = 0;  // classification only; 0 = infer from labels
};

/// One party's vertical slice: a fixed feature width and a keyed row store.
/// Key sets of different clients may disagree until PSI alignment.
struct ClientTable {
    int client_id = 0;  // 1-based
    Index dim = 0;
    std::map<SampleId, Vector> rows;

    const Vector& at(SampleId id) const;
    bool contains(SampleId id) const { return rows.count(id) != 0; }
    std::vector<SampleId> ids() const;  // ascending
};

struct LabelTable {
    std::map<SampleId, Scalar> rows;

    Scalar at(SampleId id) const;
    bool contains(SampleId id) const { return rows.count(id) != 0; }
};

struct VerticalDataset {
    std::vector<ClientTable> clients;  // client m at index m-1
    LabelTable labels;
    Task task;

    int num_clients() const { return static_cast<int>(clients.size()); }
    Index total_dim() const;
};

/// Reads a headered CSV into a single-client dataset. The label column is
/// removed from the features; a column named "id" (if present) supplies the
/// SampleIds, otherwise row order does. Classification labels must be
/// non-negative integers; num_classes is inferred as max+1 when unset.
VerticalDataset load_csv_dataset(const std::string& path, const std::string& label_column, Task task);
VerticalDataset parse_csv_dataset(std::istream& in, const std::string& label_column, Task task);

void dump_csv(const VerticalDataset& ds, std::ostream& out);
void dump_csv_file(const VerticalDataset& ds, const std::string& path);

/// Splits feature columns contiguously over m clients. The first (d mod m)
/// clients take ceil(d/m) columns, the rest floor(d/m). Labels stay put.
VerticalDataset vertical_partition(const VerticalDataset& single, int m, std::uint64_t seed);

/// Per-client key sets with a planted common core for PSI benches:
/// floor(overlap * n_base) ids shared by all m parties, the remainder of each
/// party's n_base ids disjoint private padding. Each set is returned in a
/// seeded shuffle order.
std::vector<std::vector<SampleId>> synthesize_id_sets(std::size_t n_base, int m, double overlap,
                                                      std::uint64_t seed);

/// Isotropic Gaussian blobs, already split across m clients. Mode centers sit
/// at separation * j * u (u = normalized all-ones); labels are mode % l for
/// classification and the noiseless projection <x, u> for regression. modes=0
/// means one mode per class.
VerticalDataset generate_blobs(std::size_t n, Index d, int m, int l, Scalar separation,
                               std::uint64_t seed, TaskKind kind = TaskKind::Classification,
                               int modes = 0);

/// Keeps only the given ids (all of which must be present in every slice).
VerticalDataset restrict_to(const VerticalDataset& ds, const std::vector<SampleId>& ids);

/// Dense row matrix for a client slice, rows following `ids` order.
Matrix gather_rows(const ClientTable& t, const std::vector<SampleId>& ids);
Vector gather_labels(const LabelTable& t, const std::vector<SampleId>& ids);

}  // namespace treecss::data

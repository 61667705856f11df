#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "fermi/access.hpp"
#include "fermi/mat.hpp"

namespace fermi::rel {

enum class ColKind : std::uint8_t { Numeric = 0, Categorical = 1 };

struct ColumnSpec {
  std::string name;
  ColKind kind = ColKind::Numeric;
  std::vector<std::string> categories;  // declared values, categorical only
};

struct ForeignKey {
  std::string column;        // FK column in the child table
  std::string parent_table;  // referenced table (by its primary key)
};

struct TableSchema {
  std::string name;
  std::string primary_key;
  std::vector<ColumnSpec> columns;  // attribute columns; keys live separately
  std::vector<ForeignKey> foreign_keys;
};

// DAG of tables with child -> parent foreign-key edges.
class RelationalSchema {
 public:
  void add_table(TableSchema table);
  bool has_table(const std::string& name) const;
  const TableSchema& table(const std::string& name) const;
  const std::vector<std::string>& table_order() const { return order_; }

  // Direct parents of a table, in FK declaration order.
  std::vector<std::string> parents_of(const std::string& name) const;
  // Tables holding a FK that references `name`.
  std::vector<std::string> children_of(const std::string& name) const;

  // DAG property, FK target existence. Throws CycleError / ValidationError.
  void validate() const;

  // Structured-text schema format: `table <name>` blocks with
  // `pk <col>` / `col <name>:<kind>[:<c1,c2,...>]` lines closed by `end`,
  // followed by `fk <child>.<col> -> <parent>.<pk>` lines.
  static RelationalSchema parse(std::istream& is);
  static RelationalSchema parse_file(const std::string& path);
  void write(std::ostream& os) const;

 private:
  std::map<std::string, TableSchema> tables_;
  std::vector<std::string> order_;
};

// Column layout of a (possibly joined) record view. Joined layouts carry
// path-labeled column names so a table reached twice stays distinguishable.
struct RowLayout {
  std::vector<ColumnSpec> cols;
  std::size_t index_of(const std::string& name) const;
};
using LayoutPtr = std::shared_ptr<const RowLayout>;

// Key-free attribute view of one record: numeric values as-is, categorical
// values as category codes. Never contains primary or foreign key values.
struct RecordView {
  std::string source;
  std::uint64_t id = 0;  // primary key of the originating child row
  std::vector<double> values;
  LayoutPtr layout;
};

struct Table {
  std::vector<std::int64_t> pk;
  std::vector<std::vector<std::int64_t>> fk;  // aligned with schema FK order
  Matrix attrs;                               // rows x attribute columns
  std::unordered_map<std::int64_t, std::size_t> by_pk;
};

class Database {
 public:
  Database() = default;
  Database(RelationalSchema schema, std::map<std::string, Table> tables);

  const RelationalSchema& schema() const { return schema_; }
  const Table& table(const std::string& name) const;
  std::size_t row_count(const std::string& name) const;
  LayoutPtr layout(const std::string& name) const;

  RecordView record(const std::string& table, std::size_t row,
                    AccessLog* log = nullptr) const;
  RecordView record_by_pk(const std::string& table, std::int64_t pk,
                          AccessLog* log = nullptr) const;

  // Loads a schema file plus one CSV per table and validates referential
  // integrity. CSVs are UTF-8 with a header row naming the declared columns.
  static Database load(const std::string& schema_path, const std::string& csv_dir);

  // Writes the schema file and one CSV per table (the generator's output
  // format; also what load() reads back).
  void save(const std::string& schema_path, const std::string& csv_dir) const;

 private:
  RelationalSchema schema_;
  std::map<std::string, Table> tables_;
  std::map<std::string, LayoutPtr> layouts_;
};

// Scoped read handle: every record fetch is written to the access log, and
// tables outside the allowed set are a hard AccessViolation. This is how the
// threat-model contracts stay assertable instead of assumed.
class DatabaseView {
 public:
  DatabaseView(const Database& db, AccessLog* log,
               std::optional<std::set<std::string>> allowed_tables = std::nullopt)
      : db_(&db), log_(log), allowed_(std::move(allowed_tables)) {}

  RecordView record(const std::string& table, std::size_t row) const;
  RecordView record_by_pk(const std::string& table, std::int64_t pk) const;
  const RelationalSchema& schema() const { return db_->schema(); }
  const Database& database() const { return *db_; }
  AccessLog* log() const { return log_; }

  void check_allowed(const std::string& table) const;

 private:
  const Database* db_;
  AccessLog* log_;
  std::optional<std::set<std::string>> allowed_;
};

enum class SideInfo : std::uint8_t { Pcsi = 0, Frsi = 1 };
std::string side_info_name(SideInfo side);
SideInfo side_info_from_name(const std::string& name);

struct JoinOptions {
  // FRSI only: append fixed-width aggregates (count + per-numeric-column
  // mean) over rows of tables that reference the target table.
  bool child_aggregates = false;
};

// Child attributes followed by the linked parent-row attributes, all key
// columns dropped, deterministic schema order.
RecordView join_parent(const DatabaseView& db, const RecordView& child,
                       const std::string& parent_table, const std::string& fk_column);

// Child attributes joined with every table on every directed ancestor path
// (depth-first in FK declaration order), deduplicated by path-labeled names.
RecordView join_neighborhood(const DatabaseView& db, const RecordView& child,
                             const JoinOptions& options = {});

// The augmented record x-tilde for one side-information setting. PCSI joins
// the first declared parent; FRSI joins the full ancestor neighborhood.
RecordView augment(const DatabaseView& db, const RecordView& child, SideInfo side,
                   const JoinOptions& options = {});
LayoutPtr augmented_layout(const Database& db, const std::string& table,
                           SideInfo side, const JoinOptions& options = {});

// Z-scores numeric columns, one-hot encodes categorical columns. Fit on
// training rows only; apply anywhere.
class Encoder {
 public:
  Encoder() = default;
  static Encoder fit(LayoutPtr layout, const std::vector<RecordView>& rows);

  std::vector<double> encode(const RecordView& row) const;
  Matrix encode_batch(const std::vector<RecordView>& rows) const;
  // Inverse on encoded vectors: numeric de-standardized, categorical by
  // argmax over its one-hot block.
  RecordView decode(std::span<const double> encoded) const;

  std::size_t encoded_width() const { return width_; }
  const RowLayout& layout() const { return *layout_; }
  LayoutPtr layout_ptr() const { return layout_; }

  void save(std::ostream& os) const;
  static Encoder load(std::istream& is);
  friend bool operator==(const Encoder& a, const Encoder& b);

 private:
  LayoutPtr layout_;
  std::vector<double> mean_, std_;  // per column; 0/1 for categorical slots
  std::vector<std::size_t> offset_; // encoded offset per column
  std::size_t width_ = 0;
};

// Disjoint shadow/target partitions plus the held-out non-member pool, all
// as primary-key sets of the target table.
struct ExperimentSplit {
  std::string target_table;
  std::vector<std::vector<std::int64_t>> shadow_partitions;
  std::vector<std::vector<std::int64_t>> target_partitions;
  std::vector<std::int64_t> pool;
  std::uint64_t seed = 0;

  bool is_member(std::int64_t pk, std::size_t shadow_index) const;
  bool in_any_partition(std::int64_t pk) const;

  std::string to_json() const;
  static ExperimentSplit from_json(const std::string& text);
};

ExperimentSplit make_split(const Database& db, const std::string& target_table,
                           std::size_t shadows, std::size_t targets,
                           std::size_t rows_per_model, std::uint64_t seed);

// Balanced labeled challenge records for one target model. Non-members come
// from the pool, sliced disjointly across target indices.
struct ChallengeSet {
  std::vector<RecordView> records;
  std::vector<int> labels;
};
ChallengeSet build_challenge(const Database& db, const ExperimentSplit& split,
                             std::size_t target_index, std::size_t members,
                             std::size_t nonmembers, std::uint64_t seed);

// Synthetic relational benchmark: parent tables with mixed columns, child
// numeric attributes correlated with their parent's at strength rho
// (child = rho * parent + sqrt(1 - rho^2) * noise).
struct BenchmarkSpec {
  int depth = 2;  // 2 or 3 tables in a chain
  std::size_t rows = 500;
  double rho = 0.9;
  std::uint64_t seed = 0;
};
Database generate_benchmark(const BenchmarkSpec& spec);

// The table under attack in a generated benchmark.
constexpr const char* kBenchmarkTargetTable = "child";

}  // namespace fermi::rel

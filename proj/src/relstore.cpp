#include "fermi/relstore.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "fermi/errors.hpp"
#include "fermi/io.hpp"
#include "fermi/rng.hpp"
#include "json.hpp"

namespace fermi::rel {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Schema

void RelationalSchema::add_table(TableSchema table) {
  if (tables_.count(table.name))
    throw ValidationError("schema: duplicate table '" + table.name + "'");
  order_.push_back(table.name);
  tables_.emplace(table.name, std::move(table));
}

bool RelationalSchema::has_table(const std::string& name) const {
  return tables_.count(name) > 0;
}

const TableSchema& RelationalSchema::table(const std::string& name) const {
  auto it = tables_.find(name);
  if (it == tables_.end())
    throw ValidationError("schema: unknown table '" + name + "'");
  return it->second;
}

std::vector<std::string> RelationalSchema::parents_of(const std::string& name) const {
  std::vector<std::string> out;
  for (const ForeignKey& fk : table(name).foreign_keys)
    out.push_back(fk.parent_table);
  return out;
}

std::vector<std::string> RelationalSchema::children_of(const std::string& name) const {
  std::vector<std::string> out;
  for (const std::string& t : order_)
    for (const ForeignKey& fk : table(t).foreign_keys)
      if (fk.parent_table == name) {
        out.push_back(t);
        break;
      }
  return out;
}

void RelationalSchema::validate() const {
  for (const auto& [name, t] : tables_) {
    if (t.primary_key.empty())
      throw ValidationError("schema: table '" + name + "' has no primary key");
    for (const ColumnSpec& c : t.columns)
      if (c.kind == ColKind::Categorical && c.categories.empty())
        throw ValidationError("schema: categorical column '" + name + "." + c.name +
                              "' declares no categories");
    for (const ForeignKey& fk : t.foreign_keys)
      if (!tables_.count(fk.parent_table))
        throw ValidationError("schema: foreign key " + name + "." + fk.column +
                              " references unknown table '" + fk.parent_table + "'");
  }
  // Cycle detection over child -> parent edges (DFS, three colors).
  std::map<std::string, int> color;
  std::function<void(const std::string&)> visit = [&](const std::string& u) {
    color[u] = 1;
    for (const ForeignKey& fk : table(u).foreign_keys) {
      int c = color.count(fk.parent_table) ? color[fk.parent_table] : 0;
      if (c == 1)
        throw CycleError("schema: foreign-key cycle through table '" +
                         fk.parent_table + "'");
      if (c == 0) visit(fk.parent_table);
    }
    color[u] = 2;
  };
  for (const std::string& t : order_)
    if (!color.count(t) || color[t] == 0) visit(t);
}

namespace {

std::string trim(std::string s) {
  auto issp = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\r'; };
  while (!s.empty() && issp(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
  while (!s.empty() && issp(static_cast<unsigned char>(s.back()))) s.pop_back();
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = s.find(sep, pos);
    if (next == std::string::npos) {
      parts.push_back(s.substr(pos));
      break;
    }
    parts.push_back(s.substr(pos, next - pos));
    pos = next + 1;
  }
  return parts;
}

}  // namespace

RelationalSchema RelationalSchema::parse(std::istream& is) {
  RelationalSchema schema;
  std::optional<TableSchema> current;
  struct PendingFk {
    std::string child, column, parent, parent_pk;
  };
  std::vector<PendingFk> fks;

  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto fail = [&](const std::string& msg) -> void {
      throw ValidationError("schema line " + std::to_string(lineno) + ": " + msg);
    };

    if (line.rfind("table ", 0) == 0) {
      if (current) fail("nested table block");
      current = TableSchema{};
      current->name = trim(line.substr(6));
      if (current->name.empty()) fail("table needs a name");
    } else if (line == "end") {
      if (!current) fail("'end' outside table block");
      schema.add_table(std::move(*current));
      current.reset();
    } else if (line.rfind("pk ", 0) == 0) {
      if (!current) fail("'pk' outside table block");
      current->primary_key = trim(line.substr(3));
    } else if (line.rfind("col ", 0) == 0) {
      if (!current) fail("'col' outside table block");
      auto parts = split(trim(line.substr(4)), ':');
      if (parts.size() < 2) fail("column needs name:kind");
      ColumnSpec col;
      col.name = trim(parts[0]);
      std::string kind = trim(parts[1]);
      if (kind == "numeric") {
        col.kind = ColKind::Numeric;
      } else if (kind == "categorical") {
        col.kind = ColKind::Categorical;
        if (parts.size() < 3) fail("categorical column needs a category list");
        for (const std::string& c : split(parts[2], ','))
          col.categories.push_back(trim(c));
      } else {
        fail("unknown column kind '" + kind + "'");
      }
      current->columns.push_back(std::move(col));
    } else if (line.rfind("fk ", 0) == 0) {
      // fk child.col -> parent.pk
      std::string body = trim(line.substr(3));
      std::size_t arrow = body.find("->");
      if (arrow == std::string::npos) fail("foreign key needs '->'");
      std::string lhs = trim(body.substr(0, arrow));
      std::string rhs = trim(body.substr(arrow + 2));
      auto lp = split(lhs, '.');
      auto rp = split(rhs, '.');
      if (lp.size() != 2 || rp.size() != 2) fail("foreign key needs table.column on both sides");
      fks.push_back({trim(lp[0]), trim(lp[1]), trim(rp[0]), trim(rp[1])});
    } else {
      fail("unrecognized line '" + line + "'");
    }
  }
  if (current) throw ValidationError("schema: unterminated table block");

  for (const PendingFk& fk : fks) {
    if (!schema.has_table(fk.child))
      throw ValidationError("schema: foreign key names unknown table '" + fk.child + "'");
    if (!schema.has_table(fk.parent))
      throw ValidationError("schema: foreign key references unknown table '" +
                            fk.parent + "'");
    if (schema.table(fk.parent).primary_key != fk.parent_pk)
      throw ValidationError("schema: foreign key must reference the parent primary key ('" +
                            fk.parent + "." + schema.table(fk.parent).primary_key + "')");
    schema.tables_.at(fk.child).foreign_keys.push_back({fk.column, fk.parent});
  }
  schema.validate();
  return schema;
}

RelationalSchema RelationalSchema::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open schema file '" + path + "'");
  return parse(is);
}

void RelationalSchema::write(std::ostream& os) const {
  for (const std::string& name : order_) {
    const TableSchema& t = tables_.at(name);
    os << "table " << name << "\n";
    os << "pk " << t.primary_key << "\n";
    for (const ColumnSpec& c : t.columns) {
      os << "col " << c.name << ':'
         << (c.kind == ColKind::Numeric ? "numeric" : "categorical");
      if (c.kind == ColKind::Categorical) {
        os << ':';
        for (std::size_t i = 0; i < c.categories.size(); ++i)
          os << (i ? "," : "") << c.categories[i];
      }
      os << "\n";
    }
    os << "end\n";
  }
  for (const std::string& name : order_) {
    const TableSchema& t = tables_.at(name);
    for (const ForeignKey& fk : t.foreign_keys)
      os << "fk " << name << '.' << fk.column << " -> " << fk.parent_table << '.'
         << tables_.at(fk.parent_table).primary_key << "\n";
  }
}

// ---------------------------------------------------------------------------
// Layout / records

std::size_t RowLayout::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (cols[i].name == name) return i;
  throw ValidationError("layout: unknown column '" + name + "'");
}

Database::Database(RelationalSchema schema, std::map<std::string, Table> tables)
    : schema_(std::move(schema)), tables_(std::move(tables)) {
  for (const std::string& name : schema_.table_order()) {
    auto layout = std::make_shared<RowLayout>();
    layout->cols = schema_.table(name).columns;
    layouts_[name] = std::move(layout);
  }
}

const Table& Database::table(const std::string& name) const {
  auto it = tables_.find(name);
  if (it == tables_.end())
    throw ValidationError("database: unknown table '" + name + "'");
  return it->second;
}

std::size_t Database::row_count(const std::string& name) const {
  return table(name).pk.size();
}

LayoutPtr Database::layout(const std::string& name) const {
  auto it = layouts_.find(name);
  if (it == layouts_.end())
    throw ValidationError("database: unknown table '" + name + "'");
  return it->second;
}

RecordView Database::record(const std::string& table_name, std::size_t row,
                            AccessLog* log) const {
  const Table& t = table(table_name);
  if (row >= t.pk.size())
    throw ValidationError("database: row index out of range in '" + table_name + "'");
  if (log) log->record(table_read_key(table_name));
  RecordView rv;
  rv.source = table_name;
  rv.id = static_cast<std::uint64_t>(t.pk[row]);
  rv.layout = layout(table_name);
  rv.values.assign(t.attrs.row(row).begin(), t.attrs.row(row).end());
  return rv;
}

RecordView Database::record_by_pk(const std::string& table_name, std::int64_t pk,
                                  AccessLog* log) const {
  const Table& t = table(table_name);
  auto it = t.by_pk.find(pk);
  if (it == t.by_pk.end())
    throw ValidationError("database: no row with key " + std::to_string(pk) +
                          " in '" + table_name + "'");
  return record(table_name, it->second, log);
}

void DatabaseView::check_allowed(const std::string& table) const {
  if (allowed_ && !allowed_->count(table))
    throw AccessViolation("threat model forbids reading table '" + table + "'");
}

RecordView DatabaseView::record(const std::string& table, std::size_t row) const {
  check_allowed(table);
  return db_->record(table, row, log_);
}

RecordView DatabaseView::record_by_pk(const std::string& table, std::int64_t pk) const {
  check_allowed(table);
  return db_->record_by_pk(table, pk, log_);
}

// ---------------------------------------------------------------------------
// CSV load/save

namespace {

double parse_double(const std::string& s, const std::string& where) {
  const char* begin = s.data();
  const char* end = begin + s.size();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw ValidationError(where + ": invalid numeric value '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s, const std::string& where) {
  const char* begin = s.data();
  const char* end = begin + s.size();
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw ValidationError(where + ": invalid integer key '" + s + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Database Database::load(const std::string& schema_path, const std::string& csv_dir) {
  RelationalSchema schema = RelationalSchema::parse_file(schema_path);
  std::map<std::string, Table> tables;

  for (const std::string& name : schema.table_order()) {
    const TableSchema& ts = schema.table(name);
    std::string path = (fs::path(csv_dir) / (name + ".csv")).string();
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open table file '" + path + "'");

    std::string header;
    if (!std::getline(is, header))
      throw ValidationError(name + ".csv: missing header row");
    std::vector<std::string> head;
    for (std::string& h : split(trim(header), ',')) head.push_back(trim(h));

    // Expected columns: pk, attributes, foreign keys.
    std::vector<std::string> expected{ts.primary_key};
    for (const ColumnSpec& c : ts.columns) expected.push_back(c.name);
    for (const ForeignKey& fk : ts.foreign_keys) expected.push_back(fk.column);
    if (head.size() != expected.size())
      throw ValidationError(name + ".csv: header has " + std::to_string(head.size()) +
                            " columns, schema declares " + std::to_string(expected.size()));
    std::vector<std::size_t> pos(expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      auto it = std::find(head.begin(), head.end(), expected[i]);
      if (it == head.end())
        throw ValidationError(name + ".csv: header is missing column '" + expected[i] + "'");
      pos[i] = static_cast<std::size_t>(it - head.begin());
    }

    Table t;
    t.fk.resize(ts.foreign_keys.size());
    std::vector<std::vector<double>> attr_rows;
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      std::vector<std::string> cells;
      for (std::string& c : split(line, ',')) cells.push_back(trim(c));
      std::string where = name + ".csv line " + std::to_string(lineno);
      if (cells.size() != head.size())
        throw ValidationError(where + ": expected " + std::to_string(head.size()) +
                              " cells, found " + std::to_string(cells.size()));
      for (const std::string& c : cells)
        if (c.empty())
          throw ValidationError(where + ": empty cell (missing values are not supported)");

      std::int64_t pk = parse_int(cells[pos[0]], where);
      if (t.by_pk.count(pk))
        throw DuplicateKeyError(where + ": duplicate primary key " + std::to_string(pk) +
                                " in table '" + name + "'");
      t.by_pk.emplace(pk, t.pk.size());
      t.pk.push_back(pk);

      std::vector<double> attrs(ts.columns.size());
      for (std::size_t c = 0; c < ts.columns.size(); ++c) {
        const std::string& cell = cells[pos[1 + c]];
        const ColumnSpec& spec = ts.columns[c];
        if (spec.kind == ColKind::Numeric) {
          attrs[c] = parse_double(cell, where);
        } else {
          auto it = std::find(spec.categories.begin(), spec.categories.end(), cell);
          if (it == spec.categories.end())
            throw UnknownCategoryError(where + ": value '" + cell +
                                       "' is not a declared category of '" + name +
                                       "." + spec.name + "'");
          attrs[c] = static_cast<double>(it - spec.categories.begin());
        }
      }
      attr_rows.push_back(std::move(attrs));

      for (std::size_t f = 0; f < ts.foreign_keys.size(); ++f)
        t.fk[f].push_back(parse_int(cells[pos[1 + ts.columns.size() + f]], where));
    }

    t.attrs = Matrix(attr_rows.size(), ts.columns.size());
    for (std::size_t i = 0; i < attr_rows.size(); ++i)
      for (std::size_t j = 0; j < ts.columns.size(); ++j) t.attrs(i, j) = attr_rows[i][j];
    tables.emplace(name, std::move(t));
  }

  // Referential integrity.
  for (const std::string& name : schema.table_order()) {
    const TableSchema& ts = schema.table(name);
    Table& t = tables.at(name);
    for (std::size_t f = 0; f < ts.foreign_keys.size(); ++f) {
      const Table& parent = tables.at(ts.foreign_keys[f].parent_table);
      for (std::size_t i = 0; i < t.fk[f].size(); ++i)
        if (!parent.by_pk.count(t.fk[f][i]))
          throw DanglingFkError("table '" + name + "' row with key " +
                                std::to_string(t.pk[i]) + ": foreign key " +
                                ts.foreign_keys[f].column + "=" +
                                std::to_string(t.fk[f][i]) +
                                " has no row in parent '" +
                                ts.foreign_keys[f].parent_table + "'");
    }
  }

  return Database(std::move(schema), std::move(tables));
}

void Database::save(const std::string& schema_path, const std::string& csv_dir) const {
  fs::create_directories(fs::path(schema_path).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(schema_path).parent_path());
  fs::create_directories(csv_dir);
  {
    std::ofstream os(schema_path);
    if (!os) throw Error("cannot write schema file '" + schema_path + "'");
    schema_.write(os);
  }
  for (const std::string& name : schema_.table_order()) {
    const TableSchema& ts = schema_.table(name);
    const Table& t = tables_.at(name);
    std::ofstream os(fs::path(csv_dir) / (name + ".csv"));
    if (!os) throw Error("cannot write table csv for '" + name + "'");
    os << ts.primary_key;
    for (const ColumnSpec& c : ts.columns) os << ',' << c.name;
    for (const ForeignKey& fk : ts.foreign_keys) os << ',' << fk.column;
    os << "\n";
    for (std::size_t i = 0; i < t.pk.size(); ++i) {
      os << t.pk[i];
      for (std::size_t c = 0; c < ts.columns.size(); ++c) {
        os << ',';
        if (ts.columns[c].kind == ColKind::Numeric)
          os << format_double(t.attrs(i, c));
        else
          os << ts.columns[c].categories[static_cast<std::size_t>(t.attrs(i, c))];
      }
      for (std::size_t f = 0; f < ts.foreign_keys.size(); ++f) os << ',' << t.fk[f][i];
      os << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Joins

std::string side_info_name(SideInfo side) {
  return side == SideInfo::Pcsi ? "pcsi" : "frsi";
}

SideInfo side_info_from_name(const std::string& name) {
  if (name == "pcsi") return SideInfo::Pcsi;
  if (name == "frsi") return SideInfo::Frsi;
  throw ValidationError("unknown side-information setting '" + name + "'");
}

namespace {

void append_prefixed(RowLayout& layout, const std::string& prefix,
                     const std::vector<ColumnSpec>& cols) {
  for (const ColumnSpec& c : cols) {
    ColumnSpec copy = c;
    copy.name = prefix + c.name;
    layout.cols.push_back(std::move(copy));
  }
}

// Depth-first ancestor walk in FK declaration order; `prefix` is the
// dot-joined chain of FK column names that reached this table.
void walk_ancestors(const RelationalSchema& schema, const std::string& table,
                    const std::string& prefix,
                    const std::function<void(const std::string& /*prefix*/,
                                             const std::string& /*parent*/,
                                             std::size_t /*fk idx*/)>& visit) {
  const TableSchema& ts = schema.table(table);
  for (std::size_t f = 0; f < ts.foreign_keys.size(); ++f) {
    const ForeignKey& fk = ts.foreign_keys[f];
    std::string child_prefix = prefix + fk.column + ".";
    visit(child_prefix, fk.parent_table, f);
    walk_ancestors(schema, fk.parent_table, child_prefix, visit);
  }
}

}  // namespace

RecordView join_parent(const DatabaseView& db, const RecordView& child,
                       const std::string& parent_table, const std::string& fk_column) {
  const RelationalSchema& schema = db.schema();
  const TableSchema& child_schema = schema.table(child.source);
  std::size_t fk_idx = child_schema.foreign_keys.size();
  for (std::size_t f = 0; f < child_schema.foreign_keys.size(); ++f)
    if (child_schema.foreign_keys[f].column == fk_column &&
        child_schema.foreign_keys[f].parent_table == parent_table)
      fk_idx = f;
  if (fk_idx == child_schema.foreign_keys.size())
    throw ValidationError("join_parent: table '" + child.source +
                          "' has no foreign key '" + fk_column + "' to '" +
                          parent_table + "'");

  const Table& t = db.database().table(child.source);
  auto it = t.by_pk.find(static_cast<std::int64_t>(child.id));
  if (it == t.by_pk.end())
    throw ValidationError("join_parent: child row " + std::to_string(child.id) +
                          " not found in '" + child.source + "'");
  std::int64_t parent_pk = t.fk[fk_idx][it->second];
  RecordView parent = db.record_by_pk(parent_table, parent_pk);

  RecordView joined;
  joined.source = child.source + "|" + fk_column;
  joined.id = child.id;
  auto layout = std::make_shared<RowLayout>();
  layout->cols = child.layout->cols;
  append_prefixed(*layout, fk_column + ".", parent.layout->cols);
  joined.layout = std::move(layout);
  joined.values = child.values;
  joined.values.insert(joined.values.end(), parent.values.begin(), parent.values.end());
  return joined;
}

RecordView join_neighborhood(const DatabaseView& db, const RecordView& child,
                             const JoinOptions& options) {
  const RelationalSchema& schema = db.schema();
  RecordView joined;
  joined.source = child.source + "|neighborhood";
  joined.id = child.id;
  joined.values = child.values;
  auto layout = std::make_shared<RowLayout>();
  layout->cols = child.layout->cols;

  // Resolve the concrete ancestor rows along every directed path.
  struct Frame {
    std::string table;
    std::int64_t pk;
  };
  std::function<void(const Frame&, const std::string&)> descend =
      [&](const Frame& frame, const std::string& prefix) {
        const TableSchema& ts = schema.table(frame.table);
        const Table& t = db.database().table(frame.table);
        auto it = t.by_pk.find(frame.pk);
        if (it == t.by_pk.end())
          throw ValidationError("join_neighborhood: missing row " +
                                std::to_string(frame.pk) + " in '" + frame.table + "'");
        for (std::size_t f = 0; f < ts.foreign_keys.size(); ++f) {
          const ForeignKey& fk = ts.foreign_keys[f];
          std::int64_t parent_pk = t.fk[f][it->second];
          RecordView parent = db.record_by_pk(fk.parent_table, parent_pk);
          std::string parent_prefix = prefix + fk.column + ".";
          append_prefixed(*layout, parent_prefix, parent.layout->cols);
          joined.values.insert(joined.values.end(), parent.values.begin(),
                               parent.values.end());
          descend({fk.parent_table, parent_pk}, parent_prefix);
        }
      };
  descend({child.source, static_cast<std::int64_t>(child.id)}, "");

  if (options.child_aggregates) {
    // Fixed-width summaries of linked rows in tables that reference the
    // child's table: a count plus per-numeric-column means.
    for (const std::string& child_table : schema.children_of(child.source)) {
      const TableSchema& ts = schema.table(child_table);
      const Table& t = db.database().table(child_table);
      db.check_allowed(child_table);
      if (db.log()) db.log()->record(table_read_key(child_table));
      std::size_t count = 0;
      std::vector<double> sums;
      std::vector<std::size_t> numeric_cols;
      for (std::size_t c = 0; c < ts.columns.size(); ++c)
        if (ts.columns[c].kind == ColKind::Numeric) numeric_cols.push_back(c);
      sums.assign(numeric_cols.size(), 0.0);
      for (std::size_t f = 0; f < ts.foreign_keys.size(); ++f) {
        if (ts.foreign_keys[f].parent_table != child.source) continue;
        for (std::size_t i = 0; i < t.pk.size(); ++i)
          if (t.fk[f][i] == static_cast<std::int64_t>(child.id)) {
            ++count;
            for (std::size_t k = 0; k < numeric_cols.size(); ++k)
              sums[k] += t.attrs(i, numeric_cols[k]);
          }
      }
      layout->cols.push_back({child_table + ".count", ColKind::Numeric, {}});
      joined.values.push_back(static_cast<double>(count));
      for (std::size_t k = 0; k < numeric_cols.size(); ++k) {
        layout->cols.push_back(
            {child_table + ".mean_" + ts.columns[numeric_cols[k]].name,
             ColKind::Numeric,
             {}});
        joined.values.push_back(count ? sums[k] / static_cast<double>(count) : 0.0);
      }
    }
  }

  joined.layout = std::move(layout);
  return joined;
}

RecordView augment(const DatabaseView& db, const RecordView& child, SideInfo side,
                   const JoinOptions& options) {
  if (side == SideInfo::Frsi) return join_neighborhood(db, child, options);
  const TableSchema& ts = db.schema().table(child.source);
  if (ts.foreign_keys.empty())
    throw ValidationError("augment: table '" + child.source +
                          "' has no parent to join under pcsi");
  const ForeignKey& fk = ts.foreign_keys.front();
  return join_parent(db, child, fk.parent_table, fk.column);
}

LayoutPtr augmented_layout(const Database& db, const std::string& table,
                           SideInfo side, const JoinOptions& options) {
  // Layouts are value-independent; derive one from any row, or build the
  // empty-table layout by walking the schema.
  if (db.row_count(table) > 0) {
    DatabaseView view(db, nullptr);
    RecordView sample = view.record(table, 0);
    return augment(view, sample, side, options).layout;
  }
  auto layout = std::make_shared<RowLayout>();
  layout->cols = db.schema().table(table).columns;
  if (side == SideInfo::Pcsi) {
    const ForeignKey& fk = db.schema().table(table).foreign_keys.front();
    append_prefixed(*layout, fk.column + ".", db.schema().table(fk.parent_table).columns);
  } else {
    walk_ancestors(db.schema(), table, "",
                   [&](const std::string& prefix, const std::string& parent, std::size_t) {
                     append_prefixed(*layout, prefix, db.schema().table(parent).columns);
                   });
  }
  return layout;
}

// ---------------------------------------------------------------------------
// Encoder

Encoder Encoder::fit(LayoutPtr layout, const std::vector<RecordView>& rows) {
  if (!layout) throw ValidationError("encoder: null layout");
  if (rows.empty()) throw ValidationError("encoder: cannot fit on zero rows");
  Encoder enc;
  enc.layout_ = std::move(layout);
  const std::size_t n_cols = enc.layout_->cols.size();
  for (const RecordView& r : rows)
    if (r.values.size() != n_cols)
      throw ValidationError("encoder: row width does not match layout");

  enc.mean_.assign(n_cols, 0.0);
  enc.std_.assign(n_cols, 1.0);
  enc.offset_.assign(n_cols, 0);
  std::size_t off = 0;
  for (std::size_t c = 0; c < n_cols; ++c) {
    enc.offset_[c] = off;
    const ColumnSpec& spec = enc.layout_->cols[c];
    if (spec.kind == ColKind::Numeric) {
      double mu = 0.0;
      for (const RecordView& r : rows) mu += r.values[c];
      mu /= static_cast<double>(rows.size());
      double var = 0.0;
      for (const RecordView& r : rows) {
        double d = r.values[c] - mu;
        var += d * d;
      }
      var /= static_cast<double>(rows.size());
      double sd = std::sqrt(var);
      enc.mean_[c] = mu;
      enc.std_[c] = sd < 1e-12 ? 1.0 : sd;  // constant column encodes to 0
      off += 1;
    } else {
      off += spec.categories.size();
    }
  }
  enc.width_ = off;
  return enc;
}

std::vector<double> Encoder::encode(const RecordView& row) const {
  if (!layout_) throw UsageError("encoder: not fitted");
  if (row.values.size() != layout_->cols.size())
    throw ValidationError("encoder: row width does not match layout");
  std::vector<double> out(width_, 0.0);
  for (std::size_t c = 0; c < layout_->cols.size(); ++c) {
    const ColumnSpec& spec = layout_->cols[c];
    if (spec.kind == ColKind::Numeric) {
      out[offset_[c]] = (row.values[c] - mean_[c]) / std_[c];
    } else {
      auto code = static_cast<std::size_t>(row.values[c]);
      if (row.values[c] < 0.0 || code >= spec.categories.size() ||
          static_cast<double>(code) != row.values[c])
        throw UnknownCategoryError("encoder: category code " +
                                   std::to_string(row.values[c]) +
                                   " is not declared for column '" + spec.name + "'");
      out[offset_[c] + code] = 1.0;
    }
  }
  return out;
}

Matrix Encoder::encode_batch(const std::vector<RecordView>& rows) const {
  Matrix m(rows.size(), width_);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<double> e = encode(rows[i]);
    std::copy(e.begin(), e.end(), m.row(i).begin());
  }
  return m;
}

RecordView Encoder::decode(std::span<const double> encoded) const {
  if (!layout_) throw UsageError("encoder: not fitted");
  if (encoded.size() != width_)
    throw ValidationError("encoder: encoded width mismatch");
  RecordView rv;
  rv.source = "decoded";
  rv.layout = layout_;
  rv.values.resize(layout_->cols.size());
  for (std::size_t c = 0; c < layout_->cols.size(); ++c) {
    const ColumnSpec& spec = layout_->cols[c];
    if (spec.kind == ColKind::Numeric) {
      rv.values[c] = encoded[offset_[c]] * std_[c] + mean_[c];
    } else {
      std::size_t best = 0;
      for (std::size_t k = 1; k < spec.categories.size(); ++k)
        if (encoded[offset_[c] + k] > encoded[offset_[c] + best]) best = k;
      rv.values[c] = static_cast<double>(best);
    }
  }
  return rv;
}

void Encoder::save(std::ostream& os) const {
  io::write_u32(os, static_cast<std::uint32_t>(layout_->cols.size()));
  for (const ColumnSpec& c : layout_->cols) {
    io::write_string(os, c.name);
    io::write_u8(os, static_cast<std::uint8_t>(c.kind));
    io::write_u32(os, static_cast<std::uint32_t>(c.categories.size()));
    for (const std::string& cat : c.categories) io::write_string(os, cat);
  }
  for (double v : mean_) io::write_f64(os, v);
  for (double v : std_) io::write_f64(os, v);
}

Encoder Encoder::load(std::istream& is) {
  Encoder enc;
  auto layout = std::make_shared<RowLayout>();
  std::uint32_t n = io::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    ColumnSpec c;
    c.name = io::read_string(is);
    c.kind = static_cast<ColKind>(io::read_u8(is));
    std::uint32_t k = io::read_u32(is);
    for (std::uint32_t j = 0; j < k; ++j) c.categories.push_back(io::read_string(is));
    layout->cols.push_back(std::move(c));
  }
  enc.layout_ = std::move(layout);
  enc.mean_.resize(n);
  enc.std_.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) enc.mean_[i] = io::read_f64(is);
  for (std::uint32_t i = 0; i < n; ++i) enc.std_[i] = io::read_f64(is);
  enc.offset_.assign(n, 0);
  std::size_t off = 0;
  for (std::uint32_t c = 0; c < n; ++c) {
    enc.offset_[c] = off;
    off += enc.layout_->cols[c].kind == ColKind::Numeric
               ? 1
               : enc.layout_->cols[c].categories.size();
  }
  enc.width_ = off;
  return enc;
}

bool operator==(const Encoder& a, const Encoder& b) {
  if (!a.layout_ || !b.layout_) return a.layout_ == b.layout_;
  if (a.layout_->cols.size() != b.layout_->cols.size()) return false;
  for (std::size_t i = 0; i < a.layout_->cols.size(); ++i) {
    const ColumnSpec& ca = a.layout_->cols[i];
    const ColumnSpec& cb = b.layout_->cols[i];
    if (ca.name != cb.name || ca.kind != cb.kind || ca.categories != cb.categories)
      return false;
  }
  return a.mean_ == b.mean_ && a.std_ == b.std_;
}

// ---------------------------------------------------------------------------
// Splits / challenges

bool ExperimentSplit::is_member(std::int64_t pk, std::size_t shadow_index) const {
  const auto& part = shadow_partitions.at(shadow_index);
  return std::find(part.begin(), part.end(), pk) != part.end();
}

bool ExperimentSplit::in_any_partition(std::int64_t pk) const {
  for (const auto& p : shadow_partitions)
    if (std::find(p.begin(), p.end(), pk) != p.end()) return true;
  for (const auto& p : target_partitions)
    if (std::find(p.begin(), p.end(), pk) != p.end()) return true;
  return false;
}

std::string ExperimentSplit::to_json() const {
  nlohmann::ordered_json j;
  j["target_table"] = target_table;
  j["seed"] = seed;
  j["shadow_partitions"] = shadow_partitions;
  j["target_partitions"] = target_partitions;
  j["pool"] = pool;
  return j.dump(2);
}

ExperimentSplit ExperimentSplit::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ExperimentSplit s;
  s.target_table = j.at("target_table").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.shadow_partitions = j.at("shadow_partitions").get<std::vector<std::vector<std::int64_t>>>();
  s.target_partitions = j.at("target_partitions").get<std::vector<std::vector<std::int64_t>>>();
  s.pool = j.at("pool").get<std::vector<std::int64_t>>();
  return s;
}

ExperimentSplit make_split(const Database& db, const std::string& target_table,
                           std::size_t shadows, std::size_t targets,
                           std::size_t rows_per_model, std::uint64_t seed) {
  const Table& t = db.table(target_table);
  const std::size_t need = (shadows + targets) * rows_per_model;
  if (t.pk.size() < need)
    throw SizingError("make_split: table '" + target_table + "' has " +
                      std::to_string(t.pk.size()) + " rows, need at least " +
                      std::to_string(need) + " (short by " +
                      std::to_string(need - t.pk.size()) + ")");

  std::vector<std::int64_t> ids = t.pk;
  std::sort(ids.begin(), ids.end());  // independent of file row order
  RngStream rng = RngStream(seed).derive("split");
  rng.shuffle(ids);

  ExperimentSplit split;
  split.target_table = target_table;
  split.seed = seed;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < shadows; ++s) {
    split.shadow_partitions.emplace_back(ids.begin() + pos, ids.begin() + pos + rows_per_model);
    pos += rows_per_model;
  }
  for (std::size_t n = 0; n < targets; ++n) {
    split.target_partitions.emplace_back(ids.begin() + pos, ids.begin() + pos + rows_per_model);
    pos += rows_per_model;
  }
  // Everything else is the held-out non-member pool; disjointness from every
  // partition holds by construction (record-key based).
  split.pool.assign(ids.begin() + pos, ids.end());
  return split;
}

ChallengeSet build_challenge(const Database& db, const ExperimentSplit& split,
                             std::size_t target_index, std::size_t members,
                             std::size_t nonmembers, std::uint64_t seed) {
  if (target_index >= split.target_partitions.size())
    throw ValidationError("build_challenge: target index out of range");
  const auto& partition = split.target_partitions[target_index];
  if (partition.size() < members)
    throw PoolExhaustedError("build_challenge: partition has " +
                             std::to_string(partition.size()) + " rows, need " +
                             std::to_string(members) + " members");

  std::vector<std::int64_t> member_ids = partition;
  RngStream m_rng = RngStream(seed).derive("challenge-members", target_index);
  m_rng.shuffle(member_ids);
  member_ids.resize(members);

  // One shared shuffle of the pool, sliced disjointly per target model so no
  // non-member challenge record repeats across models.
  std::vector<std::int64_t> pool_ids = split.pool;
  RngStream p_rng = RngStream(seed).derive("challenge-pool");
  p_rng.shuffle(pool_ids);
  std::size_t begin = target_index * nonmembers;
  if (begin + nonmembers > pool_ids.size())
    throw PoolExhaustedError("build_challenge: pool has " +
                             std::to_string(pool_ids.size()) +
                             " rows, cannot carve disjoint slice " +
                             std::to_string(begin) + ".." +
                             std::to_string(begin + nonmembers));

  ChallengeSet ch;
  for (std::int64_t pk : member_ids) {
    ch.records.push_back(db.record_by_pk(split.target_table, pk));
    ch.labels.push_back(1);
  }
  for (std::size_t i = 0; i < nonmembers; ++i) {
    ch.records.push_back(db.record_by_pk(split.target_table, pool_ids[begin + i]));
    ch.labels.push_back(0);
  }
  return ch;
}

// ---------------------------------------------------------------------------
// Benchmark generator

Database generate_benchmark(const BenchmarkSpec& spec) {
  if (spec.depth != 2 && spec.depth != 3)
    throw ValidationError("benchmark: depth must be 2 or 3");
  if (spec.rho < 0.0 || spec.rho > 1.0)
    throw ValidationError("benchmark: rho must lie in [0,1]");
  if (spec.rows == 0) throw ValidationError("benchmark: rows must be positive");

  const std::vector<std::string> cats{"c0", "c1", "c2", "c3"};
  RngStream rng = RngStream(spec.seed).derive("benchmark");
  const double rho = spec.rho;
  const double noise_coef = std::sqrt(1.0 - rho * rho);

  RelationalSchema schema;
  std::map<std::string, Table> tables;

  std::size_t n_parent = std::max<std::size_t>(spec.rows / 5, 4);
  std::size_t n_grand = std::max<std::size_t>(n_parent / 5, 2);

  Table grand;
  if (spec.depth == 3) {
    TableSchema gs;
    gs.name = "grandparent";
    gs.primary_key = "id";
    gs.columns = {{"g_num0", ColKind::Numeric, {}},
                  {"g_num1", ColKind::Numeric, {}},
                  {"g_cat0", ColKind::Categorical, cats}};
    schema.add_table(gs);
    grand.attrs = Matrix(n_grand, 3);
    for (std::size_t i = 0; i < n_grand; ++i) {
      grand.pk.push_back(static_cast<std::int64_t>(i));
      grand.by_pk.emplace(static_cast<std::int64_t>(i), i);
      grand.attrs(i, 0) = rng.gaussian();
      grand.attrs(i, 1) = rng.gaussian();
      grand.attrs(i, 2) = static_cast<double>(rng.uniform_index(cats.size()));
    }
  }

  TableSchema ps;
  ps.name = "parent";
  ps.primary_key = "id";
  ps.columns = {{"p_num0", ColKind::Numeric, {}},
                {"p_num1", ColKind::Numeric, {}},
                {"p_cat0", ColKind::Categorical, cats}};
  if (spec.depth == 3) ps.foreign_keys.push_back({"gp_id", "grandparent"});
  schema.add_table(ps);

  Table parent;
  parent.attrs = Matrix(n_parent, 3);
  if (spec.depth == 3) parent.fk.resize(1);
  for (std::size_t i = 0; i < n_parent; ++i) {
    parent.pk.push_back(static_cast<std::int64_t>(i));
    parent.by_pk.emplace(static_cast<std::int64_t>(i), i);
    if (spec.depth == 3) {
      std::size_t g = rng.uniform_index(n_grand);
      parent.fk[0].push_back(static_cast<std::int64_t>(g));
      parent.attrs(i, 0) = rho * grand.attrs(g, 0) + noise_coef * rng.gaussian();
    } else {
      parent.attrs(i, 0) = rng.gaussian();
    }
    parent.attrs(i, 1) = rng.gaussian();
    parent.attrs(i, 2) = static_cast<double>(rng.uniform_index(cats.size()));
  }

  TableSchema cs;
  cs.name = "child";
  cs.primary_key = "id";
  cs.columns = {{"c_num0", ColKind::Numeric, {}},
                {"c_num1", ColKind::Numeric, {}},
                {"c_num2", ColKind::Numeric, {}},
                {"c_cat0", ColKind::Categorical, cats}};
  cs.foreign_keys.push_back({"parent_id", "parent"});
  schema.add_table(cs);

  Table child;
  child.attrs = Matrix(spec.rows, 4);
  child.fk.resize(1);
  for (std::size_t i = 0; i < spec.rows; ++i) {
    child.pk.push_back(static_cast<std::int64_t>(i));
    child.by_pk.emplace(static_cast<std::int64_t>(i), i);
    std::size_t p = rng.uniform_index(n_parent);
    child.fk[0].push_back(static_cast<std::int64_t>(p));
    child.attrs(i, 0) = rho * parent.attrs(p, 0) + noise_coef * rng.gaussian();
    child.attrs(i, 1) = rho * parent.attrs(p, 1) + noise_coef * rng.gaussian();
    child.attrs(i, 2) = rng.gaussian();
    child.attrs(i, 3) = static_cast<double>(rng.uniform_index(cats.size()));
  }

  if (spec.depth == 3) tables.emplace("grandparent", std::move(grand));
  tables.emplace("parent", std::move(parent));
  tables.emplace("child", std::move(child));
  schema.validate();
  return Database(std::move(schema), std::move(tables));
}

}  // namespace fermi::rel

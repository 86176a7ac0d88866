#ifndef GLMEIV_IO_HPP
#define GLMEIV_IO_HPP

#include <Eigen/Dense>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "glmeiv/data.hpp"
#include "glmeiv/errors.hpp"

namespace glmeiv {

/// Doubles are serialized with 17 significant digits, which round-trips
/// IEEE doubles exactly; file outputs are therefore bit-reproducible.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
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

/// Cells-by-features count matrix with feature identifiers.
struct CountMatrix {
    MatrixXd values;
    std::vector<std::string> feature_ids;

    Eigen::Index n_cells() const { return values.rows(); }
    Eigen::Index n_features() const { return values.cols(); }

    Eigen::Index feature_index(const std::string& id) const {
        for (std::size_t j = 0; j < feature_ids.size(); ++j)
            if (feature_ids[j] == id) return static_cast<Eigen::Index>(j);
        throw DataError("unknown feature id: " + id);
    }
};

/// Matrix Market coordinate reader (general, integer or real entries).
/// Feature ids default to the 1-based column numbers.
inline CountMatrix read_matrix_market(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("%%MatrixMarket", 0) != 0)
        throw DataError(path + ": missing MatrixMarket header");
    if (line.find("coordinate") == std::string::npos)
        throw DataError(path + ": only coordinate format is supported");
    while (std::getline(in, line))
        if (!line.empty() && line[0] != '%') break;
    std::istringstream dims(line);
    Eigen::Index rows, cols;
    long long nnz;
    if (!(dims >> rows >> cols >> nnz)) throw DataError(path + ": bad size line");
    CountMatrix out;
    out.values = MatrixXd::Zero(rows, cols);
    for (long long k = 0; k < nnz; ++k) {
        Eigen::Index i, j;
        double v;
        if (!(in >> i >> j >> v)) throw DataError(path + ": truncated entry list");
        if (i < 1 || i > rows || j < 1 || j > cols)
            throw DataError(path + ": entry index out of range");
        out.values(i - 1, j - 1) = v;
    }
    out.feature_ids.resize(cols);
    for (Eigen::Index j = 0; j < cols; ++j) out.feature_ids[j] = std::to_string(j + 1);
    return out;
}

/// Dense CSV count matrix: header row of feature ids, one row per cell.
inline CountMatrix read_dense_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    CountMatrix out;
    out.feature_ids = split_csv_line(line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != out.feature_ids.size())
            throw DataError(path + ": ragged row " + std::to_string(rows.size() + 2));
        std::vector<double> row(fields.size());
        for (std::size_t j = 0; j < fields.size(); ++j) row[j] = std::stod(fields[j]);
        rows.push_back(std::move(row));
    }
    out.values.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(out.feature_ids.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                rows[i][j];
    return out;
}

inline CountMatrix read_count_matrix(const std::string& path) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".mtx")
        return read_matrix_market(path);
    return read_dense_csv(path);
}

inline void write_matrix_market(const std::string& path, const MatrixXd& values) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    long long nnz = 0;
    for (Eigen::Index j = 0; j < values.cols(); ++j)
        for (Eigen::Index i = 0; i < values.rows(); ++i)
            if (values(i, j) != 0.0) ++nnz;
    out << "%%MatrixMarket matrix coordinate real general\n";
    out << values.rows() << ' ' << values.cols() << ' ' << nnz << '\n';
    for (Eigen::Index j = 0; j < values.cols(); ++j)
        for (Eigen::Index i = 0; i < values.rows(); ++i)
            if (values(i, j) != 0.0)
                out << (i + 1) << ' ' << (j + 1) << ' ' << format_double(values(i, j))
                    << '\n';
}

/// Headered covariate CSV -> design matrix with a prepended intercept
/// column (unless the file already starts with one named "intercept").
inline DesignMatrix read_covariates_csv(const std::string& path) {
    CountMatrix raw = read_dense_csv(path);
    DesignMatrix d;
    bool has_intercept = !raw.feature_ids.empty() && raw.feature_ids[0] == "intercept";
    Eigen::Index extra = has_intercept ? 0 : 1;
    d.X.resize(raw.values.rows(), raw.values.cols() + extra);
    if (!has_intercept) {
        d.X.col(0).setOnes();
        d.column_names.push_back("intercept");
    }
    d.X.rightCols(raw.values.cols()) = raw.values;
    for (const auto& name : raw.feature_ids) d.column_names.push_back(name);
    d.validate();
    return d;
}

struct PairSpec {
    std::string gene_id, grna_id, label;  // label: cis | positive-control | negative-control
};

inline std::vector<PairSpec> read_pairs_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<PairSpec> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (first && f.size() >= 2 && f[0] == "gene_id") {
            first = false;
            continue;  // header
        }
        first = false;
        if (f.size() < 2) throw DataError(path + ": pair rows need gene_id,grna_id");
        PairSpec p;
        p.gene_id = f[0];
        p.grna_id = f[1];
        if (f.size() >= 3) p.label = f[2];
        if (!p.label.empty() && p.label != "cis" && p.label != "positive-control" &&
            p.label != "negative-control")
            throw DataError(path + ": unknown pair label '" + p.label + "'");
        out.push_back(std::move(p));
    }
    return out;
}

/// Flat key=value configuration file; '#' starts a comment.
struct KeyValueConfig {
    std::map<std::string, std::string> values;

    static KeyValueConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open " + path);
        KeyValueConfig cfg;
        std::string line;
        while (std::getline(in, line)) {
            auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                auto issp = [](unsigned char c) { return std::isspace(c); };
                while (!s.empty() && issp(s.front())) s.erase(s.begin());
                while (!s.empty() && issp(s.back())) s.pop_back();
                return s;
            };
            std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
            if (!key.empty()) cfg.values[key] = val;
        }
        return cfg;
    }

    bool has(const std::string& k) const { return values.count(k) > 0; }
    std::string get(const std::string& k, const std::string& dflt = "") const {
        auto it = values.find(k);
        return it == values.end() ? dflt : it->second;
    }
    double get_double(const std::string& k, double dflt) const {
        auto it = values.find(k);
        return it == values.end() ? dflt : std::stod(it->second);
    }
    long get_long(const std::string& k, long dflt) const {
        auto it = values.find(k);
        return it == values.end() ? dflt : std::stol(it->second);
    }
    std::vector<double> get_doubles(const std::string& k) const {
        std::vector<double> out;
        auto it = values.find(k);
        if (it == values.end()) return out;
        for (const auto& f : split_csv_line(it->second))
            if (!f.empty()) out.push_back(std::stod(f));
        return out;
    }
};

}  // namespace glmeiv

#endif

#pragma once

// Named numeric columns read from whitespace separated text:
//
//   # comment lines start with '#'
//   y1 y2 y3          <- header with column names
//   0.12 0.40 -0.3
//   ...

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace alap {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Dataset {
    std::vector<std::string> comments;
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;

    bool empty() const { return names.empty(); }
    std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }

    bool has(const std::string& name) const
    {
        for (const auto& n : names)
            if (n == name) return true;
        return false;
    }

    const std::vector<double>& column(const std::string& name) const
    {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return columns[i];
        throw DataError("dataset: missing column '" + name + "'");
    }

    void add(std::string name, std::vector<double> values)
    {
        if (!columns.empty() && values.size() != rows())
            throw DataError("dataset: column '" + name + "' has inconsistent length");
        names.push_back(std::move(name));
        columns.push_back(std::move(values));
    }
};

inline Dataset read_dataset(std::istream& is)
{
    Dataset d;
    std::string line;
    bool have_header = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        if (line[first] == '#') {
            d.comments.push_back(line.substr(first + 1));
            continue;
        }
        std::istringstream ss(line);
        if (!have_header) {
            std::string name;
            while (ss >> name) d.names.push_back(name);
            d.columns.resize(d.names.size());
            have_header = true;
            continue;
        }
        for (std::size_t c = 0; c < d.names.size(); ++c) {
            double v = 0;
            if (!(ss >> v)) throw DataError("dataset: line " + std::to_string(lineno) + " has too few values");
            d.columns[c].push_back(v);
        }
        std::string extra;
        if (ss >> extra) throw DataError("dataset: line " + std::to_string(lineno) + " has too many values");
    }
    if (!have_header) throw DataError("dataset: missing header line");
    return d;
}

inline void write_dataset(std::ostream& os, const Dataset& d)
{
    const auto old = os.precision(17);
    for (const auto& c : d.comments) os << '#' << c << '\n';
    for (std::size_t c = 0; c < d.names.size(); ++c) os << (c ? " " : "") << d.names[c];
    os << '\n';
    for (std::size_t r = 0; r < d.rows(); ++r) {
        for (std::size_t c = 0; c < d.columns.size(); ++c) os << (c ? " " : "") << d.columns[c][r];
        os << '\n';
    }
    os.precision(old);
}

inline Dataset load_dataset(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot read data file '" + path + "'");
    return read_dataset(in);
}

inline void save_dataset(const std::string& path, const Dataset& d)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write data file '" + path + "'");
    write_dataset(out, d);
}

}  // namespace alap

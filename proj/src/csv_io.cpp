#include "ivdiff/csv_io.hpp"

#include "ivdiff/errors.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ivdiff {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) {
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;
};

CsvTable read_csv(const std::string& path) {
    std::istringstream is(read_file(path));
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (t.header.empty()) {
            t.header = split_fields(line);
            continue;
        }
        auto fields = split_fields(line);
        if (fields.size() != t.header.size()) {
            throw InputError(path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(t.header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        }
        t.rows.push_back(std::move(fields));
        t.line_numbers.push_back(lineno);
    }
    if (t.header.empty()) {
        throw InputError(path + ": empty file (header required)");
    }
    return t;
}

void expect_header(const CsvTable& t, const std::vector<std::string>& want, const std::string& path) {
    if (t.header != want) {
        std::string joined;
        for (const auto& w : want) {
            joined += (joined.empty() ? "" : ",") + w;
        }
        throw InputError(path + ": header must be '" + joined + "'");
    }
}

std::string where(const std::string& path, std::size_t line) {
    return path + ":" + std::to_string(line);
}

std::vector<std::string> surface_header(std::initializer_list<std::string> lead) {
    std::vector<std::string> h(lead);
    const auto cells = surface_cell_names();
    h.insert(h.end(), cells.begin(), cells.end());
    return h;
}

void append_surface(std::string& out, const Surface& s) {
    for (Index k = 0; k < kCells; ++k) {
        out += ',';
        out += format_double(s.data()[k]);
    }
}

Surface parse_surface(const std::vector<std::string>& fields, std::size_t offset,
                      const std::string& context) {
    Surface s;
    for (Index k = 0; k < kCells; ++k) {
        s.data()[k] = parse_double(fields[offset + static_cast<std::size_t>(k)], context);
    }
    return s;
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& context) {
    double v = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    while (first < last && *first == ' ') ++first;
    while (last > first && last[-1] == ' ') --last;
    if (first < last && *first == '+') ++first;
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last || !std::isfinite(v)) {
        throw InputError(context + ": invalid number '" + text + "'");
    }
    return v;
}

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw InputError("cannot open " + tmp + " for writing");
        }
        os.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!os) {
            throw InputError("failed writing " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw InputError("cannot rename " + tmp + " to " + path + ": " + ec.message());
    }
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw InputError("cannot open " + path);
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> surface_cell_names() {
    std::vector<std::string> names;
    names.reserve(kCells);
    for (Index i = 0; i < kGridSide; ++i) {
        for (Index j = 0; j < kGridSide; ++j) {
            names.push_back("iv_" + std::to_string(i) + "_" + std::to_string(j));
        }
    }
    return names;
}

// Quotes ----------------------------------------------------------------------

std::vector<QuoteRecord> read_quotes_csv(const std::string& path) {
    const CsvTable t = read_csv(path);
    expect_header(t, {"date", "moneyness", "tenor_years", "implied_vol", "vega"}, path);
    std::vector<QuoteRecord> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& f = t.rows[r];
        const std::string ctx = where(path, t.line_numbers[r]);
        QuoteRecord q{f[0], parse_double(f[1], ctx), parse_double(f[2], ctx),
                      parse_double(f[3], ctx), parse_double(f[4], ctx)};
        if (!(q.implied_vol > 0.0) || !(q.tenor > 0.0) || q.vega < 0.0 || !(q.moneyness > 0.0)) {
            throw InputError(ctx + ": quote requires moneyness > 0, tenor > 0, vol > 0, vega >= 0");
        }
        out.push_back(std::move(q));
    }
    return out;
}

void write_quotes_csv(const std::string& path, const std::vector<QuoteRecord>& quotes) {
    std::string out = "date,moneyness,tenor_years,implied_vol,vega\n";
    for (const QuoteRecord& q : quotes) {
        out += q.date + ',' + format_double(q.moneyness) + ',' + format_double(q.tenor) + ',' +
               format_double(q.implied_vol) + ',' + format_double(q.vega) + '\n';
    }
    atomic_write(path, out);
}

// Surfaces --------------------------------------------------------------------

std::vector<DatedSurface> read_surfaces_csv(const std::string& path) {
    const CsvTable t = read_csv(path);
    expect_header(t, surface_header({"date"}), path);
    std::vector<DatedSurface> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        out.push_back({t.rows[r][0], parse_surface(t.rows[r], 1, where(path, t.line_numbers[r]))});
    }
    return out;
}

void write_surfaces_csv(const std::string& path, const std::vector<DatedSurface>& rows) {
    std::string out = "date";
    for (const auto& name : surface_cell_names()) {
        out += ',' + name;
    }
    out += '\n';
    for (const DatedSurface& row : rows) {
        out += row.date;
        append_surface(out, row.surface);
        out += '\n';
    }
    atomic_write(path, out);
}

// Market ----------------------------------------------------------------------

MarketSeries read_market_csv(const std::string& path) {
    const CsvTable t = read_csv(path);
    expect_header(t, {"date", "underlying_return", "vix_return"}, path);
    MarketSeries m;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string ctx = where(path, t.line_numbers[r]);
        m.dates.push_back(t.rows[r][0]);
        m.underlying_returns.push_back(parse_double(t.rows[r][1], ctx));
        m.vix_returns.push_back(parse_double(t.rows[r][2], ctx));
    }
    return m;
}

void write_market_csv(const std::string& path, const MarketSeries& market) {
    std::string out = "date,underlying_return,vix_return\n";
    for (std::size_t i = 0; i < market.dates.size(); ++i) {
        out += market.dates[i] + ',' + format_double(market.underlying_returns[i]) + ',' +
               format_double(market.vix_returns[i]) + '\n';
    }
    atomic_write(path, out);
}

// Samples and penalties -------------------------------------------------------

std::vector<SampleRow> read_samples_csv(const std::string& path) {
    const CsvTable t = read_csv(path);
    expect_header(t, surface_header({"date", "sample_id"}), path);
    std::vector<SampleRow> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string ctx = where(path, t.line_numbers[r]);
        int id = 0;
        const std::string& f = t.rows[r][1];
        const auto res = std::from_chars(f.data(), f.data() + f.size(), id);
        if (res.ec != std::errc() || res.ptr != f.data() + f.size() || id < 0) {
            throw InputError(ctx + ": invalid sample_id '" + f + "'");
        }
        out.push_back({t.rows[r][0], id, parse_surface(t.rows[r], 2, ctx)});
    }
    return out;
}

void write_samples_csv(const std::string& path, const std::vector<SampleRow>& rows) {
    std::string out = "date,sample_id";
    for (const auto& name : surface_cell_names()) {
        out += ',' + name;
    }
    out += '\n';
    for (const SampleRow& row : rows) {
        out += row.date + ',' + std::to_string(row.sample_id);
        append_surface(out, row.surface);
        out += '\n';
    }
    atomic_write(path, out);
}

void write_penalty_csv(const std::string& path, const std::vector<PenaltyRow>& rows) {
    std::string out = "date,p1,p2,p3,total\n";
    for (const PenaltyRow& row : rows) {
        out += row.date + ',' + format_double(row.penalty.calendar) + ',' +
               format_double(row.penalty.call_spread) + ',' +
               format_double(row.penalty.butterfly) + ',' + format_double(row.penalty.total) +
               '\n';
    }
    atomic_write(path, out);
}

}  // namespace ivdiff

#pragma once

// File formats shared by the CLI and the library.
//
//   quotes   date,moneyness,tenor_years,implied_vol,vega
//   surfaces date,<81 cells>        rows = moneyness ascending, columns = tenor ascending
//   market   date,underlying_return,vix_return
//   samples  date,sample_id,<81 cells>
//   penalty  date,p1,p2,p3,total
//
// Numbers are written in the shortest decimal form that round-trips to the
// same double, so rewriting a parsed file reproduces it byte for byte.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/grid.hpp"

#include <string>
#include <vector>

namespace ivdiff {

std::string format_double(double v);
double parse_double(const std::string& text, const std::string& context);

/// Writes to `path + ".tmp"` and renames over `path`.
void atomic_write(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

struct DatedSurface {
    std::string date;
    Surface surface = Surface::Zero();
};

struct SampleRow {
    std::string date;
    int sample_id = 0;
    Surface surface = Surface::Zero();
};

struct PenaltyRow {
    std::string date;
    PenaltyBreakdown penalty;
};

std::vector<QuoteRecord> read_quotes_csv(const std::string& path);
void write_quotes_csv(const std::string& path, const std::vector<QuoteRecord>& quotes);

std::vector<DatedSurface> read_surfaces_csv(const std::string& path);
void write_surfaces_csv(const std::string& path, const std::vector<DatedSurface>& rows);

MarketSeries read_market_csv(const std::string& path);
void write_market_csv(const std::string& path, const MarketSeries& market);

std::vector<SampleRow> read_samples_csv(const std::string& path);
void write_samples_csv(const std::string& path, const std::vector<SampleRow>& rows);

void write_penalty_csv(const std::string& path, const std::vector<PenaltyRow>& rows);

/// Header cell names for the 81 surface columns: iv_<i>_<j>.
std::vector<std::string> surface_cell_names();

}  // namespace ivdiff

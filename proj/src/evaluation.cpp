#include "ivdiff/evaluation.hpp"

#include "ivdiff/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>

namespace ivdiff {

namespace {

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double std_of(std::span<const double> v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

double cell(const Surface& s, const SliceSpec& slice) {
    return s(slice.moneyness_index, slice.tenor_index);
}

void check_slice(const SliceSpec& s) {
    if (s.moneyness_index < 0 || s.moneyness_index >= kGridSide || s.tenor_index < 0 ||
        s.tenor_index >= kGridSide) {
        throw InputError("slice '" + s.label + "' has grid indices outside 0..8");
    }
}

std::optional<Moments> try_moments(std::span<const double> v) {
    try {
        return moments(v);
    } catch (const InputError&) {
        return std::nullopt;
    }
}

nlohmann::json moments_json(const std::optional<Moments>& m) {
    if (!m) return nullptr;
    return {{"mean", m->mean}, {"std", m->std}, {"skewness", m->skewness}, {"kurtosis_fisher", m->kurtosis}};
}

}  // namespace

std::vector<SliceSpec> default_slices() {
    const std::pair<const char*, Index> money[] = {{"ATM", 4}, {"OTM", 6}, {"ITM", 2}};
    const std::pair<const char*, Index> tenor[] = {{"1-Day", 0}, {"1-Week", 1}, {"1-Month", 3}, {"3-Month", 5}};
    std::vector<SliceSpec> out;
    for (const auto& [ml, mi] : money) {
        for (const auto& [tl, ti] : tenor) {
            out.push_back({std::string(ml) + " " + tl, mi, ti});
        }
    }
    return out;
}

double surface_mape(const Surface& truth, const Surface& pred) {
    double s = 0.0;
    for (Index k = 0; k < kCells; ++k) {
        const double x = truth.data()[k];
        if (x == 0.0 || !std::isfinite(x)) {
            throw DomainError("surface_mape: truth cell " + std::to_string(k) + " is zero or non-finite");
        }
        s += std::abs((pred.data()[k] - x) / x);
    }
    return s / static_cast<double>(kCells);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw InputError("percentile: empty sample");
    }
    if (!(q >= 0.0 && q <= 100.0)) {
        throw InputError("percentile: q must lie in [0, 100]");
    }
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

CiStats ci_stats(std::span<const Surface> truth, std::span<const std::vector<Surface>> batches,
                 const SliceSpec& slice, double level) {
    check_slice(slice);
    if (truth.size() != batches.size() || truth.empty()) {
        throw InputError("ci_stats: need one non-empty batch per truth day");
    }
    if (!(level > 0.0 && level <= 1.0)) {
        throw InputError("ci_stats: level must lie in (0, 1]");
    }
    const double q_lo = 50.0 * (1.0 - level);
    const double q_hi = 50.0 * (1.0 + level);
    std::vector<double> widths;
    std::size_t breaches = 0;
    for (std::size_t d = 0; d < truth.size(); ++d) {
        if (batches[d].size() < kMinBatchForCi) {
            throw InputError("ci_stats: day " + std::to_string(d) + " has " +
                             std::to_string(batches[d].size()) + " samples; at least " +
                             std::to_string(kMinBatchForCi) + " are required");
        }
        std::vector<double> v;
        v.reserve(batches[d].size());
        for (const Surface& s : batches[d]) v.push_back(cell(s, slice));
        const double lo = percentile(v, q_lo);
        const double hi = percentile(v, q_hi);
        widths.push_back(hi - lo);
        const double x = cell(truth[d], slice);
        if (x < lo || x > hi) ++breaches;
    }
    return {mean_of(widths), std_of(widths),
            100.0 * static_cast<double>(breaches) / static_cast<double>(truth.size())};
}

Moments moments(std::span<const double> values) {
    if (values.size() < 4) {
        throw InputError("moments: need at least 4 values, got " + std::to_string(values.size()));
    }
    const double n = static_cast<double>(values.size());
    const double m = mean_of(values);
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double x : values) {
        const double d = x - m;
        const double d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if (!(m2 > 0.0) || m2 <= 1e-300) {
        throw InputError("moments: degenerate distribution (zero variance)");
    }
    return {m, std::sqrt(m2), m3 / std::pow(m2, 1.5), m4 / (m2 * m2) - 3.0};
}

AlignedData align_samples(const std::vector<DatedSurface>& truth, const std::vector<SampleRow>& samples) {
    if (samples.empty()) {
        throw InputError("no sample rows");
    }
    std::map<std::string, const Surface*> by_date;
    for (const DatedSurface& t : truth) {
        if (!by_date.emplace(t.date, &t.surface).second) {
            throw InputError("truth file repeats date " + t.date);
        }
    }
    AlignedData out;
    std::map<std::string, std::size_t> slot;
    std::vector<std::string> missing;
    for (const SampleRow& r : samples) {
        auto it = slot.find(r.date);
        if (it == slot.end()) {
            const auto t = by_date.find(r.date);
            if (t == by_date.end()) {
                missing.push_back(r.date);
                slot.emplace(r.date, static_cast<std::size_t>(-1));
                continue;
            }
            it = slot.emplace(r.date, out.dates.size()).first;
            out.dates.push_back(r.date);
            out.truth.push_back(*t->second);
            out.batches.emplace_back();
        }
        if (it->second != static_cast<std::size_t>(-1)) {
            out.batches[it->second].push_back(r.surface);
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 10; ++i) {
            list += (i ? ", " : "") + missing[i];
        }
        if (missing.size() > 10) list += ", ...";
        throw InputError("sample dates without truth: " + list);
    }
    return out;
}

MetricsReport evaluate(std::span<const std::string> dates, std::span<const Surface> truth,
                       std::span<const std::vector<Surface>> batches,
                       const std::vector<SliceSpec>& slices, const PricingContext& ctx,
                       const GridSpec& grid, double ci_level) {
    if (dates.size() != truth.size() || truth.size() != batches.size() || truth.empty()) {
        throw InputError("evaluate: dates, truth and batches must align and be non-empty");
    }
    MetricsReport r;
    r.samples_per_day = batches.front().size();
    for (const auto& b : batches) {
        if (b.empty()) throw InputError("evaluate: empty sample batch");
    }

    std::vector<Surface> mean_surfaces;
    std::vector<double> daily_mape;
    double phi_gen = 0.0, phi_truth = 0.0;
    for (std::size_t d = 0; d < truth.size(); ++d) {
        // Running mean, exact when every sample is identical.
        Surface mean = Surface::Zero();
        std::vector<double> sample_mape;
        double phi = 0.0;
        double count = 0.0;
        for (const Surface& s : batches[d]) {
            count += 1.0;
            mean += (s - mean) / count;
            sample_mape.push_back(surface_mape(truth[d], s));
            phi += penalty_loops(s, grid, ctx).total;
        }
        const double k = count;
        mean_surfaces.push_back(mean);
        DailyMetrics dm;
        dm.date = dates[d];
        dm.surface_mape = surface_mape(truth[d], mean);
        dm.mean_phi = phi / k;
        dm.ci_lower = percentile(sample_mape, 5.0);
        dm.ci_upper = percentile(sample_mape, 95.0);
        dm.median_sample_mape = percentile(sample_mape, 50.0);
        dm.truth_phi = penalty_loops(truth[d], grid, ctx).total;
        daily_mape.push_back(dm.surface_mape);
        phi_gen += dm.mean_phi;
        phi_truth += dm.truth_phi;
        r.daily.push_back(std::move(dm));
    }
    const double days = static_cast<double>(truth.size());
    r.overall_mape_pct = 100.0 * mean_of(daily_mape);
    r.mean_generated_phi = phi_gen / days;
    r.mean_truth_phi = phi_truth / days;

    const bool ci_ok = std::all_of(batches.begin(), batches.end(),
                                   [](const auto& b) { return b.size() >= kMinBatchForCi; });
    for (const SliceSpec& slice : slices) {
        check_slice(slice);
        SliceMetrics sm;
        sm.slice = slice;
        std::vector<double> ape, real, generated;
        for (std::size_t d = 0; d < truth.size(); ++d) {
            const double x = cell(truth[d], slice);
            if (x == 0.0) throw DomainError("evaluate: zero truth value in slice " + slice.label);
            ape.push_back(std::abs((cell(mean_surfaces[d], slice) - x) / x));
            real.push_back(x);
            for (const Surface& s : batches[d]) generated.push_back(cell(s, slice));
        }
        sm.mape_pct = 100.0 * mean_of(ape);
        sm.ape_std_pct = 100.0 * std_of(ape);
        if (ci_ok) {
            sm.ci = ci_stats(truth, batches, slice, ci_level);
        }
        sm.real_moments = try_moments(real);
        sm.generated_moments = try_moments(generated);
        r.slices.push_back(std::move(sm));
    }
    return r;
}

void write_metrics_csv(const std::string& path, const MetricsReport& r) {
    std::string out = "slice,moneyness_index,tenor_index,mape_pct,ape_std_pct,ci_width_mean,ci_width_std,breach_pct\n";
    for (const SliceMetrics& s : r.slices) {
        out += s.slice.label + ',' + std::to_string(s.slice.moneyness_index) + ',' +
               std::to_string(s.slice.tenor_index) + ',' + format_double(s.mape_pct) + ',' +
               format_double(s.ape_std_pct) + ',' + format_double(s.ci.mean_width) + ',' +
               format_double(s.ci.std_width) + ',' + format_double(s.ci.breach_pct) + '\n';
    }
    out += "Overall,,," + format_double(r.overall_mape_pct) + ",,,,\n";
    atomic_write(path, out);
}

void write_daily_csv(const std::string& path, const MetricsReport& r) {
    std::string out = "date,surface_mape,mean_phi,ci_lower,ci_upper,median_sample_mape,truth_phi\n";
    for (const DailyMetrics& d : r.daily) {
        out += d.date + ',' + format_double(d.surface_mape) + ',' + format_double(d.mean_phi) + ',' +
               format_double(d.ci_lower) + ',' + format_double(d.ci_upper) + ',' +
               format_double(d.median_sample_mape) + ',' + format_double(d.truth_phi) + '\n';
    }
    atomic_write(path, out);
}

void write_summary_json(const std::string& path, const MetricsReport& r) {
    nlohmann::json j;
    j["overall_mape_pct"] = r.overall_mape_pct;
    j["mean_generated_phi"] = r.mean_generated_phi;
    j["mean_truth_phi"] = r.mean_truth_phi;
    j["days"] = r.daily.size();
    j["samples_per_day"] = r.samples_per_day;
    nlohmann::json slices = nlohmann::json::array();
    for (const SliceMetrics& s : r.slices) {
        slices.push_back({{"label", s.slice.label},
                          {"moneyness_index", s.slice.moneyness_index},
                          {"tenor_index", s.slice.tenor_index},
                          {"mape_pct", s.mape_pct},
                          {"ape_std_pct", s.ape_std_pct},
                          {"ci_width_mean", s.ci.mean_width},
                          {"ci_width_std", s.ci.std_width},
                          {"breach_pct", s.ci.breach_pct},
                          {"moments_real", moments_json(s.real_moments)},
                          {"moments_generated", moments_json(s.generated_moments)}});
    }
    j["slices"] = std::move(slices);
    atomic_write(path, j.dump(2) + "\n");
}

}  // namespace ivdiff

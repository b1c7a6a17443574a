#include "ivdiff/dataprep.hpp"

#include "ivdiff/csv_io.hpp"
#include "ivdiff/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

namespace ivdiff {

namespace {

using json = nlohmann::json;

// Smallest total kernel weight accepted at a grid cell.
constexpr double kMinKernelMass = 1e-300;

std::string cell_label(const GridSpec& grid, Index i, Index j) {
    std::ostringstream os;
    os << "cell (" << i << ", " << j << ") at m=" << grid.moneyness[i]
       << ", tau=" << grid.tenors[j];
    return os.str();
}

json surface_json(const Surface& s) {
    return json(std::vector<double>(s.data(), s.data() + kCells));
}

Surface surface_from_json(const json& j) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != static_cast<std::size_t>(kCells)) {
        throw InputError("surface array must have 81 values, got " + std::to_string(v.size()));
    }
    Surface s;
    std::copy(v.begin(), v.end(), s.data());
    return s;
}

json range_json(const IndexRange& r) { return json::array({r.begin, r.end}); }

IndexRange range_from_json(const json& j) {
    return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()};
}

// EWMA series of surfaces and the raw scalar features for every date.
struct FeatureSeries {
    std::vector<Surface> short_ewma, long_ewma;
    std::vector<ScalarVector> scalars;
};

FeatureSeries compute_features(std::span<const Surface> normalized, std::span<const double> returns,
                               std::span<const double> vix, const ConditioningConfig& cfg) {
    if (returns.size() != normalized.size() || vix.size() != normalized.size()) {
        throw InputError("market series length (" + std::to_string(returns.size()) + ", " +
                         std::to_string(vix.size()) + ") does not match " +
                         std::to_string(normalized.size()) + " surfaces");
    }
    FeatureSeries f;
    f.short_ewma = ewma(normalized, span_to_alpha(cfg.surface_span_short));
    f.long_ewma = ewma(normalized, span_to_alpha(cfg.surface_span_long));
    std::vector<double> squared(returns.size());
    for (std::size_t i = 0; i < returns.size(); ++i) {
        squared[i] = returns[i] * returns[i];
    }
    const auto trend_short = ewma(returns, cfg.alpha_trend_short);
    const auto trend_long = ewma(returns, cfg.alpha_trend_long);
    const auto vol_short = ewma(squared, cfg.alpha_vol_short);
    const auto vol_long = ewma(squared, cfg.alpha_vol_long);
    f.scalars.resize(returns.size());
    for (std::size_t i = 0; i < returns.size(); ++i) {
        f.scalars[i] << trend_short[i], trend_long[i], vol_short[i], vol_long[i], vix[i];
    }
    return f;
}

ConditioningBundle assemble(std::size_t k, std::span<const Surface> normalized,
                            const FeatureSeries& f, const ScalarStats& stats, std::string date) {
    ConditioningBundle b;
    b.channels.row(0) = flatten(normalized[k]);
    b.channels.row(1) = flatten(f.short_ewma[k]);
    b.channels.row(2) = flatten(f.long_ewma[k]);
    b.channels.row(3).setZero();
    b.scalars = ((f.scalars[k] - stats.mean).array() / stats.std.array()).matrix();
    b.date = std::move(date);
    return b;
}

}  // namespace

// Grid ------------------------------------------------------------------------

void GridSpec::validate() const {
    for (Index i = 0; i < kGridSide; ++i) {
        if (!(moneyness[i] > 0.0) || !(tenors[i] > 0.0)) {
            throw InputError("grid levels must be positive");
        }
        if (i > 0 && (!(moneyness[i] > moneyness[i - 1]) || !(tenors[i] > tenors[i - 1]))) {
            throw InputError("grid levels must be strictly increasing");
        }
    }
}

Array surfaces_to_array(std::span<const Surface> surfaces, bool requires_grad) {
    const Index n = static_cast<Index>(surfaces.size());
    Eigen::VectorXd data(n * kCells);
    for (Index s = 0; s < n; ++s) {
        data.segment(s * kCells, kCells) = flatten(surfaces[s]).transpose();
    }
    return Array({n, 1, kGridSide, kGridSide}, std::move(data), requires_grad);
}

std::vector<Surface> array_to_surfaces(const Array& a) {
    if (a.size() % kCells != 0) {
        throw ShapeError("array_to_surfaces: size " + std::to_string(a.size()) +
                         " is not a multiple of 81");
    }
    std::vector<Surface> out(static_cast<std::size_t>(a.size() / kCells));
    for (std::size_t s = 0; s < out.size(); ++s) {
        out[s] = unflatten(a.data().segment(static_cast<Index>(s) * kCells, kCells).transpose());
    }
    return out;
}

// Smoothing and normalization -------------------------------------------------

Surface smooth_surface(std::span<const QuoteRecord> quotes, const GridSpec& grid,
                       const SmoothingConfig& cfg) {
    if (!(cfg.h1 > 0.0) || !(cfg.h2 > 0.0)) {
        throw InputError("smoothing bandwidths must be positive");
    }
    std::vector<const QuoteRecord*> kept;
    for (const QuoteRecord& q : quotes) {
        if (!(q.implied_vol > 0.0) || !(q.tenor > 0.0) || q.vega < 0.0) {
            throw InputError("invalid quote on " + q.date + ": requires vol > 0, tenor > 0, vega >= 0");
        }
        if (q.vega > 0.0) {
            kept.push_back(&q);
        }
    }
    if (kept.empty()) {
        throw InputError("smooth_surface: no quote with positive vega");
    }
    const double norm = 1.0 / (2.0 * std::numbers::pi);
    Surface out;
    for (Index i = 0; i < kGridSide; ++i) {
        for (Index j = 0; j < kGridSide; ++j) {
            double num = 0.0;
            double den = 0.0;
            for (const QuoteRecord* q : kept) {
                const double dx = q->moneyness - grid.moneyness[i];
                const double dy = q->tenor - grid.tenors[j];
                const double w =
                    q->vega * norm * std::exp(-dx * dx / (2.0 * cfg.h1) - dy * dy / (2.0 * cfg.h2));
                num += w * q->implied_vol;
                den += w;
            }
            if (den < kMinKernelMass) {
                throw InputError("smooth_surface: kernel weights vanish at " + cell_label(grid, i, j));
            }
            out(i, j) = num / den;
        }
    }
    return out;
}

NormalizationStats compute_normalization_stats(std::span<const Surface> raw) {
    if (raw.empty()) {
        throw InputError("normalization statistics need at least one surface");
    }
    Surface sum = Surface::Zero();
    std::vector<Surface> logs(raw.size());
    for (std::size_t k = 0; k < raw.size(); ++k) {
        if ((raw[k].array() <= 0.0).any()) {
            throw DomainError("normalization: non-positive implied volatility in surface " +
                              std::to_string(k));
        }
        logs[k] = raw[k].array().log().matrix();
        sum += logs[k];
    }
    NormalizationStats stats;
    stats.mean = sum / static_cast<double>(raw.size());
    Surface var = Surface::Zero();
    for (const Surface& z : logs) {
        var.array() += (z - stats.mean).array().square();
    }
    stats.std = (var / static_cast<double>(raw.size())).array().sqrt().matrix();
    for (Index i = 0; i < kGridSide; ++i) {
        for (Index j = 0; j < kGridSide; ++j) {
            if (!(stats.std(i, j) > 0.0)) {
                throw InputError("normalization: zero variance of log vol at cell (" +
                                 std::to_string(i) + ", " + std::to_string(j) + ")");
            }
        }
    }
    return stats;
}

Surface normalize(const Surface& raw, const NormalizationStats& stats) {
    for (Index k = 0; k < kCells; ++k) {
        if (!(raw.data()[k] > 0.0)) {
            throw DomainError("normalize: non-positive implied volatility at cell " + std::to_string(k));
        }
    }
    return ((raw.array().log() - stats.mean.array()) / stats.std.array()).matrix();
}

Surface denormalize(const Surface& z, const NormalizationStats& stats) {
    return (z.array() * stats.std.array() + stats.mean.array()).exp().matrix();
}

// EWMA ------------------------------------------------------------------------

std::vector<double> ewma(std::span<const double> series, double alpha) {
    if (series.empty()) {
        throw InputError("ewma: empty series");
    }
    if (!(alpha > 0.0) || alpha > 1.0) {
        throw InputError("ewma: smoothing factor must lie in (0, 1]");
    }
    std::vector<double> out(series.size());
    out[0] = series[0];
    for (std::size_t k = 1; k < series.size(); ++k) {
        out[k] = alpha * series[k] + (1.0 - alpha) * out[k - 1];
    }
    return out;
}

std::vector<Surface> ewma(std::span<const Surface> series, double alpha) {
    if (series.empty()) {
        throw InputError("ewma: empty series");
    }
    if (!(alpha > 0.0) || alpha > 1.0) {
        throw InputError("ewma: smoothing factor must lie in (0, 1]");
    }
    std::vector<Surface> out(series.size());
    out[0] = series[0];
    for (std::size_t k = 1; k < series.size(); ++k) {
        out[k] = alpha * series[k] + (1.0 - alpha) * out[k - 1];
    }
    return out;
}

double span_to_alpha(double span) {
    if (!(span >= 1.0)) {
        throw InputError("EWMA span must be >= 1");
    }
    return 2.0 / (span + 1.0);
}

void ConditioningConfig::validate() const {
    for (double a : {alpha_trend_short, alpha_trend_long, alpha_vol_short, alpha_vol_long}) {
        if (!(a > 0.0 && a < 1.0)) {
            throw InputError("conditioning smoothing factors must lie in (0, 1)");
        }
    }
    if (!(surface_span_short >= 1.0) || !(surface_span_long >= surface_span_short)) {
        throw InputError("surface EWMA spans must satisfy 1 <= short <= long");
    }
}

ScalarVector raw_scalar_features(std::size_t k, std::span<const double> returns,
                                 std::span<const double> vix_returns,
                                 const ConditioningConfig& cfg) {
    if (k >= returns.size() || k >= vix_returns.size()) {
        throw InputError("raw_scalar_features: date index out of range");
    }
    std::vector<double> r(returns.begin(), returns.begin() + static_cast<std::ptrdiff_t>(k + 1));
    std::vector<double> r2(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        r2[i] = r[i] * r[i];
    }
    ScalarVector out;
    out << ewma(r, cfg.alpha_trend_short).back(), ewma(r, cfg.alpha_trend_long).back(),
        ewma(r2, cfg.alpha_vol_short).back(), ewma(r2, cfg.alpha_vol_long).back(), vix_returns[k];
    return out;
}

ScalarStats compute_scalar_stats(std::span<const ScalarVector> raw) {
    if (raw.empty()) {
        throw InputError("scalar statistics need at least one observation");
    }
    ScalarStats s;
    s.mean.setZero();
    for (const auto& v : raw) {
        s.mean += v;
    }
    s.mean /= static_cast<double>(raw.size());
    ScalarVector var = ScalarVector::Zero();
    for (const auto& v : raw) {
        var.array() += (v - s.mean).array().square();
    }
    s.std = (var / static_cast<double>(raw.size())).array().sqrt().matrix();
    // A constant feature carries no information; leave it centred but unscaled.
    for (int i = 0; i < kScalarFeatures; ++i) {
        if (!(s.std[i] > 0.0)) {
            s.std[i] = 1.0;
        }
    }
    return s;
}

ConditioningBundle build_conditioning(std::size_t k, std::span<const Surface> normalized,
                                      std::span<const double> returns,
                                      std::span<const double> vix_returns,
                                      const ConditioningConfig& cfg, const ScalarStats& scalar_stats,
                                      const std::string& date) {
    cfg.validate();
    if (k < cfg.warmup()) {
        throw InputError("build_conditioning: date index " + std::to_string(k) + " has only " +
                         std::to_string(k) + " prior observations; at least " +
                         std::to_string(cfg.warmup()) + " are required");
    }
    if (k >= normalized.size()) {
        throw InputError("build_conditioning: date index out of range");
    }
    const auto prefix = normalized.first(k + 1);
    const FeatureSeries f =
        compute_features(prefix, returns.first(k + 1), vix_returns.first(k + 1), cfg);
    return assemble(k, prefix, f, scalar_stats, date);
}

// Split -----------------------------------------------------------------------

SplitRanges chronological_split(std::size_t n, const SplitSpec& spec) {
    if (n < 3) {
        throw InputError("chronological_split: need at least 3 dates, got " + std::to_string(n));
    }
    if (spec.train <= 0.0 || spec.validation < 0.0 || spec.test < 0.0 ||
        std::abs(spec.train + spec.validation + spec.test - 1.0) > 1e-12) {
        throw InputError("chronological_split: fractions must be non-negative and sum to 1");
    }
    const auto b1 = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(n)));
    const auto b2 = static_cast<std::size_t>(
        std::floor((spec.train + spec.validation) * static_cast<double>(n)));
    return {{0, b1}, {b1, b2}, {b2, n}};
}

SplitRanges chronological_split(std::span<const std::string> dates, const SplitSpec& spec) {
    for (std::size_t i = 1; i < dates.size(); ++i) {
        if (!(dates[i - 1] < dates[i])) {
            throw InputError("dates must be strictly increasing: " + dates[i - 1] + " then " + dates[i]);
        }
    }
    return chronological_split(dates.size(), spec);
}

// Prepared dataset ------------------------------------------------------------

const TrainingExample* PreparedData::example_for_target(std::size_t target_index) const {
    for (const auto* list : {&train, &validation, &test}) {
        for (const TrainingExample& e : *list) {
            if (e.index + 1 == target_index) {
                return &e;
            }
        }
    }
    return nullptr;
}

PreparedData prepare_dataset(std::vector<std::string> dates, std::vector<Surface> raw,
                             std::vector<double> underlying_returns,
                             std::vector<double> vix_returns, const ConditioningConfig& cfg,
                             const SplitSpec& split) {
    cfg.validate();
    if (raw.size() != dates.size()) {
        throw InputError("prepare_dataset: " + std::to_string(raw.size()) + " surfaces for " +
                         std::to_string(dates.size()) + " dates");
    }
    PreparedData d;
    d.split = chronological_split(dates, split);
    d.dates = std::move(dates);
    d.raw = std::move(raw);
    d.underlying_returns = std::move(underlying_returns);
    d.vix_returns = std::move(vix_returns);
    d.conditioning = cfg;

    const std::span<const Surface> all(d.raw);
    d.stats = compute_normalization_stats(all.subspan(d.split.train.begin, d.split.train.size()));
    d.normalized.reserve(d.raw.size());
    for (const Surface& s : d.raw) {
        d.normalized.push_back(normalize(s, d.stats));
    }

    const FeatureSeries f = compute_features(d.normalized, d.underlying_returns, d.vix_returns, cfg);

    std::vector<ScalarVector> train_scalars;
    for (std::size_t k = cfg.warmup(); k + 1 < d.dates.size(); ++k) {
        if (d.split.train.contains(k + 1)) {
            train_scalars.push_back(f.scalars[k]);
        }
    }
    if (train_scalars.empty()) {
        throw InputError("prepare_dataset: no training example after the " +
                         std::to_string(cfg.warmup()) + "-day warm-up");
    }
    d.scalar_stats = compute_scalar_stats(train_scalars);

    for (std::size_t k = cfg.warmup(); k + 1 < d.dates.size(); ++k) {
        TrainingExample e;
        e.index = k;
        e.bundle = assemble(k, d.normalized, f, d.scalar_stats, d.dates[k]);
        e.target = d.normalized[k + 1];
        if (d.split.train.contains(k + 1)) {
            d.train.push_back(std::move(e));
        } else if (d.split.validation.contains(k + 1)) {
            d.validation.push_back(std::move(e));
        } else {
            d.test.push_back(std::move(e));
        }
    }
    return d;
}

void save_prepared(const PreparedData& d, const std::string& path) {
    json j;
    j["format"] = "ivdiff-dataset";
    j["version"] = 1;
    j["dates"] = d.dates;
    json raw = json::array();
    json norm = json::array();
    for (std::size_t k = 0; k < d.raw.size(); ++k) {
        raw.push_back(surface_json(d.raw[k]));
        norm.push_back(surface_json(d.normalized[k]));
    }
    j["raw"] = std::move(raw);
    j["normalized"] = std::move(norm);
    j["underlying_returns"] = d.underlying_returns;
    j["vix_returns"] = d.vix_returns;
    j["stats"] = {{"mean", surface_json(d.stats.mean)}, {"std", surface_json(d.stats.std)}};
    j["scalar_stats"] = {
        {"mean", std::vector<double>(d.scalar_stats.mean.data(), d.scalar_stats.mean.data() + 5)},
        {"std", std::vector<double>(d.scalar_stats.std.data(), d.scalar_stats.std.data() + 5)}};
    const ConditioningConfig& c = d.conditioning;
    j["conditioning"] = {{"alpha_trend_short", c.alpha_trend_short},
                         {"alpha_trend_long", c.alpha_trend_long},
                         {"alpha_vol_short", c.alpha_vol_short},
                         {"alpha_vol_long", c.alpha_vol_long},
                         {"surface_span_short", c.surface_span_short},
                         {"surface_span_long", c.surface_span_long}};
    j["split"] = {{"train", range_json(d.split.train)},
                  {"validation", range_json(d.split.validation)},
                  {"test", range_json(d.split.test)}};
    json examples = json::array();
    auto add = [&](const std::vector<TrainingExample>& list) {
        for (const TrainingExample& e : list) {
            json ch = json::array();
            for (int r = 0; r < 3; ++r) {
                ch.push_back(std::vector<double>(e.bundle.channels.row(r).data(),
                                                 e.bundle.channels.row(r).data() + kCells));
            }
            examples.push_back({{"index", e.index},
                                {"channels", std::move(ch)},
                                {"scalars", std::vector<double>(e.bundle.scalars.data(),
                                                                e.bundle.scalars.data() + 5)}});
        }
    };
    add(d.train);
    add(d.validation);
    add(d.test);
    j["examples"] = std::move(examples);
    atomic_write(path, j.dump() + "\n");
}

PreparedData load_prepared(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw InputError("cannot parse dataset " + path + ": " + e.what());
    }
    try {
        if (j.at("format") != "ivdiff-dataset" || j.at("version") != 1) {
            throw InputError(path + " is not a version-1 ivdiff dataset");
        }
        PreparedData d;
        d.dates = j.at("dates").get<std::vector<std::string>>();
        for (const auto& s : j.at("raw")) d.raw.push_back(surface_from_json(s));
        for (const auto& s : j.at("normalized")) d.normalized.push_back(surface_from_json(s));
        d.underlying_returns = j.at("underlying_returns").get<std::vector<double>>();
        d.vix_returns = j.at("vix_returns").get<std::vector<double>>();
        d.stats.mean = surface_from_json(j.at("stats").at("mean"));
        d.stats.std = surface_from_json(j.at("stats").at("std"));
        const auto sm = j.at("scalar_stats").at("mean").get<std::vector<double>>();
        const auto ss = j.at("scalar_stats").at("std").get<std::vector<double>>();
        if (sm.size() != 5 || ss.size() != 5) {
            throw InputError("scalar statistics must have 5 entries");
        }
        for (int i = 0; i < 5; ++i) {
            d.scalar_stats.mean[i] = sm[static_cast<std::size_t>(i)];
            d.scalar_stats.std[i] = ss[static_cast<std::size_t>(i)];
        }
        const json& c = j.at("conditioning");
        d.conditioning.alpha_trend_short = c.at("alpha_trend_short");
        d.conditioning.alpha_trend_long = c.at("alpha_trend_long");
        d.conditioning.alpha_vol_short = c.at("alpha_vol_short");
        d.conditioning.alpha_vol_long = c.at("alpha_vol_long");
        d.conditioning.surface_span_short = c.at("surface_span_short");
        d.conditioning.surface_span_long = c.at("surface_span_long");
        d.split.train = range_from_json(j.at("split").at("train"));
        d.split.validation = range_from_json(j.at("split").at("validation"));
        d.split.test = range_from_json(j.at("split").at("test"));
        if (d.raw.size() != d.dates.size() || d.normalized.size() != d.dates.size()) {
            throw InputError("dataset arrays disagree with the date list");
        }
        for (const auto& ej : j.at("examples")) {
            TrainingExample e;
            e.index = ej.at("index").get<std::size_t>();
            if (e.index + 1 >= d.dates.size()) {
                throw InputError("example index out of range");
            }
            for (int r = 0; r < 3; ++r) {
                const auto row = ej.at("channels").at(static_cast<std::size_t>(r)).get<std::vector<double>>();
                if (row.size() != static_cast<std::size_t>(kCells)) {
                    throw InputError("conditioning channel must have 81 values");
                }
                std::copy(row.begin(), row.end(), e.bundle.channels.row(r).data());
            }
            const auto sc = ej.at("scalars").get<std::vector<double>>();
            if (sc.size() != 5) {
                throw InputError("conditioning scalars must have 5 values");
            }
            std::copy(sc.begin(), sc.end(), e.bundle.scalars.data());
            e.bundle.date = d.dates[e.index];
            e.target = d.normalized[e.index + 1];
            const std::size_t target = e.index + 1;
            if (d.split.train.contains(target)) {
                d.train.push_back(std::move(e));
            } else if (d.split.validation.contains(target)) {
                d.validation.push_back(std::move(e));
            } else {
                d.test.push_back(std::move(e));
            }
        }
        return d;
    } catch (const json::exception& e) {
        throw InputError("malformed dataset " + path + ": " + e.what());
    }
}

}  // namespace ivdiff

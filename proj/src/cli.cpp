#include "ivdiff/cli.hpp"

#include "ivdiff/checkpoint.hpp"
#include "ivdiff/csv_io.hpp"
#include "ivdiff/errors.hpp"
#include "ivdiff/sampling.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace ivdiff {

namespace {

namespace fs = std::filesystem;

int default_threads() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw InputError("cannot create directory " + dir + ": " + ec.message());
    }
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void reject_unknown(const Json& j, const std::set<std::string>& allowed, const std::string& section) {
    if (!j.is_object()) {
        throw InputError(section + ": expected an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (allowed.count(key) == 0) {
            throw InputError(section + ": unknown key '" + key + "'");
        }
    }
}

SyntheticConfig synthetic_from_json(const Json& j, SyntheticConfig c) {
    reject_unknown(j, {"observation_noise", "max_penalty", "persistence", "level_vol", "leverage"},
                   "synthetic");
    try {
        if (j.contains("observation_noise")) c.observation_noise = j.at("observation_noise").get<double>();
        if (j.contains("max_penalty")) c.max_penalty = j.at("max_penalty").get<double>();
        if (j.contains("persistence")) c.persistence = j.at("persistence").get<double>();
        if (j.contains("level_vol")) c.level_vol = j.at("level_vol").get<double>();
        if (j.contains("leverage")) c.leverage = j.at("leverage").get<double>();
    } catch (const Json::exception& e) {
        throw InputError(std::string("synthetic: ") + e.what());
    }
    if (c.observation_noise < 0.0 || !(c.max_penalty > 0.0) || !(c.persistence >= 0.0 && c.persistence < 1.0) ||
        c.level_vol < 0.0 || !(c.leverage >= -1.0 && c.leverage <= 1.0)) {
        throw InputError("synthetic: parameter out of range");
    }
    return c;
}

std::vector<SliceSpec> slices_from_json(const Json& j) {
    if (!j.is_array() || j.empty()) {
        throw InputError("evaluation.slices: expected a non-empty array");
    }
    std::vector<SliceSpec> out;
    for (const Json& e : j) {
        reject_unknown(e, {"label", "moneyness_index", "tenor_index"}, "evaluation.slices[]");
        try {
            SliceSpec s{e.at("label").get<std::string>(), e.at("moneyness_index").get<Index>(),
                        e.at("tenor_index").get<Index>()};
            if (s.moneyness_index < 0 || s.moneyness_index >= kGridSide || s.tenor_index < 0 ||
                s.tenor_index >= kGridSide) {
                throw InputError("evaluation.slices: indices must lie in 0..8 for '" + s.label + "'");
            }
            out.push_back(std::move(s));
        } catch (const Json::exception& ex) {
            throw InputError(std::string("evaluation.slices: ") + ex.what());
        }
    }
    return out;
}

/// Groups quotes by date in first-appearance order.
std::vector<std::pair<std::string, std::vector<QuoteRecord>>> group_quotes(const std::vector<QuoteRecord>& quotes) {
    std::vector<std::pair<std::string, std::vector<QuoteRecord>>> out;
    std::map<std::string, std::size_t> index;
    for (const QuoteRecord& q : quotes) {
        auto [it, inserted] = index.emplace(q.date, out.size());
        if (inserted) {
            out.emplace_back(q.date, std::vector<QuoteRecord>{});
        }
        out[it->second].second.push_back(q);
    }
    return out;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string loss_curve_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_loss,train_mse,train_arb,val_loss,lr\n";
    for (const EpochRecord& r : history) {
        out += std::to_string(r.epoch) + ',' + format_double(r.train_loss) + ',' +
               format_double(r.train_mse) + ',' + format_double(r.train_arb) + ',' +
               format_double(r.val_loss) + ',' + format_double(r.lr) + '\n';
    }
    return out;
}

bool same_stats(const NormalizationStats& a, const NormalizationStats& b) {
    return a.mean == b.mean && a.std == b.std;
}

// Commands --------------------------------------------------------------------

struct GenDataArgs {
    std::size_t days = 0;
    std::uint64_t seed = 0;
    std::optional<double> noise;
    std::string out;
    std::string config;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
    RunConfig cfg = load_run_config(a.config);
    if (a.noise) {
        cfg.synthetic.observation_noise = *a.noise;
    }
    const GridSpec grid;
    const auto days = synthetic_generate(a.days, a.seed, grid, cfg.synthetic);
    ensure_dir(a.out);
    std::vector<DatedSurface> surfaces;
    MarketSeries market;
    for (const SyntheticDay& d : days) {
        surfaces.push_back({d.date, d.surface});
        market.dates.push_back(d.date);
        market.underlying_returns.push_back(d.underlying_return);
        market.vix_returns.push_back(d.vix_return);
    }
    write_surfaces_csv(join(a.out, "surfaces.csv"), surfaces);
    write_market_csv(join(a.out, "market.csv"), market);
    out << "wrote " << days.size() << " days to " << a.out << "\n";
    return 0;
}

struct PreprocessArgs {
    std::string quotes, surfaces, market, config, out;
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out) {
    const RunConfig cfg = load_run_config(a.config);
    const GridSpec grid;
    std::vector<std::string> dates;
    std::vector<Surface> raw;
    if (!a.quotes.empty()) {
        for (auto& [date, quotes] : group_quotes(read_quotes_csv(a.quotes))) {
            raw.push_back(smooth_surface(quotes, grid, cfg.smoothing));
            dates.push_back(date);
        }
    } else {
        for (DatedSurface& d : read_surfaces_csv(a.surfaces)) {
            dates.push_back(std::move(d.date));
            raw.push_back(d.surface);
        }
    }
    if (raw.empty()) {
        throw InputError("no surfaces in input");
    }
    const MarketSeries market = read_market_csv(a.market);
    if (market.dates != dates) {
        for (std::size_t i = 0; i < std::max(dates.size(), market.dates.size()); ++i) {
            const std::string sd = i < dates.size() ? dates[i] : "<none>";
            const std::string md = i < market.dates.size() ? market.dates[i] : "<none>";
            if (sd != md) {
                throw InputError("market dates do not match surface dates (first difference at row " +
                                 std::to_string(i + 1) + ": " + sd + " vs " + md + ")");
            }
        }
    }
    const PreparedData data = prepare_dataset(std::move(dates), std::move(raw), market.underlying_returns,
                                              market.vix_returns, cfg.conditioning);
    save_prepared(data, a.out);
    out << "prepared " << data.dates.size() << " dates: " << data.train.size() << " train, "
        << data.validation.size() << " validation, " << data.test.size() << " test examples\n";
    return 0;
}

struct TrainArgs {
    std::string data, config, out, resume;
    std::optional<int> epochs, batch_size;
    std::optional<double> lr, lambda;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    int log_every = 10;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    RunConfig cfg = load_run_config(a.config);
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch_size) cfg.train.batch_size = *a.batch_size;
    if (a.lr) cfg.train.lr = *a.lr;
    if (a.lambda) cfg.train.lambda = *a.lambda;
    if (a.seed) cfg.train.seed = *a.seed;
    cfg.train.validate();

    const PreparedData data = load_prepared(a.data);
    const NoiseSchedule schedule = build_cosine_schedule(cfg.train.diffusion_steps);
    LossContext ctx;
    ctx.schedule = &schedule;
    ctx.stats = &data.stats;
    ctx.pricing = cfg.pricing;
    ctx.unet = cfg.unet;

    ParamStore init;
    if (!a.resume.empty()) {
        Checkpoint prev = load_checkpoint(a.resume);
        if (!same_stats(prev.stats, data.stats)) {
            throw InputError("resume: checkpoint normalization statistics differ from the dataset's");
        }
        if (to_json(prev.unet) != to_json(cfg.unet)) {
            throw InputError("resume: checkpoint architecture differs from the configured one");
        }
        init.live = prev.params.live.clone(true);
        init.ema = prev.params.ema.clone(false);
    } else {
        init = param_init(cfg.unet, cfg.train.seed);
    }

    FitOptions opts;
    opts.threads = a.threads;
    opts.on_epoch = [&](const EpochRecord& r) {
        if (a.log_every > 0 && (r.epoch % a.log_every == 0 || r.epoch == 1)) {
            err << "epoch " << r.epoch << " train " << r.train_loss << " (mse " << r.train_mse
                << ", arb " << r.train_arb << ") val " << r.val_loss << " lr " << r.lr << "\n";
        }
    };
    const FitResult fitted = fit(data, cfg.train, ctx, std::move(init), opts);

    ensure_dir(a.out);
    Checkpoint ckpt;
    ckpt.unet = cfg.unet;
    ckpt.train = cfg.train;
    ckpt.pricing = cfg.pricing;
    ckpt.schedule = schedule;
    ckpt.stats = data.stats;
    ckpt.scalar_stats = data.scalar_stats;
    ckpt.params = {fitted.best.live.clone(true), fitted.best.ema.clone(false)};
    ckpt.epoch = fitted.best_epoch;
    ckpt.best_val = fitted.best_val;
    save_checkpoint(ckpt, join(a.out, "checkpoint.json"));
    atomic_write(join(a.out, "loss_curve.csv"), loss_curve_csv(fitted.history));
    if (fitted.divergence) {
        err << "training diverged at " << *fitted.divergence << "; kept the last good checkpoint\n";
        return 1;
    }
    out << "trained " << fitted.history.size() << " epochs" << (fitted.stopped_early ? " (early stop)" : "")
        << ", best validation loss " << fitted.best_val << " at epoch " << fitted.best_epoch << "\n";
    return 0;
}

struct SampleArgs {
    std::string checkpoint, data, dates, out;
    int k = 100;
    std::uint64_t seed = 0;
    int threads = 1;
    bool live_weights = false;
};

int cmd_sample(const SampleArgs& a, std::ostream& out) {
    if (a.k < 1) {
        throw InputError("--k must be >= 1");
    }
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const PreparedData data = load_prepared(a.data);
    if (!same_stats(ckpt.stats, data.stats) || ckpt.scalar_stats.mean != data.scalar_stats.mean ||
        ckpt.scalar_stats.std != data.scalar_stats.std) {
        throw InputError("checkpoint statistics differ from the dataset's; preprocess and train on the same data");
    }
    std::vector<const TrainingExample*> targets;
    if (a.dates.empty() || a.dates == "test") {
        for (const TrainingExample& e : data.test) targets.push_back(&e);
    } else {
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < data.dates.size(); ++i) index.emplace(data.dates[i], i);
        for (const std::string& d : split_list(a.dates)) {
            const auto it = index.find(d);
            const TrainingExample* e = it == index.end() ? nullptr : data.example_for_target(it->second);
            if (e == nullptr) {
                throw InputError("no conditioning available for target date " + d);
            }
            targets.push_back(e);
        }
    }
    if (targets.empty()) {
        throw InputError("no target dates to sample");
    }
    SampleOptions opts;
    opts.threads = a.threads;
    opts.use_live_weights = a.live_weights;
    std::vector<SampleRow> rows;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const TrainingExample& e = *targets[i];
        const std::string& date = data.dates[e.index + 1];
        const SampleBatch batch = sample_batch(e.bundle, ckpt, a.k, sub_seed(a.seed, e.index + 1), {}, opts);
        for (std::size_t s = 0; s < batch.surfaces.size(); ++s) {
            rows.push_back({date, static_cast<int>(s), batch.surfaces[s]});
        }
    }
    write_samples_csv(a.out, rows);
    out << "wrote " << a.k << " samples for " << targets.size() << " dates to " << a.out << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string truth, samples, config, out;
    std::optional<double> rate;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
    RunConfig cfg = load_run_config(a.config);
    if (a.rate) cfg.pricing.rate = *a.rate;
    const AlignedData aligned = align_samples(read_surfaces_csv(a.truth), read_samples_csv(a.samples));
    const MetricsReport report = evaluate(aligned.dates, aligned.truth, aligned.batches, cfg.slices,
                                          cfg.pricing, GridSpec{}, cfg.ci_level);
    ensure_dir(a.out);
    write_metrics_csv(join(a.out, "metrics.csv"), report);
    write_daily_csv(join(a.out, "daily.csv"), report);
    write_summary_json(join(a.out, "summary.json"), report);
    out << "overall MAPE " << report.overall_mape_pct << "% over " << report.daily.size()
        << " days; mean generated penalty " << report.mean_generated_phi << "\n";
    return 0;
}

struct AuditArgs {
    std::string surfaces, out, config;
    std::optional<double> rate;
};

int cmd_arb_audit(const AuditArgs& a, std::ostream& out) {
    RunConfig cfg = load_run_config(a.config);
    if (a.rate) cfg.pricing.rate = *a.rate;
    const auto rows = read_surfaces_csv(a.surfaces);
    if (rows.empty()) {
        throw InputError(a.surfaces + ": no surfaces");
    }
    const GridSpec grid;
    std::vector<PenaltyRow> pen;
    for (const DatedSurface& r : rows) {
        pen.push_back({r.date, penalty_loops(r.surface, grid, cfg.pricing)});
    }
    write_penalty_csv(a.out, pen);
    out << "audited " << rows.size() << " surfaces\n";
    return 0;
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text, const std::string& source) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw InputError("cannot parse config " + source + ": " + e.what());
    }
    reject_unknown(j, {"smoothing", "conditioning", "pricing", "unet", "train", "synthetic", "evaluation"},
                   "config");
    RunConfig c;
    if (j.contains("smoothing")) c.smoothing = smoothing_config_from_json(j.at("smoothing"));
    if (j.contains("conditioning")) c.conditioning = conditioning_config_from_json(j.at("conditioning"));
    if (j.contains("pricing")) c.pricing = pricing_from_json(j.at("pricing"));
    if (j.contains("unet")) c.unet = unet_config_from_json(j.at("unet"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("synthetic")) c.synthetic = synthetic_from_json(j.at("synthetic"), c.synthetic);
    if (j.contains("evaluation")) {
        const Json& e = j.at("evaluation");
        reject_unknown(e, {"slices", "ci_level"}, "evaluation");
        if (e.contains("slices")) c.slices = slices_from_json(e.at("slices"));
        if (e.contains("ci_level")) {
            if (!e.at("ci_level").is_number()) throw InputError("evaluation.ci_level: expected a number");
            c.ci_level = e.at("ci_level").get<double>();
            if (!(c.ci_level > 0.0 && c.ci_level <= 1.0)) {
                throw InputError("evaluation.ci_level must lie in (0, 1]");
            }
        }
    }
    c.synthetic.pricing = c.pricing;
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::string p = path;
    if (p.empty()) {
        if (const char* env = std::getenv(kConfigEnvVar); env != nullptr && *env != '\0') {
            p = env;
        }
    }
    if (p.empty()) {
        return RunConfig{};
    }
    return run_config_from_json_text(read_file(p), p);
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Conditional diffusion model for implied-volatility surfaces", "ivdiff"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic surfaces and market series");
    gen_cmd->add_option("--days", gen.days, "Number of business days (>= 50)")->required();
    gen_cmd->add_option("--seed", gen.seed, "Random seed")->default_val(0);
    gen_cmd->add_option("--noise", gen.noise, "Per-cell multiplicative observation noise");
    gen_cmd->add_option("--config", gen.config, "Run-config JSON");
    gen_cmd->add_option("--out", gen.out, "Output directory (surfaces.csv, market.csv)")->required();

    PreprocessArgs pre;
    auto* pre_cmd = app.add_subcommand("preprocess", "Smooth, normalize and split into a dataset");
    auto* q_opt = pre_cmd->add_option("--quotes", pre.quotes, "Quote CSV (long format)");
    auto* s_opt = pre_cmd->add_option("--surfaces", pre.surfaces, "Surface CSV (wide format)");
    q_opt->excludes(s_opt);
    pre_cmd->add_option("--market", pre.market, "Market CSV")->required();
    pre_cmd->add_option("--config", pre.config, "Run-config JSON");
    pre_cmd->add_option("--out", pre.out, "Output dataset JSON")->required();

    TrainArgs tr;
    tr.threads = default_threads();
    auto* tr_cmd = app.add_subcommand("train", "Train the noise predictor");
    tr_cmd->add_option("--data", tr.data, "Prepared dataset JSON")->required();
    tr_cmd->add_option("--config", tr.config, "Run-config JSON");
    tr_cmd->add_option("--out", tr.out, "Output directory (checkpoint.json, loss_curve.csv)")->required();
    tr_cmd->add_option("--resume", tr.resume, "Start from this checkpoint's parameters");
    tr_cmd->add_option("--epochs", tr.epochs, "Override train.epochs");
    tr_cmd->add_option("--batch-size", tr.batch_size, "Override train.batch_size");
    tr_cmd->add_option("--lr", tr.lr, "Override train.lr");
    tr_cmd->add_option("--lambda", tr.lambda, "Override train.lambda");
    tr_cmd->add_option("--seed", tr.seed, "Override train.seed");
    tr_cmd->add_option("--threads", tr.threads, "Worker threads")->check(CLI::PositiveNumber);
    tr_cmd->add_option("--log-every", tr.log_every, "Epochs between progress lines (0 = quiet)");

    SampleArgs sa;
    sa.threads = default_threads();
    auto* sa_cmd = app.add_subcommand("sample", "Generate surfaces for target dates");
    sa_cmd->add_option("--checkpoint", sa.checkpoint, "Checkpoint JSON")->required();
    sa_cmd->add_option("--data", sa.data, "Prepared dataset JSON")->required();
    sa_cmd->add_option("--dates", sa.dates, "Comma-separated target dates, or 'test' (default)");
    sa_cmd->add_option("--k", sa.k, "Samples per date")->default_val(100);
    sa_cmd->add_option("--seed", sa.seed, "Random seed")->default_val(0);
    sa_cmd->add_option("--threads", sa.threads, "Worker threads")->check(CLI::PositiveNumber);
    sa_cmd->add_flag("--debug-live-weights", sa.live_weights, "Sample with live instead of EMA weights");
    sa_cmd->add_option("--out", sa.out, "Output sample CSV")->required();

    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "Score samples against realized surfaces");
    ev_cmd->add_option("--truth", ev.truth, "Surface CSV with realized surfaces")->required();
    ev_cmd->add_option("--samples", ev.samples, "Sample CSV")->required();
    ev_cmd->add_option("--config", ev.config, "Run-config JSON");
    ev_cmd->add_option("--rate", ev.rate, "Override pricing.rate");
    ev_cmd->add_option("--out", ev.out, "Output directory (metrics.csv, daily.csv, summary.json)")->required();

    AuditArgs au;
    auto* au_cmd = app.add_subcommand("arb-audit", "Arbitrage penalties of each surface");
    au_cmd->add_option("--surfaces", au.surfaces, "Surface CSV")->required();
    au_cmd->add_option("--rate", au.rate, "Override pricing.rate");
    au_cmd->add_option("--config", au.config, "Run-config JSON");
    au_cmd->add_option("--out", au.out, "Output penalty CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen, out);
        if (*pre_cmd) {
            if (pre.quotes.empty() == pre.surfaces.empty()) {
                throw InputError("preprocess needs exactly one of --quotes or --surfaces");
            }
            return cmd_preprocess(pre, out);
        }
        if (*tr_cmd) return cmd_train(tr, out, err);
        if (*sa_cmd) return cmd_sample(sa, out);
        if (*ev_cmd) return cmd_evaluate(ev, out);
        if (*au_cmd) return cmd_arb_audit(au, out);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace ivdiff

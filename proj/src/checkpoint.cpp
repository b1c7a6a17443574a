#include "ivdiff/checkpoint.hpp"

#include "ivdiff/csv_io.hpp"
#include "ivdiff/errors.hpp"

#include <set>

namespace ivdiff {

namespace {

void reject_unknown(const Json& j, std::initializer_list<const char*> allowed, const char* section) {
    if (!j.is_object()) {
        throw InputError(std::string(section) + ": expected an object");
    }
    const std::set<std::string> keys(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items()) {
        if (keys.count(key) == 0) {
            throw InputError(std::string(section) + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const char* section) {
    if (!j.contains(key)) {
        return;
    }
    try {
        out = j.at(key).get<T>();
    } catch (const Json::exception&) {
        throw InputError(std::string(section) + ": invalid value for '" + key + "'");
    }
}

void read_optional(const Json& j, const char* key, std::optional<double>& out, const char* section) {
    if (!j.contains(key)) {
        return;
    }
    if (j.at(key).is_null()) {
        out.reset();
        return;
    }
    double v = 0.0;
    read(j, key, v, section);
    out = v;
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Json vector_json(const Eigen::VectorXd& v) {
    return Json(std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd vector_from_json(const Json& j, Index expected, const std::string& what) {
    const auto v = j.get<std::vector<double>>();
    if (expected >= 0 && static_cast<Index>(v.size()) != expected) {
        throw InputError(what + ": expected " + std::to_string(expected) + " values, got " +
                         std::to_string(v.size()));
    }
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

Json surface_json(const Surface& s) { return Json(std::vector<double>(s.data(), s.data() + kCells)); }

Surface surface_from_json(const Json& j, const std::string& what) {
    const Eigen::VectorXd v = vector_from_json(j, kCells, what);
    return unflatten(v.transpose());
}

Json params_json(const ParamSet& p) {
    Json out = Json::object();
    for (std::size_t i = 0; i < p.size(); ++i) {
        out[p.names()[i]] = {{"shape", p.arrays()[i].shape()}, {"data", vector_json(p.arrays()[i].data())}};
    }
    return out;
}

ParamSet params_from_json(const Json& j, const UNetConfig& cfg, bool requires_grad, const char* what) {
    ParamSet out;
    const auto layout = param_layout(cfg);
    if (j.size() != layout.size()) {
        throw InputError(std::string(what) + ": expected " + std::to_string(layout.size()) +
                         " parameter arrays, got " + std::to_string(j.size()));
    }
    for (const auto& [name, shape] : layout) {
        if (!j.contains(name)) {
            throw InputError(std::string(what) + ": missing parameter " + name);
        }
        const Json& e = j.at(name);
        if (e.at("shape").get<Shape>() != shape) {
            throw InputError(std::string(what) + ": parameter " + name + " has shape " +
                             shape_string(e.at("shape").get<Shape>()) + ", expected " +
                             shape_string(shape));
        }
        Eigen::VectorXd data = vector_from_json(e.at("data"), shape_size(shape), name);
        if (!data.allFinite()) {
            throw InputError(std::string(what) + ": parameter " + name + " is not finite");
        }
        out.add(name, Array(shape, std::move(data), requires_grad));
    }
    return out;
}

}  // namespace

Json to_json(const UNetConfig& c) {
    return {{"in_channels", c.in_channels},           {"out_channels", c.out_channels},
            {"enc_channels", c.enc_channels},         {"bottle_channels", c.bottle_channels},
            {"time_embed_dim", c.time_embed_dim},     {"scalar_dim", c.scalar_dim},
            {"scalar_embed_dim", c.scalar_embed_dim}, {"film_hidden1", c.film_hidden1},
            {"film_hidden2", c.film_hidden2}};
}

UNetConfig unet_config_from_json(const Json& j, UNetConfig c) {
    const char* s = "unet";
    reject_unknown(j, {"in_channels", "out_channels", "enc_channels", "bottle_channels",
                       "time_embed_dim", "scalar_dim", "scalar_embed_dim", "film_hidden1",
                       "film_hidden2"},
                   s);
    read(j, "in_channels", c.in_channels, s);
    read(j, "out_channels", c.out_channels, s);
    read(j, "enc_channels", c.enc_channels, s);
    read(j, "bottle_channels", c.bottle_channels, s);
    read(j, "time_embed_dim", c.time_embed_dim, s);
    read(j, "scalar_dim", c.scalar_dim, s);
    read(j, "scalar_embed_dim", c.scalar_embed_dim, s);
    read(j, "film_hidden1", c.film_hidden1, s);
    read(j, "film_hidden2", c.film_hidden2, s);
    c.validate();
    if (c.in_channels != 4 || c.out_channels != 1 || c.scalar_dim != kScalarFeatures) {
        throw InputError("unet: in_channels = 4, out_channels = 1 and scalar_dim = 5 are fixed by the data layout");
    }
    return c;
}

Json to_json(const TrainConfig& c) {
    return {{"lambda", c.lambda},
            {"lambda_calendar", optional_json(c.lambda_calendar)},
            {"lambda_spread", optional_json(c.lambda_spread)},
            {"lambda_butterfly", optional_json(c.lambda_butterfly)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"diffusion_steps", c.diffusion_steps},
            {"lr", c.lr},
            {"plateau_factor", c.plateau_factor},
            {"plateau_patience", c.plateau_patience},
            {"lr_min", c.lr_min},
            {"grad_clip", c.grad_clip},
            {"ema_decay", c.ema_decay},
            {"early_stop_patience", c.early_stop_patience},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
    const char* s = "train";
    reject_unknown(j, {"lambda", "lambda_calendar", "lambda_spread", "lambda_butterfly", "epochs",
                       "batch_size", "diffusion_steps", "lr", "plateau_factor", "plateau_patience",
                       "lr_min", "grad_clip", "ema_decay", "early_stop_patience", "adam_beta1",
                       "adam_beta2", "adam_eps", "weight_decay", "seed"},
                   s);
    read(j, "lambda", c.lambda, s);
    read_optional(j, "lambda_calendar", c.lambda_calendar, s);
    read_optional(j, "lambda_spread", c.lambda_spread, s);
    read_optional(j, "lambda_butterfly", c.lambda_butterfly, s);
    read(j, "epochs", c.epochs, s);
    read(j, "batch_size", c.batch_size, s);
    read(j, "diffusion_steps", c.diffusion_steps, s);
    read(j, "lr", c.lr, s);
    read(j, "plateau_factor", c.plateau_factor, s);
    read(j, "plateau_patience", c.plateau_patience, s);
    read(j, "lr_min", c.lr_min, s);
    read(j, "grad_clip", c.grad_clip, s);
    read(j, "ema_decay", c.ema_decay, s);
    read(j, "early_stop_patience", c.early_stop_patience, s);
    read(j, "adam_beta1", c.adam_beta1, s);
    read(j, "adam_beta2", c.adam_beta2, s);
    read(j, "adam_eps", c.adam_eps, s);
    read(j, "weight_decay", c.weight_decay, s);
    read(j, "seed", c.seed, s);
    c.validate();
    return c;
}

Json to_json(const SmoothingConfig& c) { return {{"h1", c.h1}, {"h2", c.h2}}; }

SmoothingConfig smoothing_config_from_json(const Json& j, SmoothingConfig c) {
    const char* s = "smoothing";
    reject_unknown(j, {"h1", "h2"}, s);
    read(j, "h1", c.h1, s);
    read(j, "h2", c.h2, s);
    if (!(c.h1 > 0.0) || !(c.h2 > 0.0)) {
        throw InputError("smoothing: bandwidths must be positive");
    }
    return c;
}

Json to_json(const ConditioningConfig& c) {
    return {{"alpha_trend_short", c.alpha_trend_short},
            {"alpha_trend_long", c.alpha_trend_long},
            {"alpha_vol_short", c.alpha_vol_short},
            {"alpha_vol_long", c.alpha_vol_long},
            {"surface_span_short", c.surface_span_short},
            {"surface_span_long", c.surface_span_long}};
}

ConditioningConfig conditioning_config_from_json(const Json& j, ConditioningConfig c) {
    const char* s = "conditioning";
    reject_unknown(j, {"alpha_trend_short", "alpha_trend_long", "alpha_vol_short", "alpha_vol_long",
                       "surface_span_short", "surface_span_long"},
                   s);
    read(j, "alpha_trend_short", c.alpha_trend_short, s);
    read(j, "alpha_trend_long", c.alpha_trend_long, s);
    read(j, "alpha_vol_short", c.alpha_vol_short, s);
    read(j, "alpha_vol_long", c.alpha_vol_long, s);
    read(j, "surface_span_short", c.surface_span_short, s);
    read(j, "surface_span_long", c.surface_span_long, s);
    c.validate();
    return c;
}

Json to_json(const PricingContext& c) { return {{"rate", c.rate}, {"dividend", c.dividend}}; }

PricingContext pricing_from_json(const Json& j, PricingContext c) {
    const char* s = "pricing";
    reject_unknown(j, {"rate", "dividend"}, s);
    read(j, "rate", c.rate, s);
    read(j, "dividend", c.dividend, s);
    if (!std::isfinite(c.rate) || !std::isfinite(c.dividend)) {
        throw InputError("pricing: rate and dividend must be finite");
    }
    return c;
}

std::string checkpoint_to_string(const Checkpoint& c) {
    Json j;
    j["format"] = "ivdiff-checkpoint";
    j["version"] = kCheckpointVersion;
    j["cfg"] = {{"unet", to_json(c.unet)}, {"train", to_json(c.train)}, {"pricing", to_json(c.pricing)}};
    j["schedule"] = {{"n", c.schedule.steps()},
                     {"beta", vector_json(c.schedule.betas())},
                     {"alpha_bar", vector_json(c.schedule.alpha_bars())}};
    j["normalization"] = {{"mean", surface_json(c.stats.mean)}, {"std", surface_json(c.stats.std)}};
    j["scalar_stats"] = {{"mean", vector_json(c.scalar_stats.mean)},
                         {"std", vector_json(c.scalar_stats.std)}};
    j["params"] = params_json(c.params.live);
    j["ema_params"] = params_json(c.params.ema);
    j["epoch"] = c.epoch;
    j["best_val"] = std::isfinite(c.best_val) ? Json(c.best_val) : Json(nullptr);
    return j.dump() + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text, const std::string& source) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw InputError("cannot parse " + source + ": " + e.what());
    }
    try {
        if (j.at("format") != "ivdiff-checkpoint") {
            throw InputError(source + " is not an ivdiff checkpoint");
        }
        if (j.at("version") != kCheckpointVersion) {
            throw InputError(source + ": unsupported checkpoint version " + j.at("version").dump());
        }
        Checkpoint c;
        const Json& cfg = j.at("cfg");
        reject_unknown(cfg, {"unet", "train", "pricing"}, "cfg");
        c.unet = unet_config_from_json(cfg.at("unet"));
        c.train = train_config_from_json(cfg.at("train"));
        c.pricing = pricing_from_json(cfg.at("pricing"));
        const int n = j.at("schedule").at("n").get<int>();
        c.schedule = NoiseSchedule(vector_from_json(j.at("schedule").at("beta"), n, "schedule beta"));
        const Eigen::VectorXd ab = vector_from_json(j.at("schedule").at("alpha_bar"), n, "schedule alpha_bar");
        if (ab != c.schedule.alpha_bars()) {
            throw InputError(source + ": alpha_bar table is inconsistent with beta");
        }
        c.stats.mean = surface_from_json(j.at("normalization").at("mean"), "normalization mean");
        c.stats.std = surface_from_json(j.at("normalization").at("std"), "normalization std");
        c.scalar_stats.mean = vector_from_json(j.at("scalar_stats").at("mean"), kScalarFeatures, "scalar mean");
        c.scalar_stats.std = vector_from_json(j.at("scalar_stats").at("std"), kScalarFeatures, "scalar std");
        c.params.live = params_from_json(j.at("params"), c.unet, true, "params");
        c.params.ema = params_from_json(j.at("ema_params"), c.unet, false, "ema_params");
        c.epoch = j.at("epoch").get<int>();
        c.best_val = j.at("best_val").is_null() ? std::numeric_limits<double>::infinity()
                                                 : j.at("best_val").get<double>();
        return c;
    } catch (const Json::exception& e) {
        throw InputError("malformed " + source + ": " + e.what());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    atomic_write(path, checkpoint_to_string(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_string(read_file(path), path);
}

}  // namespace ivdiff

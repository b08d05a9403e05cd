#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dozer/data.hpp"
#include "dozer/errors.hpp"
#include "dozer/mask.hpp"
#include "dozer/model.hpp"
#include "dozer/train.hpp"

namespace dozer {

struct RenderedMask {
    std::string text;
    std::string pgm;
};

inline RenderedMask render_mask(const AttnMask& mask) {
    return {mask_to_text(mask), mask_to_pgm(mask)};
}

namespace cli_detail {

struct SynthFlags {
    int T = 1200;
    int D = 3;
    double period = 24.0;
    double slope = 0.01;
    double noise = 0.1;
};

struct ModelFlags {
    int I = 96, L = 24, O = 24, p = 24, c = 4;
    int heads = 4, enc_layers = 2, dec_layers = 1;
    int w = 3, interval = 2, v = 1;
    bool cross_anchored = false;
    std::string kernels = "13,17";
    int d_ff = 0;
    double dropout = 0.1;
    bool per_variable_trend = false;
};

struct DataFlags {
    std::string data_path;
    bool use_synth = false;
    double train_frac = 0.7;
    double val_frac = 0.1;
};

struct TrainFlags {
    int epochs = 10;
    int batch = 16;
    double lr = 1e-3;
    double lr_min = 0.0;
    int stride = 1;
};

inline std::vector<int> parse_kernels(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("cannot parse kernel size '" + tok + "'");
        }
    }
    return out;
}

inline DozerformerConfig to_config(const ModelFlags& m, int D) {
    DozerformerConfig cfg;
    cfg.I = m.I;
    cfg.L = m.L;
    cfg.O = m.O;
    cfg.D = D;
    cfg.p = m.p;
    cfg.c = m.c;
    cfg.heads = m.heads;
    cfg.enc_layers = m.enc_layers;
    cfg.dec_layers = m.dec_layers;
    cfg.sparsity.w = m.w;
    cfg.sparsity.interval = m.interval;
    cfg.sparsity.v = m.v;
    cfg.sparsity.cross_stride_end_anchored = m.cross_anchored;
    cfg.kernels = parse_kernels(m.kernels);
    cfg.d_ff = m.d_ff;
    cfg.dropout = m.dropout;
    cfg.per_variable_trend = m.per_variable_trend;
    cfg.validate();
    return cfg;
}

inline Series load_series(const DataFlags& d, const SynthFlags& s, std::uint64_t seed) {
    if (d.use_synth) return synth_series(s.T, s.D, s.period, s.slope, s.noise, seed);
    return load_csv(d.data_path);
}

inline void add_model_flags(CLI::App* cmd, ModelFlags& m) {
    cmd->add_option("--I", m.I, "look-back length")->capture_default_str();
    cmd->add_option("--L", m.L, "decoder label length")->capture_default_str();
    cmd->add_option("--O", m.O, "forecast horizon")->capture_default_str();
    cmd->add_option("--p", m.p, "patch size")->capture_default_str();
    cmd->add_option("--c", m.c, "embedding feature maps")->capture_default_str();
    cmd->add_option("--heads", m.heads, "attention heads")->capture_default_str();
    cmd->add_option("--enc-layers", m.enc_layers, "encoder layers")->capture_default_str();
    cmd->add_option("--dec-layers", m.dec_layers, "decoder layers")->capture_default_str();
    cmd->add_option("--w", m.w, "local window size (odd)")->capture_default_str();
    cmd->add_option("--interval", m.interval, "stride interval")->capture_default_str();
    cmd->add_option("--v", m.v, "vary initial window")->capture_default_str();
    cmd->add_flag("--cross-anchored", m.cross_anchored,
                  "anchor cross stride phase at the last encoder patch");
    cmd->add_option("--kernels", m.kernels, "decomposition kernel sizes, comma separated")
        ->capture_default_str();
    cmd->add_option("--d-ff", m.d_ff, "feed-forward width (0 = 2*d_model)")->capture_default_str();
    cmd->add_option("--dropout", m.dropout, "dropout rate")->capture_default_str();
    cmd->add_flag("--per-variable-trend", m.per_variable_trend,
                  "separate trend projection per variable");
}

inline void add_synth_flags(CLI::App* cmd, SynthFlags& s) {
    cmd->add_option("--T", s.T, "generated series length")->capture_default_str();
    cmd->add_option("--D", s.D, "generated variable count")->capture_default_str();
    cmd->add_option("--period", s.period, "sine period in steps")->capture_default_str();
    cmd->add_option("--slope", s.slope, "linear drift per step")->capture_default_str();
    cmd->add_option("--noise", s.noise, "Gaussian noise sigma")->capture_default_str();
}

inline void add_data_flags(CLI::App* cmd, DataFlags& d) {
    auto* data = cmd->add_option("--data", d.data_path, "CSV input path");
    auto* synth = cmd->add_flag("--synth", d.use_synth, "generate a synthetic series instead");
    data->excludes(synth);
    synth->excludes(data);
    cmd->add_option("--train-frac", d.train_frac, "training fraction")->capture_default_str();
    cmd->add_option("--val-frac", d.val_frac, "validation fraction")->capture_default_str();
}

inline void require_source(const DataFlags& d) {
    if (!d.use_synth && d.data_path.empty())
        throw CLI::ValidationError("data", "specify --data PATH or --synth");
}

/// Flat key=value file with '#' comments; keys mirror the long flag names.
inline std::vector<std::pair<std::string, std::string>> read_flat_config(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config: cannot open '" + path + "'");
    auto trim = [](const std::string& s) {
        const char* ws = " \t\r";
        const auto a = s.find_first_not_of(ws);
        if (a == std::string::npos) return std::string();
        return s.substr(a, s.find_last_not_of(ws) - a + 1);
    };
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string text = trim(line);
        if (text.empty()) continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos)
            throw DataError("config: line " + std::to_string(line_no) + " has no '=': '" +
                            text + "'");
        std::string key = trim(text.substr(0, eq));
        if (key.empty())
            throw DataError("config: line " + std::to_string(line_no) + " has an empty key");
        kv.emplace_back(std::move(key), trim(text.substr(eq + 1)));
    }
    return kv;
}

/// Turns `--config FILE` into ordinary `--key=value` tokens inserted right
/// after the subcommand, skipping keys the command line already sets, so
/// explicit flags override the file and the file overrides defaults.
inline std::vector<std::string> expand_config_args(const std::vector<std::string>& args) {
    std::string file;
    for (size_t k = 0; k < args.size(); ++k) {
        if (args[k] == "--config" && k + 1 < args.size())
            file = args[k + 1];
        else if (args[k].rfind("--config=", 0) == 0)
            file = args[k].substr(9);
    }
    if (file.empty()) return args;
    auto given = [&](const std::string& key) {
        const std::string bare = "--" + key;
        const std::string assigned = bare + "=";
        for (const auto& a : args)
            if (a == bare || a.rfind(assigned, 0) == 0) return true;
        return false;
    };
    std::vector<std::string> out;
    out.reserve(args.size() + 8);
    out.push_back(args.front());
    for (const auto& [key, value] : read_flat_config(file))
        if (key != "config" && !given(key)) out.push_back("--" + key + "=" + value);
    out.insert(out.end(), args.begin() + 1, args.end());
    return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline void dump_mask(const std::filesystem::path& dir, const std::string& name,
                      const AttnMask& mask) {
    RenderedMask r = render_mask(mask);
    write_text_file(dir / (name + ".txt"), r.text);
    write_text_file(dir / (name + ".pgm"), r.pgm);
}

/// Writes every mask component for the configured geometry and returns how
/// many files were produced.
inline int dump_all_masks(const std::filesystem::path& dir, const DozerformerConfig& cfg) {
    std::filesystem::create_directories(dir);
    const int ne = cfg.n_enc(), nd = cfg.n_dec();
    const auto& sp = cfg.sparsity;
    const CrossCoords cc = CrossCoords::make(ne, nd, cfg.label_patches());
    int files = 0;
    auto emit = [&](const std::string& name, const AttnMask& m) {
        dump_mask(dir, name, m);
        files += 2;
    };
    emit("enc_self_local", local_self_mask(ne, sp.w));
    emit("enc_self_stride", stride_self_mask(ne, sp.interval));
    emit("enc_self", dozer_self_mask(ne, sp));
    emit("dec_self", dozer_self_mask(nd, sp));
    emit("cross_local", local_cross_mask(cc, sp.w));
    emit("cross_stride", stride_cross_mask(cc, sp.interval, sp.cross_stride_end_anchored));
    emit("cross_vary", vary_cross_mask(cc, sp.v));
    emit("cross", dozer_cross_mask(cc, sp));
    return files;
}

inline std::string train_metrics_text(const MetricsReport& test, const MetricsReport& val,
                                      const TrainOutcome& outcome, std::uint64_t seed) {
    std::string out = "split=test\n" + metrics_to_kv(test);
    out += "val_mse=" + detail::fmt_g17(val.mse) + "\n";
    out += "val_mae=" + detail::fmt_g17(val.mae) + "\n";
    out += "val_mase=" + detail::fmt_g17(val.mase) + "\n";
    out += "best_epoch=" + std::to_string(outcome.best_epoch) + "\n";
    out += "steps=" + std::to_string(outcome.steps) + "\n";
    out += "seed=" + std::to_string(seed) + "\n";
    return out;
}

}  // namespace cli_detail

/// Entry point shared by the binary and the tests. `args` excludes the
/// program name. Returns 0 on success, 1 on usage errors, 2 on runtime
/// failures.
inline int run_command(const std::vector<std::string>& args) {
    namespace cd = cli_detail;
    namespace fs = std::filesystem;
    CLI::App app{"Sparse-attention encoder-decoder forecaster"};
    app.require_subcommand(1);

    cd::SynthFlags synth_flags;
    cd::ModelFlags model_flags;
    cd::DataFlags data_flags;
    cd::TrainFlags train_flags;
    std::uint64_t seed = 1;
    std::string out_path;
    std::string checkpoint_path;
    std::string split_name = "test";
    std::string config_path;  // applied up front by expand_config_args

    auto add_config_flag = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path,
                        "flat key=value config file; # comments; flags override");
    };

    // synth: generate a CSV.
    auto* synth = app.add_subcommand("synth", "generate a synthetic CSV series");
    add_config_flag(synth);
    cd::add_synth_flags(synth, synth_flags);
    synth->add_option("--seed", seed, "generator seed")->capture_default_str();
    synth->add_option("--out", out_path, "output CSV path")->required();
    synth->callback([&]() {
        Series s = synth_series(synth_flags.T, synth_flags.D, synth_flags.period,
                                synth_flags.slope, synth_flags.noise, seed);
        save_csv(s, out_path);
        std::cout << "wrote " << out_path << " (" << s.T << " rows, " << s.D << " variables)\n";
    });

    // train: fit on a data source and write run artifacts.
    auto* train_cmd = app.add_subcommand("train", "train a model and write run artifacts");
    add_config_flag(train_cmd);
    cd::add_data_flags(train_cmd, data_flags);
    cd::add_synth_flags(train_cmd, synth_flags);
    cd::add_model_flags(train_cmd, model_flags);
    train_cmd->add_option("--epochs", train_flags.epochs, "training epochs")->capture_default_str();
    train_cmd->add_option("--batch", train_flags.batch, "windows per optimizer step")
        ->capture_default_str();
    train_cmd->add_option("--lr", train_flags.lr, "peak learning rate")->capture_default_str();
    train_cmd->add_option("--lr-min", train_flags.lr_min, "final learning rate")
        ->capture_default_str();
    train_cmd->add_option("--stride", train_flags.stride, "training window stride")
        ->capture_default_str();
    train_cmd->add_option("--seed", seed, "run seed (data, init, shuffle, dropout)")
        ->capture_default_str();
    train_cmd->add_option("--out", out_path, "output directory")->required();
    train_cmd->callback([&]() {
        cd::require_source(data_flags);
        Series raw = cd::load_series(data_flags, synth_flags, seed);
        DozerformerConfig cfg = cd::to_config(model_flags, raw.D);
        ForecastData data = ForecastData::make(raw, cfg, data_flags.train_frac,
                                               data_flags.val_frac, train_flags.stride);
        Dozerformer model(cfg, seed);

        TrainOptions opt;
        opt.epochs = train_flags.epochs;
        opt.batch = train_flags.batch;
        opt.lr = train_flags.lr;
        opt.lr_min = train_flags.lr_min;
        opt.seed = seed;
        TrainOutcome outcome = train(model, data, opt);
        MetricsReport test = evaluate(model, data.test_w, data.naive_denom);

        fs::path dir(out_path);
        fs::create_directories(dir);
        model.save_checkpoint((dir / "checkpoint").string());
        cd::write_text_file(dir / "metrics.txt",
                            cd::train_metrics_text(test, outcome.val_report, outcome, seed));
        nlohmann::json record;
        record["test"] = metrics_to_json(test);
        record["val"] = metrics_to_json(outcome.val_report);
        record["best_epoch"] = outcome.best_epoch;
        record["steps"] = outcome.steps;
        record["seed"] = seed;
        cd::write_text_file(dir / "metrics.json", record.dump(2) + "\n");
        std::string log;
        for (const auto& line : outcome.epoch_log) log += line + "\n";
        log += "wall_seconds=" + detail::fmt_g17(outcome.wall_seconds) + "\n";
        if (outcome.diverged) log += "status=diverged\n";
        cd::write_text_file(dir / "train.log", log);
        cd::dump_all_masks(dir / "masks", cfg);

        std::cout << cd::train_metrics_text(test, outcome.val_report, outcome, seed);
        std::cout << "wall_seconds=" << detail::fmt_g17(outcome.wall_seconds)
                  << "\nartifacts=" << dir.string() << "\n";
        if (outcome.diverged) std::cout << "status=diverged\n";
    });

    // eval: score a checkpoint on one split of a data source.
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a data split");
    add_config_flag(eval_cmd);
    cd::add_data_flags(eval_cmd, data_flags);
    cd::add_synth_flags(eval_cmd, synth_flags);
    eval_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint path")->required();
    eval_cmd->add_option("--split", split_name, "train, val, or test")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    eval_cmd->add_option("--seed", seed, "must match the training seed for --synth data")
        ->capture_default_str();
    eval_cmd->add_option("--out", out_path, "output directory")->required();
    eval_cmd->callback([&]() {
        cd::require_source(data_flags);
        Dozerformer model = Dozerformer::load_checkpoint(checkpoint_path);
        Series raw = cd::load_series(data_flags, synth_flags, seed);
        if (raw.D != model.config().D)
            throw DataError("eval: data has " + std::to_string(raw.D) +
                            " variables, checkpoint expects " + std::to_string(model.config().D));
        ForecastData data = ForecastData::make(raw, model.config(), data_flags.train_frac,
                                               data_flags.val_frac, 1);
        const std::vector<Window>& windows = split_name == "train" ? data.train_w
                                             : split_name == "val" ? data.val_w
                                                                   : data.test_w;
        MetricsReport r = evaluate(model, windows, data.naive_denom);
        std::string text = "split=" + split_name + "\n" + metrics_to_kv(r);
        fs::path dir(out_path);
        fs::create_directories(dir);
        cd::write_text_file(dir / "metrics.txt", text);
        nlohmann::json record = metrics_to_json(r);
        record["split"] = split_name;
        cd::write_text_file(dir / "metrics.json", record.dump(2) + "\n");
        std::cout << text;
    });

    // mask-dump: render every mask component for a geometry.
    auto* mask_cmd = app.add_subcommand("mask-dump", "write text and PGM mask renderings");
    add_config_flag(mask_cmd);
    cd::add_model_flags(mask_cmd, model_flags);
    mask_cmd->add_option("--out", out_path, "output directory")->required();
    mask_cmd->callback([&]() {
        DozerformerConfig cfg = cd::to_config(model_flags, 1);
        const int files = cd::dump_all_masks(fs::path(out_path) / "masks", cfg);
        std::cout << "wrote " << files << " mask files under " << out_path << "/masks\n";
    });

    // complexity: exact pair counts against the closed-form budget.
    auto* cx = app.add_subcommand("complexity", "print attention pair counts and ratios");
    add_config_flag(cx);
    cd::add_model_flags(cx, model_flags);
    cx->callback([&]() {
        SparsityParams sp;
        sp.w = model_flags.w;
        sp.interval = model_flags.interval;
        sp.v = model_flags.v;
        sp.cross_stride_end_anchored = model_flags.cross_anchored;
        sp.validate();
        const int ne = detail::ceil_div(model_flags.I, model_flags.p);
        const ClosedFormPairs bound = closed_form_pairs(model_flags.I, model_flags.L,
                                                        model_flags.O, model_flags.p, sp);
        const PairCountReport self = count_pairs(dozer_self_mask(ne, sp), bound.self_pairs);
        std::cout << "n_enc=" << ne << "\n";
        std::cout << "self_pairs=" << self.counted << "\n";
        std::cout << "self_full=" << self.full << "\n";
        std::cout << "self_ratio=" << detail::fmt_g17(self.ratio) << "\n";
        std::cout << "self_bound=" << self.closed_form << "\n";
        const bool patch_aligned =
            model_flags.L % model_flags.p == 0 && model_flags.O % model_flags.p == 0;
        if (patch_aligned && model_flags.L + model_flags.O > 0) {
            const int nd = (model_flags.L + model_flags.O) / model_flags.p;
            const CrossCoords cc = CrossCoords::make(ne, nd, model_flags.L / model_flags.p);
            const PairCountReport dself = count_pairs(dozer_self_mask(nd, sp));
            const PairCountReport cross = count_pairs(dozer_cross_mask(cc, sp), bound.cross_pairs);
            std::cout << "n_dec=" << nd << "\n";
            std::cout << "dec_self_pairs=" << dself.counted << "\n";
            std::cout << "dec_self_full=" << dself.full << "\n";
            std::cout << "dec_self_ratio=" << detail::fmt_g17(dself.ratio) << "\n";
            std::cout << "cross_pairs=" << cross.counted << "\n";
            std::cout << "cross_full=" << cross.full << "\n";
            std::cout << "cross_ratio=" << detail::fmt_g17(cross.ratio) << "\n";
            std::cout << "cross_bound=" << cross.closed_form << "\n";
        }
    });

    try {
        const std::vector<std::string> expanded = cd::expand_config_args(args);
        std::vector<std::string> full;
        full.reserve(expanded.size() + 1);
        full.push_back("dozer");
        full.insert(full.end(), expanded.begin(), expanded.end());
        std::vector<const char*> argv;
        argv.reserve(full.size());
        for (const auto& a : full) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace dozer

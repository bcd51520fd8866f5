// countlab command line: dataset generation, training, evaluation, patching,
// probing, experiment suites and report re-analysis.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "countlab/experiments.hpp"
#include "scene_png.hpp"

namespace fs = std::filesystem;
using namespace countlab;

namespace {

fs::path default_out() {
    const char* env = std::getenv("COUNTLAB_OUT");
    return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

/// Reads a JSON config; parse errors become ConfigError with the line number.
nlohmann::json read_config(const std::string& path) {
    if (path.empty()) {
        return nlohmann::json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path);
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        int line = 1;
        for (std::size_t i = 0; i < std::min(e.byte, text.size() + 1) - 1 && i < text.size(); ++i) {
            line += text[i] == '\n' ? 1 : 0;
        }
        throw ConfigError(path + ":" + std::to_string(line) + ": parse error: " + e.what());
    }
}

/// nlohmann type errors inside a config are config errors too.
template <class T>
T config_as(const nlohmann::json& j, const std::string& what) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

std::vector<CountingSample> read_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open " + path);
    }
    std::vector<CountingSample> out;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(nlohmann::json::parse(line).get<CountingSample>());
        } catch (const nlohmann::json::exception& e) {
            throw InputError(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    if (out.empty()) {
        throw InputError(path + " holds no samples");
    }
    return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream out(path);
    out << j.dump(2) << '\n';
}

nlohmann::json stamp(const nlohmann::json& config, std::uint64_t seed) {
    return {{"tool_version", kToolVersion}, {"config_hash", config_hash(config)}, {"seed", seed},
            {"created", utc_timestamp()}};
}

// ----------------------------------------------------------------- gen

struct GenArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool png = false;
};

/// {"modality", "counts", "samples_per_count", "seed", "task": {...}} where
/// task holds TextTaskConfig or VisualTaskConfig fields (count and seed are
/// filled per sample).
int cmd_gen(const GenArgs& a) {
    nlohmann::json cfg = read_config(a.config);
    static const std::set<std::string> known{"modality", "counts", "samples_per_count", "seed", "task"};
    for (const auto& [k, v] : cfg.items()) {
        if (!known.contains(k)) {
            throw ConfigError("unknown gen config key '" + k + "'");
        }
    }
    if (a.seed) {
        cfg["seed"] = *a.seed;
    }
    const Modality modality = detail::parse_modality(cfg.value("modality", std::string("text")));
    const auto counts = config_as<std::vector<int>>(cfg.value("counts", nlohmann::json{1, 2, 3, 4, 5, 6, 7, 8, 9}),
                                                    "counts");
    const int per_count = cfg.value("samples_per_count", 10);
    const std::uint64_t seed = cfg.value("seed", std::uint64_t{1});
    const nlohmann::json task = cfg.value("task", nlohmann::json::object());
    if (per_count <= 0) {
        throw ConfigError("samples_per_count must be positive");
    }
    const fs::path out = a.out.empty() ? default_out() / "dataset" : fs::path(a.out);
    fs::create_directories(out);
    nlohmann::json files = nlohmann::json::array();
    for (const int n : counts) {
        const fs::path file = out / ("count_" + std::to_string(n) + ".jsonl");
        std::ofstream f(file);
        for (int i = 0; i < per_count; ++i) {
            nlohmann::json t = task;
            t["count"] = n;
            t["seed"] = derive_seed(seed, static_cast<std::uint64_t>(n) * 1000003ULL + static_cast<std::uint64_t>(i));
            const CountingSample s = modality == Modality::text
                                         ? generate_text(config_as<TextTaskConfig>(t, "task"))
                                         : generate_visual(config_as<VisualTaskConfig>(t, "task"));
            f << nlohmann::json(s).dump() << '\n';
            if (a.png && modality == Modality::visual) {
                fs::create_directories(out / "png");
                write_scene_png(generate_scene(config_as<VisualTaskConfig>(t, "task")),
                                (out / "png" / ("count_" + std::to_string(n) + "_" + std::to_string(i) + ".png")).string());
            }
        }
        files.push_back({{"count", n}, {"file", file.filename().string()}, {"samples", per_count}});
    }
    write_json(out / "manifest.json", {{"metadata", stamp(cfg, seed)}, {"config", cfg}, {"files", files}});
    std::cout << "wrote " << files.size() << " files to " << out.string() << '\n';
    return 0;
}

// ----------------------------------------------------------------- train / eval

struct TrainArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<int> workers;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    nlohmann::json cfg = read_config(a.config);
    if (a.seed) {
        cfg["seed"] = *a.seed;
    }
    if (a.steps) {
        cfg["steps"] = *a.steps;
    }
    if (a.workers) {
        cfg["workers"] = *a.workers;
    }
    const TrainConfig tc = config_as<TrainConfig>(cfg, "train config");
    const fs::path out = a.out.empty() ? default_out() : fs::path(a.out);
    TrainHooks hooks;
    hooks.output_dir = out.string();
    if (!a.quiet) {
        hooks.on_step = [&](int step, double loss, double lr) {
            if (step % 50 == 0) {
                std::cout << "step " << step << " loss " << loss << " lr " << lr << '\n' << std::flush;
            }
        };
        hooks.on_eval = [](int step, const AccuracyTable& t) {
            std::cout << "eval " << step << " accuracy " << t.overall() << '\n' << std::flush;
        };
    }
    const TrainReport r = train(tc, hooks);
    nlohmann::json rj = r;
    rj["metadata"] = stamp(nlohmann::json(tc), tc.seed);
    rj["checkpoint"] = r.checkpoint_path;
    write_json(out / "train_report.json", rj);
    if (r.diverged) {
        std::cerr << "training diverged (" << r.divergence_message << "); last good checkpoint: "
                  << r.checkpoint_path << '\n';
        return NumericError("").exit_code();
    }
    std::cout << "checkpoint " << r.checkpoint_path << " final accuracy " << r.final_table.overall() << '\n';
    return 0;
}

struct EvalArgs {
    std::string config;
    std::string checkpoint;
    std::string out;
    std::optional<int> workers;
};

int cmd_eval(const EvalArgs& a) {
    const fs::path out = a.out.empty() ? default_out() : fs::path(a.out);
    const std::string ckpt = a.checkpoint.empty() ? (out / "model.ckpt").string() : a.checkpoint;
    CheckpointInfo info;
    const auto model = load_checkpoint<float>(ckpt, &info);
    EvalConfig ec;
    if (!a.config.empty()) {
        ec = config_as<EvalConfig>(read_config(a.config), "eval config");
    } else if (info.meta.contains("train_config") && info.meta["train_config"].contains("eval")) {
        ec = config_as<EvalConfig>(info.meta["train_config"]["eval"], "checkpoint eval config");
    }
    if (ec.families.empty()) {
        // Default held-out grid: the text family, plus vision when the model has an encoder.
        ec.families.push_back(CurriculumEntry{});
        if (model.config().vision) {
            CurriculumEntry v;
            v.modality = Modality::visual;
            ec.families.push_back(v);
        }
    }
    if (a.workers) {
        ec.workers = *a.workers;
    }
    const AccuracyTable t = evaluate_behavioral(model, ec);
    const double chance = 1.0 / kMaxCount;
    const bool flagged = t.overall() < 0.5;
    nlohmann::json j = {{"metadata", stamp(nlohmann::json(ec), ec.seed)},
                        {"checkpoint", ckpt},
                        {"overall", t.overall()},
                        {"chance", chance},
                        {"flag", flagged ? "near chance: checkpoint looks untrained" : ""},
                        {"table", t}};
    write_json(out / "eval.json", j);
    std::ofstream csv(out / "eval.csv");
    t.write_csv(csv);
    std::cout << "accuracy " << t.overall() << (flagged ? "  [FLAG: near chance]" : "") << " -> "
              << (out / "eval.json").string() << '\n';
    return 0;
}

// ----------------------------------------------------------------- patch / scope

struct PatchArgs {
    std::string checkpoint;
    std::string target;
    std::string source;
    std::string spec;
    std::string out;
};

nlohmann::json patch_run_json(const PatchRun& r, const CountingSample& target) {
    nlohmann::json p_base = nlohmann::json::array(), p_patched = nlohmann::json::array();
    for (int n = 1; n <= kMaxCount; ++n) {
        p_base.push_back(PatchRun::p_digit(r.baseline, n));
        p_patched.push_back(PatchRun::p_digit(r.patched, n));
    }
    return {{"spec", r.spec},
            {"target_id", r.target_id},
            {"source_id", r.source_id},
            {"ground_truth", target.ground_truth},
            {"p_digits_baseline", p_base},
            {"p_digits_patched", p_patched},
            {"drop", probability_drop(PatchRun::p_digit(r.baseline, target.ground_truth),
                                      PatchRun::p_digit(r.patched, target.ground_truth))}};
}

int cmd_patch(const PatchArgs& a) {
    const auto model = load_checkpoint<float>(a.checkpoint);
    const auto targets = read_samples(a.target);
    std::vector<CountingSample> sources;
    if (!a.source.empty()) {
        sources = read_samples(a.source);
        if (sources.size() != targets.size() && sources.size() != 1) {
            throw InputError("source file must hold one sample or as many as the target file");
        }
    }
    const InterventionSpec spec = config_as<InterventionSpec>(read_config(a.spec), "intervention spec");
    const fs::path out = a.out.empty() ? default_out() / "patch" : fs::path(a.out);
    fs::create_directories(out);
    std::ofstream log(out / "patch_runs.jsonl");
    std::vector<double> drops;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        std::optional<ActivationCache<float>> cache;
        if (!sources.empty()) {
            cache = capture(model, sources[sources.size() == 1 ? 0 : i]);
        }
        const PatchRun r = run_patched(model, targets[i], spec, cache ? &*cache : nullptr);
        const auto j = patch_run_json(r, targets[i]);
        drops.push_back(j.at("drop").get<double>());
        log << j.dump() << '\n';
    }
    const Aggregate agg = aggregate(std::span<const double>(drops));
    std::cout << "patch: " << targets.size() << " runs, drop " << agg.mean << " +- " << agg.sd << " -> "
              << (out / "patch_runs.jsonl").string() << '\n';
    return 0;
}

struct ScopeArgs {
    std::string checkpoint;
    std::string source;
    std::string config;
    std::string out;
    int position = -1;
    int sample = 0;
    std::optional<int> cutoff;
};

int cmd_scope(const ScopeArgs& a) {
    const auto model = load_checkpoint<float>(a.checkpoint);
    const auto sources = read_samples(a.source);
    if (a.sample < 0 || a.sample >= static_cast<int>(sources.size())) {
        throw InputError("sample index out of range");
    }
    const auto& src = sources[static_cast<std::size_t>(a.sample)];
    ProbeConfig pc;
    if (!a.config.empty()) {
        pc = config_as<ProbeConfig>(read_config(a.config), "probe config");
    } else if (src.modality == Modality::visual) {
        pc.modality = Modality::visual;
    }
    if (a.cutoff) {
        pc.layer_cutoff = *a.cutoff;
    }
    const auto cache = capture(model, src);
    const Decoding d = decode(model, cache, a.position, pc);
    const nlohmann::json j = {{"decoding", d}, {"probe", pc}, {"metadata", stamp(nlohmann::json(pc), src.seed)}};
    if (!a.out.empty()) {
        write_json(a.out, j);
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

// ----------------------------------------------------------------- experiment / analyze

struct ExperimentArgs {
    std::string name;
    std::string config;
    std::string checkpoint;
    std::string visual_checkpoint;
    std::string out;
    std::optional<int> k;
    std::optional<int> samples;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
};

void print_summary(const std::string& name, const nlohmann::json& summary, const std::string& status) {
    std::cout << name << ": " << status;
    int shown = 0;
    for (const auto& c : summary) {
        if (shown++ == 4) {
            std::cout << " ...";
            break;
        }
        std::cout << " | " << c.at("labels").dump() << " = ";
        if (c.at("mean").is_null()) {
            std::cout << "n/a";
        } else {
            std::cout << c.at("mean").get<double>() << " +- " << c.at("sd").get<double>();
        }
    }
    std::cout << '\n' << std::flush;
}

int cmd_experiment(const ExperimentArgs& a) {
    nlohmann::json cfg = read_config(a.config);
    if (a.k) {
        cfg["ks"] = {*a.k};
    }
    if (a.samples) {
        cfg["n_samples"] = *a.samples;
    }
    if (a.seed) {
        cfg["seed"] = *a.seed;
    }
    if (a.workers) {
        cfg["workers"] = *a.workers;
    }
    if (!a.checkpoint.empty()) {
        cfg["checkpoint"] = a.checkpoint;
    }
    if (!a.visual_checkpoint.empty()) {
        cfg["visual_checkpoint"] = a.visual_checkpoint;
    }
    cfg.erase("name");
    const ExperimentConfig ec = config_as<ExperimentConfig>(cfg, "experiment config");
    std::vector<std::string> names;
    if (a.name != "all") {
        find_experiment(a.name); // exits 2 with the registered names
        names.push_back(a.name);
    }
    std::optional<Transformer<float>> text, visual;
    ModelSet models;
    if (!ec.checkpoint.empty()) {
        text = load_checkpoint<float>(ec.checkpoint);
        models.text = &*text;
        models.text_id = ec.checkpoint;
    }
    if (!ec.visual_checkpoint.empty()) {
        visual = load_checkpoint<float>(ec.visual_checkpoint);
        models.visual = &*visual;
        models.visual_id = ec.visual_checkpoint;
    }
    const fs::path out = a.out.empty() ? default_out() / "experiments" : fs::path(a.out);
    const Manifest m = run_all(ec, models, out, names, [](const ManifestEntry& e) {
        print_summary(e.name, e.summary, e.status == "ok" ? "ok" : "FAILED (" + e.error + ")");
    });
    std::cout << "manifest " << (out / "manifest.json").string() << '\n';
    for (const auto& e : m.experiments) {
        if (e.status != "ok") {
            return 1;
        }
    }
    return 0;
}

/// Recomputes every aggregate of a run directory from its records.jsonl and
/// compares with the stored report.
int cmd_analyze(const std::string& dir) {
    int checked = 0, bad = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.path().filename() != "report.json") {
            continue;
        }
        const fs::path base = entry.path().parent_path();
        std::ifstream in(entry.path());
        const auto report = nlohmann::json::parse(in);
        std::vector<ReportRecord> records;
        std::ifstream rin(base / "records.jsonl");
        std::string line;
        while (std::getline(rin, line)) {
            const auto j = nlohmann::json::parse(line);
            records.push_back({j.at("labels"), j.at("value").is_null() ? 0.0 : j.at("value").get<double>(),
                               j.at("excluded").get<bool>(), j.at("data")});
        }
        std::vector<std::vector<std::string>> groupings;
        for (const auto& c : report.at("cells")) {
            const auto by = c.at("by").get<std::vector<std::string>>();
            if (std::find(groupings.begin(), groupings.end(), by) == groupings.end()) {
                groupings.push_back(by);
            }
        }
        const auto cells = ExperimentReport::aggregate_cells(records, groupings);
        // Stored values went through text; compare at the printed precision.
        bool ok = cells.size() == report.at("cells").size();
        for (std::size_t i = 0; ok && i < cells.size(); ++i) {
            const nlohmann::json again = cells[i];
            const auto& stored = report.at("cells")[i];
            ok = again.at("labels") == stored.at("labels") && again.at("n") == stored.at("n");
            if (ok && !stored.at("mean").is_null()) {
                ok = std::abs(again.at("mean").get<double>() - stored.at("mean").get<double>()) <= 1e-12;
            }
        }
        ++checked;
        bad += ok ? 0 : 1;
        std::cout << report.value("name", base.string()) << ": " << records.size() << " records, "
                  << cells.size() << " cells, " << (ok ? "aggregates reproduce" : "MISMATCH") << '\n';
    }
    if (checked == 0) {
        throw InputError("no report.json under " + dir);
    }
    if (bad > 0) {
        throw AggregationError(std::to_string(bad) + " report(s) do not reproduce from their records");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"countlab: counting mechanisms in small transformers"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "generate counting datasets as JSON Lines (one file per count)");
    g->add_option("-c,--config", gen.config, "dataset config (JSON)");
    g->add_option("-o,--out", gen.out, "output directory");
    g->add_option("--seed", gen.seed, "seed override");
    g->add_flag("--png", gen.png, "also draw visual scenes as PNG (png/count_N_i.png)");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train a counting model");
    t->add_option("-c,--config", tr.config, "training config (JSON)")->required();
    t->add_option("-o,--out", tr.out, "run directory");
    t->add_option("--seed", tr.seed, "seed override");
    t->add_option("--steps", tr.steps, "step count override");
    t->add_option("-j,--workers", tr.workers, "worker threads");
    t->add_flag("-q,--quiet", tr.quiet, "no progress lines");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "behavioral accuracy tables for a checkpoint");
    e->add_option("--checkpoint", ev.checkpoint, "checkpoint (default: <out>/model.ckpt)");
    e->add_option("-c,--config", ev.config, "eval config (default: the one stored with the checkpoint)");
    e->add_option("-o,--out", ev.out, "run directory");
    e->add_option("-j,--workers", ev.workers, "worker threads");

    PatchArgs pa;
    auto* p = app.add_subcommand("patch", "apply an intervention to target samples");
    p->add_option("--checkpoint", pa.checkpoint, "checkpoint")->required();
    p->add_option("--target", pa.target, "target samples (JSON Lines)")->required();
    p->add_option("--source", pa.source, "source samples for interchange (JSON Lines)");
    p->add_option("--spec", pa.spec, "intervention spec (JSON)")->required();
    p->add_option("-o,--out", pa.out, "output directory");

    ScopeArgs sc;
    auto* s = app.add_subcommand("scope", "decode the latent count at one position");
    s->add_option("--checkpoint", sc.checkpoint, "checkpoint")->required();
    s->add_option("--source", sc.source, "source samples (JSON Lines)")->required();
    s->add_option("--position", sc.position, "source token position")->required();
    s->add_option("--sample", sc.sample, "line of the source file (0-based)");
    s->add_option("--cutoff", sc.cutoff, "patch layers 1..cutoff only");
    s->add_option("-c,--config", sc.config, "probe config (JSON)");
    s->add_option("-o,--out", sc.out, "write the decoding JSON here too");

    ExperimentArgs ex;
    auto* x = app.add_subcommand("experiment", "run registered experiments");
    x->require_subcommand(1);
    auto* xl = x->add_subcommand("list", "list registered experiments");
    auto* xr = x->add_subcommand("run", "run one experiment or 'all'");
    xr->add_option("name", ex.name, "experiment name or 'all'")->required();
    xr->add_option("-c,--config", ex.config, "experiment config (JSON)");
    xr->add_option("--checkpoint", ex.checkpoint, "text checkpoint");
    xr->add_option("--visual-checkpoint", ex.visual_checkpoint, "visual checkpoint");
    xr->add_option("-o,--out", ex.out, "output directory");
    xr->add_option("--k", ex.k, "single k for continued counting / max latent");
    xr->add_option("--samples", ex.samples, "samples per cell");
    xr->add_option("--seed", ex.seed, "seed override");
    xr->add_option("-j,--workers", ex.workers, "worker threads");

    std::string analyze_dir;
    auto* an = app.add_subcommand("analyze", "recompute report aggregates from raw records");
    an->add_option("dir", analyze_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (g->parsed()) {
            return cmd_gen(gen);
        }
        if (t->parsed()) {
            return cmd_train(tr);
        }
        if (e->parsed()) {
            return cmd_eval(ev);
        }
        if (p->parsed()) {
            return cmd_patch(pa);
        }
        if (s->parsed()) {
            return cmd_scope(sc);
        }
        if (xl->parsed()) {
            for (const auto& entry : experiment_registry()) {
                std::cout << entry.name << "  (" << entry.schema << ")\n";
            }
            return 0;
        }
        if (xr->parsed()) {
            return cmd_experiment(ex);
        }
        if (an->parsed()) {
            return cmd_analyze(analyze_dir);
        }
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return err.exit_code();
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 0;
}

// restitch: command-line front end for similarity-guided model stitching.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "restitch/restitch.hpp"

namespace fs = std::filesystem;
using namespace restitch;

namespace {

// ---------------------------------------------------------------------------
// JSON config files: top-level scalar keys apply to the active subcommand,
// an object keyed by the subcommand name overrides them. Keys may use '_'
// or '-'. Command-line flags always win.

class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(const CLI::App* root) : root_(root) {}

    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
        json j;
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
        std::string sub;
        for (const auto* s : root_->get_subcommands()) sub = s->get_name();
        std::vector<CLI::ConfigItem> items;
        auto add = [&](const json& obj) {
            for (const auto& [key, value] : obj.items()) {
                if (value.is_object()) continue;
                CLI::ConfigItem item;
                if (!sub.empty()) item.parents = {sub};
                item.name = key;
                std::replace(item.name.begin(), item.name.end(), '_', '-');
                auto text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
                if (value.is_array()) {
                    for (const auto& v : value) item.inputs.push_back(text(v));
                } else {
                    item.inputs.push_back(text(value));
                }
                items.push_back(std::move(item));
            }
        };
        if (!sub.empty() && j.contains(sub) && j[sub].is_object()) add(j[sub]);
        add(j);
        return items;
    }

private:
    const CLI::App* root_;
};

// ---------------------------------------------------------------------------
// Output directories are staged next to the destination and renamed into
// place only after the run manifest is written.

std::string path_digest(const fs::path& p) {
    if (fs::is_regular_file(p)) return file_digest(p);
    if (!fs::is_directory(p)) fail(ErrorKind::io, "input " + p.string() + " not found");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += fs::relative(f, p).generic_string() + ":" + file_digest(f) + "\n";
    return sha256_hex(acc);
}

std::uint64_t default_seed() {
    if (const char* env = std::getenv("RESTITCH_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            fail(ErrorKind::configuration, std::string("RESTITCH_SEED is not an unsigned integer: '") + env + "'");
        }
    }
    return 0;
}

class Run {
public:
    Run(std::string command, std::vector<std::string> argv, fs::path out)
        : command_(std::move(command)), argv_(std::move(argv)), out_(std::move(out)),
          start_(std::chrono::steady_clock::now()) {
        if (out_.empty()) fail(ErrorKind::configuration, "--out is required");
        out_ = fs::absolute(out_).lexically_normal();
        if (out_.filename().empty()) out_ = out_.parent_path();
        staging_ = out_.parent_path() / ("." + out_.filename().string() + ".partial-" + std::to_string(::getpid()));
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }

    Run(const Run&) = delete;
    Run& operator=(const Run&) = delete;

    ~Run() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(staging_, ec);
        }
    }

    const fs::path& dir() const { return staging_; }
    json& config() { return config_; }
    void seed(std::uint64_t s) { seed_ = s; }
    void input(const fs::path& p) { inputs_.push_back({p.string(), path_digest(p)}); }

    void commit() {
        json outputs = json::array();
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(staging_))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            outputs.push_back({{"path", fs::relative(f, staging_).generic_string()}, {"sha256", file_digest(f)}});
        json in = json::array();
        for (const auto& [p, d] : inputs_) in.push_back({{"path", p}, {"sha256", d}});
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        json m{{"format_version", 1},
               {"command", command_},
               {"argv", argv_},
               {"config", config_},
               {"config_digest", sha256_hex(config_.dump())},
               {"seed", seed_ ? json(*seed_) : json(nullptr)},
               {"inputs", std::move(in)},
               {"outputs", std::move(outputs)},
               {"output_dir", out_.string()},
               {"wall_clock_seconds", secs}};
        write_file_text(staging_ / "run_manifest.json", m.dump(2) + "\n");
        if (fs::exists(out_)) fs::remove_all(out_);
        fs::create_directories(out_.parent_path());
        fs::rename(staging_, out_);
        committed_ = true;
    }

private:
    std::string command_;
    std::vector<std::string> argv_;
    fs::path out_;
    fs::path staging_;
    json config_ = json::object();
    std::optional<std::uint64_t> seed_;
    std::vector<std::pair<std::string, std::string>> inputs_;
    std::chrono::steady_clock::time_point start_;
    bool committed_ = false;
};

// ---------------------------------------------------------------------------
// Input resolution

fs::path spec_file(const fs::path& p) { return fs::is_directory(p) ? p / "spec.json" : p; }

fs::path weights_dir(const fs::path& p) {
    if (fs::exists(p / "weights.json")) return p;
    if (fs::exists(p / "weights" / "weights.json")) return p / "weights";
    fail(ErrorKind::io, "no weights at " + p.string());
}

fs::path in_dir_or_file(const fs::path& p, const char* name) { return fs::is_directory(p) ? p / name : p; }

Shape parse_shape(std::string s) {
    std::replace(s.begin(), s.end(), 'x', ',');
    Shape out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t pos = 0;
            const long v = std::stol(tok, &pos);
            if (pos != tok.size() || v <= 0) throw std::invalid_argument(tok);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            fail(ErrorKind::configuration, "bad shape '" + s + "' (expected c,h,w)");
        }
    }
    if (out.size() != 3) fail(ErrorKind::configuration, "shape must have three extents (c,h,w), got '" + s + "'");
    return out;
}

const Dataset& pick_split(const DataSplit& d, const std::string& split) {
    if (split == "train") return d.train;
    if (split == "test") return d.test;
    fail(ErrorKind::configuration, "split must be train or test, got '" + split + "'");
}

Network load_network(const fs::path& spec, const fs::path& weights) {
    Network n{load_spec(spec_file(spec)), load_weights(weights_dir(weights))};
    check_weights(n.spec, n.weights);
    return n;
}

struct TrainFlags {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::optional<std::uint64_t> seed;
    std::string scope = "stitch-only";

    void add(CLI::App* app, bool with_scope) {
        app->add_option("--learning-rate,--lr", learning_rate, "SGD learning rate")->capture_default_str();
        app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
        app->add_option("--weight-decay", weight_decay, "decoupled weight decay")->capture_default_str();
        app->add_option("--epochs", epochs, "training epochs")->capture_default_str();
        app->add_option("--batch-size", batch_size, "mini-batch size")->capture_default_str();
        app->add_option("--seed", seed, "shuffle / init seed (default: RESTITCH_SEED or 0)");
        if (with_scope)
            app->add_option("--scope", scope, "stitch-only|stitch-back|stitch-front|full")->capture_default_str();
    }

    TrainConfig config() const {
        TrainConfig c;
        c.learning_rate = learning_rate;
        c.momentum = momentum;
        c.weight_decay = weight_decay;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.seed = seed.value_or(default_seed());
        c.scope = parse_scope(scope);
        c.validate();
        return c;
    }
};

json report_row(const std::string& front, const std::string& back, double acc, std::uint64_t params,
                std::uint64_t flops, std::uint64_t trainable) {
    return json{{"front_model", front}, {"back_model", back},  {"accuracy", acc},
                {"params", params},     {"flops", flops},      {"trainable_params", trainable}};
}

std::uint64_t stitched_flops(const StitchedModel& m) { return m.plan.accounting.flops_total; }

// ---------------------------------------------------------------------------
// Commands

struct GenDataOpts {
    std::optional<std::uint64_t> seed;
    std::size_t classes = 10;
    std::size_t per_class = 60;
    std::string shape = "3,8,8";
    double noise = 2.0;
    std::string out;
};

int cmd_gen_data(const GenDataOpts& o, const std::vector<std::string>& argv) {
    Run run("gen-data", argv, o.out);
    const std::uint64_t seed = o.seed.value_or(default_seed());
    const Shape shape = parse_shape(o.shape);
    run.seed(seed);
    run.config() = {{"seed", seed}, {"classes", o.classes}, {"per_class", o.per_class}, {"shape", shape}, {"noise", o.noise}};
    const auto data = gen_synthetic(seed, o.classes, o.per_class, shape, o.noise);
    save_dataset(data, run.dir(), o.noise);
    run.commit();
    std::cout << "dataset " << data.train.id << ": " << data.train.size() << " train, " << data.test.size()
              << " test -> " << o.out << "\n";
    return 0;
}

struct TrainBaseOpts {
    std::string spec, data, out, dtype = "f32";
    TrainFlags train{0.01, 0.9, 5e-4, 20, 32, std::nullopt, "full"};
};

int cmd_train_base(const TrainBaseOpts& o, const std::vector<std::string>& argv) {
    Run run("train-base", argv, o.out);
    const NetworkSpec spec = load_spec(spec_file(o.spec));
    const DataSplit data = load_dataset(o.data);
    run.input(spec_file(o.spec));
    run.input(o.data);
    TrainConfig cfg = o.train.config();
    run.seed(cfg.seed);
    run.config() = to_json(cfg);
    run.config()["dtype"] = o.dtype;
    auto trained = train_base(spec, data.train, cfg, parse_dtype(o.dtype));
    const double test_acc = data.test.size() ? evaluate(trained.network, data.test) : 0.0;
    save_spec(spec, run.dir() / "spec.json");
    save_weights(trained.network.weights, run.dir() / "weights");
    json metrics{{"model_id", spec.model_id()},
                 {"train", to_json(trained.result)},
                 {"train_accuracy", trained.result.final_train_accuracy},
                 {"test_accuracy", test_acc},
                 {"config", to_json(cfg)},
                 {"report", report_row(spec.model_id(), "-", test_acc, spec.total_params(),
                                       estimate_flops(spec, 0, spec.size()), spec.total_params())}};
    write_file_text(run.dir() / "metrics.json", metrics.dump(2) + "\n");
    run.commit();
    std::cout << std::fixed << std::setprecision(4) << spec.model_id() << ": train acc "
              << trained.result.final_train_accuracy << ", test acc " << test_acc << "\n";
    return 0;
}

struct CaptureOpts {
    std::string spec, weights, data, split = "train", out;
    std::size_t batch_size = 64, repeats = 5;
    std::optional<std::uint64_t> seed;
};

int cmd_capture(const CaptureOpts& o, const std::vector<std::string>& argv) {
    Run run("capture", argv, o.out);
    const Network net = load_network(o.spec, o.weights);
    const DataSplit data = load_dataset(o.data);
    run.input(spec_file(o.spec));
    run.input(weights_dir(o.weights));
    run.input(o.data);
    const std::uint64_t seed = o.seed.value_or(default_seed());
    run.seed(seed);
    run.config() = {{"batch_size", o.batch_size}, {"repeats", o.repeats}, {"split", o.split}, {"seed", seed}};
    const Dataset& d = pick_split(data, o.split);
    SeededBatchSource source(d.images, d.id + ":" + d.split, o.batch_size, seed);
    write_tape_set(capture_tapes(net, source, o.repeats), run.dir());
    run.commit();
    std::cout << "captured " << o.repeats << " repeat(s) of " << net.spec.size() << " units -> " << o.out << "\n";
    return 0;
}

struct CkaOpts {
    std::string front_tapes, back_tapes;
    std::string front_spec, front_weights, back_spec, back_weights, data, split = "train";
    std::size_t batch_size = 64, repeats = 5;
    std::optional<std::uint64_t> seed;
    bool gnuplot = false;
    std::string out;
};

std::string gnuplot_script(const SimilarityMatrix& m) {
    std::ostringstream os;
    os << "# gnuplot -p heatmap.gp\n"
       << "set datafile separator ','\n"
       << "set title 'linear CKA: " << m.front_model_id << " (rows) vs " << m.back_model_id << " (columns)'\n"
       << "set xlabel '" << m.back_model_id << " unit'\n"
       << "set ylabel '" << m.front_model_id << " unit'\n"
       << "set cbrange [0:1]\n"
       << "set palette defined (0 'white', 1 'dark-blue')\n"
       << "set yrange [] reverse\n"
       << "plot 'heatmap.csv' matrix rowheaders columnheaders with image notitle\n";
    return os.str();
}

int cmd_cka(const CkaOpts& o, const std::vector<std::string>& argv) {
    Run run("cka", argv, o.out);
    SimilarityMatrix m;
    const bool tapes = !o.front_tapes.empty() || !o.back_tapes.empty();
    if (tapes) {
        if (o.front_tapes.empty() || o.back_tapes.empty())
            fail(ErrorKind::configuration, "--front-tapes and --back-tapes go together");
        run.input(o.front_tapes);
        run.input(o.back_tapes);
        run.config() = {{"mode", "tapes"}};
        m = similarity_from_tapes(read_tape_set(o.front_tapes), read_tape_set(o.back_tapes));
    } else {
        if (o.front_spec.empty() || o.back_spec.empty() || o.front_weights.empty() || o.back_weights.empty() ||
            o.data.empty()) {
            fail(ErrorKind::configuration,
                 "give --front-tapes/--back-tapes, or --front-spec/--front-weights/--back-spec/--back-weights/--data");
        }
        const Network front = load_network(o.front_spec, o.front_weights);
        const Network back = load_network(o.back_spec, o.back_weights);
        const DataSplit data = load_dataset(o.data);
        for (const auto& p : {spec_file(o.front_spec), weights_dir(o.front_weights), spec_file(o.back_spec),
                              weights_dir(o.back_weights), fs::path(o.data)})
            run.input(p);
        const std::uint64_t seed = o.seed.value_or(default_seed());
        run.seed(seed);
        run.config() = {{"mode", "live"}, {"batch_size", o.batch_size}, {"repeats", o.repeats}, {"split", o.split},
                        {"seed", seed}};
        const Dataset& d = pick_split(data, o.split);
        SeededBatchSource source(d.images, d.id + ":" + d.split, o.batch_size, seed);
        m = build_similarity_matrix(front, back, source, o.repeats);
    }
    save_similarity(m, run.dir() / "similarity.json");
    heatmap_export(m, run.dir() / "heatmap.csv");
    if (o.gnuplot) write_file_text(run.dir() / "heatmap.gp", gnuplot_script(m));
    run.commit();
    std::cout << "similarity " << m.rows << "x" << m.cols << " (" << m.repeats << " repeat(s), batch " << m.batch_size
              << ") -> " << o.out << "\n";
    return 0;
}

/// Similarity matrix oriented as (front, back), transposing if it was
/// computed the other way round.
SimilarityMatrix oriented(const SimilarityMatrix& s, const NetworkSpec& front, const NetworkSpec& back) {
    if (s.front_model_id == front.model_id() && s.back_model_id == back.model_id()) return s;
    if (s.front_model_id == back.model_id() && s.back_model_id == front.model_id()) return s.transposed();
    fail(ErrorKind::pairing, "similarity matrix compares '" + s.front_model_id + "' and '" + s.back_model_id +
                                 "', specs are '" + front.model_id() + "' and '" + back.model_id() + "'");
}

struct PlanInputs {
    NetworkSpec front, back;
    SimilarityMatrix sim;
    Direction direction;
};

PlanInputs plan_inputs(const std::string& sim_path, const std::string& a_path, const std::string& b_path,
                       const std::string& direction) {
    const NetworkSpec a = load_spec(spec_file(a_path));
    const NetworkSpec b = load_spec(spec_file(b_path));
    const Direction dir = parse_direction(direction);
    const bool a_large = a.total_params() >= b.total_params();
    auto [front, back] = orient(a_large ? a : b, a_large ? b : a, dir);
    SimilarityMatrix s = oriented(load_similarity(in_dir_or_file(sim_path, "similarity.json")), front, back);
    return {std::move(front), std::move(back), std::move(s), dir};
}

struct PlanOpts {
    std::string similarity, front_spec, back_spec, metric = "params", direction = "slow-to-fast", out;
    std::uint64_t budget = 0;
};

int cmd_plan(const PlanOpts& o, const std::vector<std::string>& argv) {
    Run run("plan", argv, o.out);
    auto in = plan_inputs(o.similarity, o.front_spec, o.back_spec, o.direction);
    run.input(in_dir_or_file(o.similarity, "similarity.json"));
    run.input(spec_file(o.front_spec));
    run.input(spec_file(o.back_spec));
    const Budget budget = make_budget(parse_budget_metric(o.metric), o.budget);
    run.config() = {{"budget", to_json(budget)}, {"direction", to_string(in.direction)}};
    const StitchPlan plan = select_stitch_point(in.sim, budget, in.front, in.back, in.direction);
    save_plan(plan, run.dir() / "plan.json");
    run.commit();
    std::cout << std::fixed << std::setprecision(6) << to_string(plan.direction) << ": " << plan.front_model_id << "["
              << plan.front_unit << "] -> " << to_string(plan.adapter.kind) << " -> " << plan.back_model_id << "["
              << plan.back_unit << "], similarity " << plan.similarity << ", total params " << plan.accounting.total
              << "\n";
    return 0;
}

struct StitchOpts {
    std::string plan, front_weights, back_weights, init = "least-squares", calib_data, out;
    std::vector<std::string> calib_tapes;
    std::size_t calib_batch = 64;
    std::optional<std::uint64_t> seed;
};

std::optional<Calibration> tape_calibration(const StitchPlan& plan, const std::string& front_dir,
                                            const std::string& back_dir) {
    const auto ft = read_tape_set(front_dir);
    const auto bt = read_tape_set(back_dir);
    const ActivationTape& f = ft.front();
    const ActivationTape& b = bt.front();
    if (f.dataset_id != b.dataset_id || f.seed != b.seed || f.repeat_index != b.repeat_index)
        fail(ErrorKind::pairing, "calibration tapes were not captured on the same batch");
    if (f.model_id != plan.front_model_id || b.model_id != plan.back_model_id)
        fail(ErrorKind::pairing, "calibration tapes are for '" + f.model_id + "' / '" + b.model_id + "', plan needs '" +
                                     plan.front_model_id + "' / '" + plan.back_model_id + "'");
    if (plan.front_unit >= f.units.size() || plan.back_unit >= b.units.size())
        fail(ErrorKind::lookup, "calibration tapes lack the stitch units");
    return Calibration{f.units[plan.front_unit].activation, b.units[plan.back_unit].activation};
}

int cmd_stitch(const StitchOpts& o, const std::vector<std::string>& argv) {
    Run run("stitch", argv, o.out);
    StitchPlan plan = load_plan(in_dir_or_file(o.plan, "plan.json"));
    const Network front{plan.front_spec, load_weights(weights_dir(o.front_weights))};
    const Network back{plan.back_spec, load_weights(weights_dir(o.back_weights))};
    run.input(in_dir_or_file(o.plan, "plan.json"));
    run.input(weights_dir(o.front_weights));
    run.input(weights_dir(o.back_weights));
    const std::uint64_t seed = o.seed.value_or(default_seed());
    run.seed(seed);
    const AdapterInit mode = parse_adapter_init(o.init);
    std::optional<Calibration> calib;
    if (!o.calib_tapes.empty()) {
        if (o.calib_tapes.size() != 2) fail(ErrorKind::configuration, "--calib-tapes takes <front-dir> <back-dir>");
        run.input(o.calib_tapes[0]);
        run.input(o.calib_tapes[1]);
        calib = tape_calibration(plan, o.calib_tapes[0], o.calib_tapes[1]);
    } else if (!o.calib_data.empty()) {
        run.input(o.calib_data);
        const DataSplit data = load_dataset(o.calib_data);
        SeededBatchSource source(data.train.images, data.train.id + ":train", o.calib_batch, seed);
        calib = calibration_batch(plan, front, back, source.batch(0).images);
    }
    UnitWeights aw = init_adapter(plan.adapter, mode, calib, seed);
    const StitchedModel m = assemble(plan, front, back, aw);
    run.config() = {{"init", to_string(m.adapter.init)},
                    {"requested_init", o.init},
                    {"seed", seed},
                    {"calibration", calib ? (o.calib_tapes.empty() ? "data" : "tapes") : "none"}};
    save_stitched(m, run.dir());
    run.commit();
    std::cout << "stitched " << plan.front_model_id << "[0:" << plan.front_unit + 1 << ") + " << to_string(m.adapter.kind)
              << " (" << to_string(m.adapter.init) << ") + " << plan.back_model_id << "[" << plan.back_unit + 1
              << ":) = " << m.measured_params() << " params -> " << o.out << "\n";
    return 0;
}

struct FinetuneOpts {
    std::string model, data, out;
    TrainFlags train;
};

int cmd_finetune(const FinetuneOpts& o, const std::vector<std::string>& argv) {
    Run run("finetune", argv, o.out);
    StitchedModel m = load_stitched(o.model);
    const DataSplit data = load_dataset(o.data);
    run.input(o.model);
    run.input(o.data);
    const TrainConfig cfg = o.train.config();
    run.seed(cfg.seed);
    run.config() = to_json(cfg);
    const TrainResult r = finetune(m, data.train, cfg);
    const double test_acc = data.test.size() ? evaluate(m, data.test) : 0.0;
    save_stitched(m, run.dir() / "model");
    json metrics{{"front_model", m.plan.front_model_id},
                 {"back_model", m.plan.back_model_id},
                 {"direction", to_string(m.plan.direction)},
                 {"stitch_point", {m.plan.front_unit, m.plan.back_unit}},
                 {"similarity", m.plan.similarity},
                 {"scope", to_string(cfg.scope)},
                 {"train", to_json(r)},
                 {"train_accuracy", r.final_train_accuracy},
                 {"test_accuracy", test_acc},
                 {"config", to_json(cfg)},
                 {"report", report_row(m.plan.front_model_id, m.plan.back_model_id, test_acc, m.measured_params(),
                                       stitched_flops(m), m.trainable_params(cfg.scope))}};
    write_file_text(run.dir() / "metrics.json", metrics.dump(2) + "\n");
    run.commit();
    std::cout << std::fixed << std::setprecision(4) << "finetune (" << to_string(cfg.scope) << "): loss "
              << r.initial_loss << " -> " << r.final_loss << ", test acc " << test_acc << "\n";
    return 0;
}

struct EvalOpts {
    std::string model, data, split = "test", out;
};

int cmd_eval(const EvalOpts& o, const std::vector<std::string>& argv) {
    const DataSplit data = load_dataset(o.data);
    const Dataset& d = pick_split(data, o.split);
    EvalResult r;
    std::string kind;
    fs::path model = o.model;
    if (fs::exists(model / "model" / "model.json")) model = model / "model";
    if (fs::exists(model / "model.json")) {
        r = evaluate_full(load_stitched(model), d);
        kind = "stitched";
    } else if (fs::exists(model / "spec.json")) {
        r = evaluate_full(load_network(model, model), d);
        kind = "network";
    } else {
        fail(ErrorKind::io, "no model at " + o.model + " (expected model.json or spec.json)");
    }
    json j{{"model", o.model}, {"kind", kind}, {"split", o.split}, {"samples", d.size()}, {"accuracy", r.accuracy},
           {"loss", r.loss}};
    if (!o.out.empty()) {
        Run run("eval", argv, o.out);
        run.input(o.model);
        run.input(o.data);
        run.config() = {{"split", o.split}};
        write_file_text(run.dir() / "eval.json", j.dump(2) + "\n");
        run.commit();
    }
    std::cout << j.dump() << "\n";
    return 0;
}

struct SweepOpts {
    std::string similarity, front_spec, back_spec, metric = "params", direction = "slow-to-fast", out;
    std::vector<std::uint64_t> budgets;
    bool train_each = false;
    std::string front_weights, back_weights, data, init = "least-squares";
    std::size_t calib_batch = 64;
    TrainFlags train;
};

int cmd_sweep(const SweepOpts& o, const std::vector<std::string>& argv) {
    Run run("sweep", argv, o.out);
    auto in = plan_inputs(o.similarity, o.front_spec, o.back_spec, o.direction);
    run.input(in_dir_or_file(o.similarity, "similarity.json"));
    run.input(spec_file(o.front_spec));
    run.input(spec_file(o.back_spec));
    const BudgetMetric metric = parse_budget_metric(o.metric);
    std::vector<Budget> budgets;
    for (auto b : o.budgets) budgets.push_back({metric, b});
    if (budgets.empty()) fail(ErrorKind::configuration, "--budgets needs at least one value");
    auto rows = sweep_candidates(in.sim, budgets, in.front, in.back, in.direction);
    const auto cands = enumerate_candidates(in.sim, in.front, in.back);
    std::map<std::pair<std::size_t, std::size_t>, double> acc;

    json cfg{{"metric", o.metric}, {"direction", to_string(in.direction)}, {"budgets", o.budgets},
             {"train_each", o.train_each}};
    if (o.train_each) {
        if (o.front_weights.empty() || o.back_weights.empty() || o.data.empty())
            fail(ErrorKind::configuration, "--train-each needs --front-weights, --back-weights and --data");
        const Network front{in.front, load_weights(weights_dir(o.front_weights))};
        const Network back{in.back, load_weights(weights_dir(o.back_weights))};
        check_weights(front.spec, front.weights);
        check_weights(back.spec, back.weights);
        const DataSplit data = load_dataset(o.data);
        run.input(weights_dir(o.front_weights));
        run.input(weights_dir(o.back_weights));
        run.input(o.data);
        const TrainConfig tc = o.train.config();
        run.seed(tc.seed);
        cfg["train"] = to_json(tc);
        cfg["init"] = o.init;
        SeededBatchSource source(data.train.images, data.train.id + ":train", o.calib_batch, tc.seed);
        const Tensor calib_images = source.batch(0).images;
        const Budget open{metric, UINT64_MAX};
        for (const auto& c : cands) {
            StitchPlan plan = make_plan(c, in.front, in.back, open, in.direction);
            const auto calib = calibration_batch(plan, front, back, calib_images);
            UnitWeights aw = init_adapter(plan.adapter, parse_adapter_init(o.init), calib, tc.seed);
            StitchedModel m = assemble(plan, front, back, aw);
            finetune(m, data.train, tc);
            acc[{c.i, c.j}] = evaluate(m, data.test);
            std::cerr << "candidate (" << c.i << "," << c.j << ") similarity " << c.similarity << " accuracy "
                      << acc[{c.i, c.j}] << "\n";
        }
        for (auto& r : rows)
            if (r.plan) r.accuracy = acc.at({r.plan->front_unit, r.plan->back_unit});
    }
    run.config() = cfg;

    std::string table = sweep_csv_header();
    for (const auto& r : rows) table += sweep_csv_row(r);
    write_file_text(run.dir() / "tradeoff.csv", table);

    std::ostringstream fig;
    fig << "i,j,front_unit,back_unit,similarity,total_params,accuracy\n" << std::fixed << std::setprecision(6);
    std::vector<double> sims, accs;
    for (const auto& c : cands) {
        fig << c.i << ',' << c.j << ',' << detail::csv_field(in.front.unit(c.i).name()) << ','
            << detail::csv_field(in.back.unit(c.j).name()) << ',' << c.similarity << ',' << c.accounting.total << ',';
        if (auto it = acc.find({c.i, c.j}); it != acc.end()) {
            fig << it->second;
            sims.push_back(c.similarity);
            accs.push_back(it->second);
        }
        fig << '\n';
    }
    write_file_text(run.dir() / "similarity_vs_accuracy.csv", fig.str());
    json summary{{"candidates", cands.size()}, {"budgets", o.budgets.size()}};
    if (sims.size() >= 2) summary["spearman_similarity_accuracy"] = spearman(sims, accs);
    write_file_text(run.dir() / "summary.json", summary.dump(2) + "\n");
    run.commit();
    std::cout << "sweep: " << rows.size() << " budget(s), " << cands.size() << " candidate(s)";
    if (summary.contains("spearman_similarity_accuracy"))
        std::cout << ", spearman " << summary["spearman_similarity_accuracy"].get<double>();
    std::cout << " -> " << o.out << "\n";
    return 0;
}

struct ReportOpts {
    std::vector<std::string> runs;
    std::string out;
};

std::string millions(std::uint64_t n) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << static_cast<double>(n) / 1e6 << "M";
    return os.str();
}

int cmd_report(const ReportOpts& o, const std::vector<std::string>& argv) {
    Run run("report", argv, o.out);
    std::ostringstream md;
    md << "| Front Model | Behind Model | Acc | Params | FLOPs | Trainable Params |\n"
       << "|---|---|---|---|---|---|\n";
    for (const auto& r : o.runs) {
        const fs::path metrics = in_dir_or_file(r, "metrics.json");
        run.input(metrics);
        json j;
        try {
            j = json::parse(read_file_text(metrics));
        } catch (const json::parse_error& e) {
            fail(ErrorKind::format, metrics.string() + ": " + e.what());
        }
        if (!j.contains("report")) fail(ErrorKind::format, metrics.string() + " has no report row");
        const json& row = j["report"];
        try {
            md << "| " << row.at("front_model").get<std::string>() << " | " << row.at("back_model").get<std::string>()
               << " | " << std::fixed << std::setprecision(2) << 100.0 * row.at("accuracy").get<double>() << " | "
               << millions(row.at("params").get<std::uint64_t>()) << " | "
               << millions(row.at("flops").get<std::uint64_t>()) << " | "
               << millions(row.at("trainable_params").get<std::uint64_t>()) << " |\n";
        } catch (const json::exception& e) {
            fail(ErrorKind::format, metrics.string() + ": " + e.what());
        }
    }
    run.config() = {{"runs", o.runs}};
    write_file_text(run.dir() / "report.md", md.str());
    run.commit();
    std::cout << md.str();
    return 0;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out += c;
    }
    return out;
}

void print_error(std::string_view kind, const std::string& message, const std::string& extra = "") {
    std::cerr << "error: kind=" << kind << extra << " message=\"" << escape(message) << "\"\n";
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"restitch: CKA-guided stitching of two trained networks under a resource budget"};
    app.require_subcommand(1);
    app.fallthrough();
    app.allow_config_extras(CLI::config_extras_mode::ignore);
    app.config_formatter(std::make_shared<JsonConfig>(&app));
    app.set_config("--config", "", "JSON configuration file (flags win on conflict)");

    GenDataOpts gen;
    auto* g = app.add_subcommand("gen-data", "generate a seeded synthetic image dataset");
    g->add_option("--seed", gen.seed, "generation seed (default: RESTITCH_SEED or 0)");
    g->add_option("--classes", gen.classes, "number of classes")->capture_default_str();
    g->add_option("--per-class", gen.per_class, "samples per class")->capture_default_str();
    g->add_option("--shape", gen.shape, "image shape c,h,w")->capture_default_str();
    g->add_option("--noise", gen.noise, "per-sample noise standard deviation")->capture_default_str();
    g->add_option("--out", gen.out, "output directory")->required();

    TrainBaseOpts tb;
    auto* t = app.add_subcommand("train-base", "train a base network from scratch");
    t->add_option("--spec", tb.spec, "network spec JSON")->required();
    t->add_option("--data", tb.data, "dataset directory")->required();
    t->add_option("--dtype", tb.dtype, "parameter dtype f32|f64")->capture_default_str();
    t->add_option("--out", tb.out, "output directory")->required();
    tb.train.add(t, false);

    CaptureOpts cap;
    auto* c = app.add_subcommand("capture", "record per-unit activation tapes");
    c->add_option("--spec", cap.spec, "network spec JSON (or train-base directory)")->required();
    c->add_option("--weights", cap.weights, "weights directory (or train-base directory)")->required();
    c->add_option("--data", cap.data, "dataset directory")->required();
    c->add_option("--split", cap.split, "train|test")->capture_default_str();
    c->add_option("--batch-size", cap.batch_size, "samples per batch")->capture_default_str();
    c->add_option("--repeats", cap.repeats, "number of disjoint batches")->capture_default_str();
    c->add_option("--seed", cap.seed, "batch seed (default: RESTITCH_SEED or 0)");
    c->add_option("--out", cap.out, "output tape-set directory")->required();

    CkaOpts ck;
    auto* k = app.add_subcommand("cka", "layer-pair CKA similarity matrix and heatmap");
    k->add_option("--front-tapes", ck.front_tapes, "front model tape set");
    k->add_option("--back-tapes", ck.back_tapes, "back model tape set");
    k->add_option("--front-spec", ck.front_spec, "front spec (live mode)");
    k->add_option("--front-weights", ck.front_weights, "front weights (live mode)");
    k->add_option("--back-spec", ck.back_spec, "back spec (live mode)");
    k->add_option("--back-weights", ck.back_weights, "back weights (live mode)");
    k->add_option("--data", ck.data, "dataset directory (live mode)");
    k->add_option("--split", ck.split, "train|test (live mode)")->capture_default_str();
    k->add_option("--batch-size", ck.batch_size, "samples per batch (live mode)")->capture_default_str();
    k->add_option("--repeats", ck.repeats, "batches to average (live mode)")->capture_default_str();
    k->add_option("--seed", ck.seed, "batch seed (live mode)");
    k->add_flag("--gnuplot", ck.gnuplot, "also write heatmap.gp");
    k->add_option("--out", ck.out, "output directory")->required();

    PlanOpts pl;
    auto* p = app.add_subcommand("plan", "select the stitch point under a budget");
    p->add_option("--similarity", pl.similarity, "similarity.json (or cka output directory)")->required();
    p->add_option("--front-spec", pl.front_spec, "spec of one model")->required();
    p->add_option("--back-spec", pl.back_spec, "spec of the other model")->required();
    p->add_option("--budget", pl.budget, "budget limit (positive integer)")->required();
    p->add_option("--metric", pl.metric, "params|flops|trainable")->capture_default_str();
    p->add_option("--direction", pl.direction, "slow-to-fast|fast-to-slow")->capture_default_str();
    p->add_option("--out", pl.out, "output directory")->required();

    StitchOpts st;
    auto* s = app.add_subcommand("stitch", "assemble the stitched model for a plan");
    s->add_option("--plan", st.plan, "plan.json (or plan output directory)")->required();
    s->add_option("--front-weights", st.front_weights, "front parent weights")->required();
    s->add_option("--back-weights", st.back_weights, "back parent weights")->required();
    s->add_option("--init", st.init, "least-squares|random|identity")->capture_default_str();
    s->add_option("--calib-tapes", st.calib_tapes, "<front-tapes> <back-tapes> for least-squares init")
        ->expected(2);
    s->add_option("--calib-data", st.calib_data, "dataset for least-squares calibration");
    s->add_option("--calib-batch", st.calib_batch, "calibration batch size (with --calib-data)")->capture_default_str();
    s->add_option("--seed", st.seed, "init seed (default: RESTITCH_SEED or 0)");
    s->add_option("--out", st.out, "output model directory")->required();

    FinetuneOpts ft;
    auto* f = app.add_subcommand("finetune", "fine-tune a stitched model");
    f->add_option("--model", ft.model, "stitched model directory")->required();
    f->add_option("--data", ft.data, "dataset directory")->required();
    f->add_option("--out", ft.out, "output directory")->required();
    ft.train.add(f, true);

    EvalOpts ev;
    auto* e = app.add_subcommand("eval", "accuracy of a stitched or base model");
    e->add_option("--model", ev.model, "stitched model or train-base directory")->required();
    e->add_option("--data", ev.data, "dataset directory")->required();
    e->add_option("--split", ev.split, "train|test")->capture_default_str();
    e->add_option("--out", ev.out, "optional output directory");

    SweepOpts sw;
    auto* w = app.add_subcommand("sweep", "plans across budgets and similarity-vs-accuracy study");
    w->add_option("--similarity", sw.similarity, "similarity.json (or cka output directory)")->required();
    w->add_option("--front-spec", sw.front_spec, "spec of one model")->required();
    w->add_option("--back-spec", sw.back_spec, "spec of the other model")->required();
    w->add_option("--budgets", sw.budgets, "budget limits")->required()->delimiter(',');
    w->add_option("--metric", sw.metric, "params|flops|trainable")->capture_default_str();
    w->add_option("--direction", sw.direction, "slow-to-fast|fast-to-slow")->capture_default_str();
    w->add_flag("--train-each", sw.train_each, "fine-tune and evaluate every candidate");
    w->add_option("--front-weights", sw.front_weights, "front parent weights (with --train-each)");
    w->add_option("--back-weights", sw.back_weights, "back parent weights (with --train-each)");
    w->add_option("--data", sw.data, "dataset (with --train-each)");
    w->add_option("--init", sw.init, "adapter init (with --train-each)")->capture_default_str();
    w->add_option("--out", sw.out, "output directory")->required();
    sw.train.add(w, false);

    ReportOpts rp;
    auto* r = app.add_subcommand("report", "markdown trade-off table from run directories");
    r->add_option("--runs", rp.runs, "train-base or finetune output directories")->required();
    r->add_option("--out", rp.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        print_error("configuration", err.what());
        return 2;
    }

    try {
        if (g->parsed()) return cmd_gen_data(gen, args);
        if (t->parsed()) return cmd_train_base(tb, args);
        if (c->parsed()) return cmd_capture(cap, args);
        if (k->parsed()) return cmd_cka(ck, args);
        if (p->parsed()) return cmd_plan(pl, args);
        if (s->parsed()) return cmd_stitch(st, args);
        if (f->parsed()) return cmd_finetune(ft, args);
        if (e->parsed()) return cmd_eval(ev, args);
        if (w->parsed()) return cmd_sweep(sw, args);
        if (r->parsed()) return cmd_report(rp, args);
    } catch (const NoFeasibleStitch& err) {
        print_error(to_string(err.kind()), err.what(), " min_cost=" + std::to_string(err.min_cost()));
        return exit_code(err.kind());
    } catch (const Error& err) {
        print_error(to_string(err.kind()), err.what());
        return exit_code(err.kind());
    } catch (const fs::filesystem_error& err) {
        print_error("io", err.what());
        return exit_code(ErrorKind::io);
    } catch (const std::exception& err) {
        print_error("contract", err.what());
        return 2;
    }
    return 2;
}

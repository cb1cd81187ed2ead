// Command-line front end: `run` trains and evaluates one method on a task
// stream, `ablate` compares the whole method set on one stream, `boundary`
// exports 2-D decision grids, and `transport-demo` prints a transport plan
// with its mixing weights. Exit codes: 0 success, 2 invalid configuration,
// 1 runtime failure.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "otcil/otcil.hpp"

namespace {

using namespace otcil;

struct CliOptions {
    std::string dataset = "synthetic";
    std::size_t classes = 8;
    std::size_t dims = 16;
    std::size_t per_class = 250;
    double relatedness = 0.7;
    double noise_sigma = 0.35;
    double center_spread = 3.0;
    bool csv_standardize = true;

    std::size_t tasks = 4;
    std::size_t base_classes = 0;
    double test_fraction = 0.2;
    std::string memory = "per-class:10";

    std::vector<std::size_t> hidden_dims = {32};
    std::size_t embed_dim = 8;
    double logit_scale = 4.0;

    std::string method = "coil";
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double lr = 0.03;
    double lr_decay_factor = 0.1;
    std::vector<std::size_t> lr_decay_epochs;
    bool explicit_decay = false;
    double momentum = 0.8;
    double weight_decay = 0.0;
    std::string rt_refresh = "per-batch";

    double tau = 2.0;
    std::size_t pt_epochs = 5;
    double gamma_exponent = 2.0;

    double ot_epsilon = 0.45;
    std::size_t ot_max_iterations = 1000;
    double ot_tolerance = 1e-6;

    std::uint64_t seed = 1993;
    std::string out = "otcil-out";

    // subcommand extras
    std::size_t resolution = 256;
    double bound = 1.5;
    std::size_t demo_stage = 2;
};

void add_common_options(CLI::App& app, CliOptions& opt) {
    app.add_option("--dataset", opt.dataset, "synthetic or csv:<path>")->capture_default_str();
    app.add_option("--classes", opt.classes, "synthetic: number of classes")->capture_default_str();
    app.add_option("--dims", opt.dims, "synthetic: feature dimension")->capture_default_str();
    app.add_option("--per-class", opt.per_class, "synthetic: instances per class")->capture_default_str();
    app.add_option("--relatedness", opt.relatedness, "synthetic: cross-task class relatedness in [0,1]")
        ->capture_default_str();
    app.add_option("--noise-sigma", opt.noise_sigma, "synthetic: per-dimension noise")->capture_default_str();
    app.add_option("--center-spread", opt.center_spread, "synthetic: class center spread")->capture_default_str();
    app.add_flag("--csv-standardize,!--no-csv-standardize", opt.csv_standardize,
                 "standardize CSV features with task-1 train statistics");

    app.add_option("--tasks", opt.tasks, "number of incremental tasks")->capture_default_str();
    app.add_option("--base-classes", opt.base_classes, "classes in task 1 (0 = even split)")
        ->capture_default_str();
    app.add_option("--test-fraction", opt.test_fraction, "per-class test split fraction")->capture_default_str();
    app.add_option("--memory", opt.memory, "exemplar budget, total:K or per-class:m")->capture_default_str();

    app.add_option("--hidden-dims", opt.hidden_dims, "hidden layer widths")->delimiter(',')->capture_default_str();
    app.add_option("--embed-dim", opt.embed_dim, "embedding dimension")->capture_default_str();
    app.add_option("--logit-scale", opt.logit_scale, "cosine logit scale")->capture_default_str();

    app.add_option("--method", opt.method, "finetune|replay_kd|coil|pt_only|rt_only")->capture_default_str();
    app.add_option("--epochs", opt.epochs, "epochs per task")->capture_default_str();
    app.add_option("--batch-size", opt.batch_size, "SGD batch size")->capture_default_str();
    app.add_option("--lr", opt.lr, "initial learning rate")->capture_default_str();
    app.add_option("--lr-decay-factor", opt.lr_decay_factor, "multiplicative lr decay")->capture_default_str();
    app.add_option("--lr-decay-epochs", opt.lr_decay_epochs, "epochs at which lr decays (default: T/2, 3T/4)")
        ->delimiter(',');
    app.add_option("--momentum", opt.momentum, "SGD momentum")->capture_default_str();
    app.add_option("--weight-decay", opt.weight_decay, "SGD weight decay")->capture_default_str();
    app.add_option("--rt-refresh", opt.rt_refresh, "per-batch or per-epoch")->capture_default_str();

    app.add_option("--tau", opt.tau, "distillation temperature")->capture_default_str();
    app.add_option("--pt-epochs", opt.pt_epochs, "epochs the PT loss stays active")->capture_default_str();
    app.add_option("--gamma-exponent", opt.gamma_exponent, "RT ramp exponent")->capture_default_str();

    app.add_option("--ot-epsilon", opt.ot_epsilon, "entropic regularisation")->capture_default_str();
    app.add_option("--ot-max-iterations", opt.ot_max_iterations, "Sinkhorn iteration cap")->capture_default_str();
    app.add_option("--ot-tolerance", opt.ot_tolerance, "Sinkhorn marginal tolerance")->capture_default_str();

    app.add_option("--seed", opt.seed, "master seed")->capture_default_str();
    app.add_option("--out", opt.out, "output directory")->capture_default_str();
    app.add_option("--config", "config file with key=value lines; command-line flags override it");
}

// Expands `--config <file>` by splicing the file's key=value pairs in as
// --key=value arguments right after the subcommand, skipping keys the
// command line already provides.
std::vector<std::string> apply_config_file(std::vector<std::string> args) {
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size())
            config_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0)
            config_path = args[i].substr(9);
    }
    if (config_path.empty()) return args;

    std::ifstream file(config_path);
    if (!file) throw std::invalid_argument("cannot open config file " + config_path);

    auto trim = [](std::string s) {
        const auto first = s.find_first_not_of(" \t\r");
        const auto last = s.find_last_not_of(" \t\r");
        return first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
    };

    std::vector<std::string> given;
    for (const std::string& arg : args)
        if (arg.rfind("--", 0) == 0) given.push_back(arg.substr(0, arg.find('=')));

    std::vector<std::string> injected;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(file, line)) {
        ++line_number;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
        const auto equals = line.find('=');
        if (equals == std::string::npos)
            throw std::invalid_argument("config file line " + std::to_string(line_number) +
                                        " is not key=value: " + line);
        const std::string key = "--" + trim(line.substr(0, equals));
        const std::string value = trim(line.substr(equals + 1));
        if (std::find(given.begin(), given.end(), key) == given.end()) injected.push_back(key + "=" + value);
    }

    // splice after the subcommand token
    auto insert_at = args.begin();
    for (auto it = args.begin(); it != args.end(); ++it) {
        if (it->rfind("-", 0) != 0) {
            insert_at = it + 1;
            break;
        }
    }
    args.insert(insert_at, injected.begin(), injected.end());
    return args;
}

ExperimentConfig to_experiment_config(const CliOptions& opt) {
    ExperimentConfig cfg;
    cfg.dataset = opt.dataset;
    cfg.synthetic.num_classes = opt.classes;
    cfg.synthetic.dims = opt.dims;
    cfg.synthetic.per_class = opt.per_class;
    cfg.synthetic.relatedness = opt.relatedness;
    cfg.synthetic.noise_sigma = opt.noise_sigma;
    cfg.synthetic.center_spread = opt.center_spread;
    cfg.csv_standardize = opt.csv_standardize;
    cfg.tasks = opt.tasks;
    cfg.base_classes = opt.base_classes;
    cfg.test_fraction = opt.test_fraction;

    const auto colon = opt.memory.find(':');
    if (colon == std::string::npos)
        throw std::invalid_argument("--memory must look like total:K or per-class:m");
    const std::string kind = opt.memory.substr(0, colon);
    const long amount = std::stol(opt.memory.substr(colon + 1));
    if (amount < 1) throw std::invalid_argument("--memory budget must be positive");
    if (kind == "total")
        cfg.memory = BudgetPolicy{BudgetKind::fixed_total, static_cast<std::size_t>(amount)};
    else if (kind == "per-class")
        cfg.memory = BudgetPolicy{BudgetKind::fixed_per_class, static_cast<std::size_t>(amount)};
    else
        throw std::invalid_argument("--memory kind must be 'total' or 'per-class'");

    cfg.hidden_dims = opt.hidden_dims;
    cfg.embed_dim = opt.embed_dim;
    cfg.logit_scale = opt.logit_scale;
    cfg.method = method_from_string(opt.method);

    cfg.train.epochs = opt.epochs;
    cfg.train.batch_size = opt.batch_size;
    cfg.train.lr.initial = opt.lr;
    cfg.train.lr.decay_factor = opt.lr_decay_factor;
    cfg.train.lr.decay_epochs = opt.explicit_decay ? opt.lr_decay_epochs : default_decay_epochs(opt.epochs);
    cfg.train.momentum = opt.momentum;
    cfg.train.weight_decay = opt.weight_decay;
    if (opt.rt_refresh == "per-batch")
        cfg.train.rt_refresh = RtRefresh::per_batch;
    else if (opt.rt_refresh == "per-epoch")
        cfg.train.rt_refresh = RtRefresh::per_epoch;
    else
        throw std::invalid_argument("--rt-refresh must be per-batch or per-epoch");

    cfg.loss.tau = opt.tau;
    cfg.loss.pt_epochs = opt.pt_epochs;
    cfg.loss.gamma_exponent = opt.gamma_exponent;
    cfg.ot.epsilon = opt.ot_epsilon;
    cfg.ot.max_iterations = opt.ot_max_iterations;
    cfg.ot.tolerance = opt.ot_tolerance;
    cfg.seed = opt.seed;

    cfg.train.validate();
    cfg.loss.validate();
    cfg.ot.validate();
    return cfg;
}


// dataset and stream problems discovered before any artifact is written are
// configuration errors (exit 2)
TaskStream build_stream_checked(const ExperimentConfig& cfg) {
    try {
        return build_configured_stream(cfg);
    } catch (const std::exception& e) {
        throw std::invalid_argument(e.what());
    }
}

void print_stage_table(const RunReport& report) {
    std::printf("%-6s %-14s per-task accuracy\n", "stage", "seen-accuracy");
    for (std::size_t s = 0; s < report.seen_accuracy.size(); ++s) {
        std::printf("%-6zu %-14.4f", s + 1, report.seen_accuracy[s]);
        for (double acc : report.accuracy_matrix[s]) std::printf(" %.4f", acc);
        std::printf("\n");
    }
    std::printf("average incremental accuracy: %.4f\n", report.average_incremental_accuracy);
}

int run_command(const CliOptions& opt) {
    const ExperimentConfig cfg = to_experiment_config(opt);
    const TaskStream stream = build_stream_checked(cfg);  // validates the dataset before any artifact
    std::filesystem::create_directories(opt.out);

    StageState final_state;
    const RunReport report = run_experiment(cfg, &stream, &final_state);
    write_report(report, opt.out + "/report.json");
    write_accuracy_curves(report, opt.out + "/curves.csv");
    save_checkpoint(opt.out + "/checkpoint.bin", final_state.model, &final_state.store);

    std::printf("method %s on %zu tasks (%zu classes)\n", report.method.c_str(), stream.tasks.size(),
                stream.total_classes());
    print_stage_table(report);
    std::printf("report: %s/report.json\n", opt.out.c_str());
    return 0;
}

int ablate_command(const CliOptions& opt) {
    CliOptions base = opt;
    const ExperimentConfig probe_cfg = to_experiment_config(base);  // validate once up front
    const TaskStream stream = build_stream_checked(probe_cfg);
    std::filesystem::create_directories(opt.out);

    std::vector<std::pair<std::string, RunReport>> rows;
    for (const char* name : {"finetune", "replay_kd", "pt_only", "rt_only", "coil"}) {
        CliOptions variant = opt;
        variant.method = name;
        const ExperimentConfig cfg = to_experiment_config(variant);
        RunReport report = run_experiment(cfg, &stream);
        write_report(report, opt.out + "/" + name + "_report.json");
        rows.emplace_back(name, std::move(report));
    }

    std::ofstream csv(opt.out + "/ablation.csv");
    csv << "method,average_incremental_accuracy,final_seen_accuracy\n";
    std::printf("%-12s %-10s %s\n", "method", "avg-acc", "final seen");
    for (const auto& [name, report] : rows) {
        csv << name << "," << report.average_incremental_accuracy << "," << report.seen_accuracy.back() << "\n";
        std::printf("%-12s %-10.4f %.4f\n", name.c_str(), report.average_incremental_accuracy,
                    report.seen_accuracy.back());
    }
    std::printf("per-method reports and ablation.csv written to %s\n", opt.out.c_str());
    return 0;
}

int boundary_command(const CliOptions& opt) {
    if (opt.embed_dim != 2)
        throw std::invalid_argument("boundary export requires --embed-dim 2");
    const ExperimentConfig cfg = to_experiment_config(opt);
    const TaskStream stream = build_stream_checked(cfg);
    std::filesystem::create_directories(opt.out);

    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;
    StageState state;
    state.model = make_configured_model(cfg, stream.tasks[0].train[0].features.size());
    state.store = ExemplarStore(cfg.memory);

    for (std::size_t b = 0; b < stream.tasks.size(); ++b) {
        if (b >= 1 && (cfg.method == Method::coil || cfg.method == Method::pt_only)) {
            // boundary right after transported augmentation, before training
            Model preview = state.model;
            const TransportResult transported = pt_initialize(preview, state.store, stream.tasks[b], cfg.ot);
            append_classifier_columns(preview, transported.weights);
            export_boundary_grid(preview, -opt.bound, opt.bound, -opt.bound, opt.bound, opt.resolution,
                                 opt.out + "/boundary_stage" + std::to_string(b + 1) + "_init.csv");
        }
        run_task(state, stream.tasks[b], cfg.method, train_cfg, cfg.loss, cfg.ot);
        export_boundary_grid(state.model, -opt.bound, opt.bound, -opt.bound, opt.bound, opt.resolution,
                             opt.out + "/boundary_stage" + std::to_string(b + 1) + ".csv");
        const StageEvaluation eval = evaluate_stage(state.model, stream, b + 1);
        std::printf("stage %zu: seen accuracy %.4f, grid written\n", b + 1, eval.seen_accuracy);
    }
    std::printf("grids written to %s\n", opt.out.c_str());
    return 0;
}

int transport_demo_command(const CliOptions& opt) {
    const ExperimentConfig cfg = to_experiment_config(opt);
    const TaskStream stream = build_stream_checked(cfg);
    if (opt.demo_stage < 2 || opt.demo_stage > stream.tasks.size())
        throw std::invalid_argument("--stage must lie in [2, tasks]");

    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;
    StageState state;
    state.model = make_configured_model(cfg, stream.tasks[0].train[0].features.size());
    state.store = ExemplarStore(cfg.memory);
    for (std::size_t b = 0; b + 1 < opt.demo_stage; ++b)
        run_task(state, stream.tasks[b], cfg.method, train_cfg, cfg.loss, cfg.ot);

    const Task& task = stream.tasks[opt.demo_stage - 1];
    const TransportResult result = pt_initialize(state.model, state.store, task, cfg.ot);

    std::printf("prospective transport into stage %zu (%zu old classes -> %zu new classes)\n", opt.demo_stage,
                state.model.num_classes(), task.label_set.size());
    std::printf("plan converged: %s after %zu iterations\n", result.plan.converged ? "yes" : "no",
                result.plan.iterations_used);
    std::printf("\ntransport plan (rows = old classes, columns = new classes):\n");
    for (std::size_t i = 0; i < result.plan.coupling.rows(); ++i) {
        std::printf("  old %-3zu", i);
        for (std::size_t j = 0; j < result.plan.coupling.cols(); ++j)
            std::printf(" %8.5f", result.plan.coupling(i, j));
        std::printf("\n");
    }
    std::printf("\nmixing weights (each column sums to 1; new classifier = old columns x mixing):\n");
    for (std::size_t i = 0; i < result.mixing.rows(); ++i) {
        std::printf("  old %-3zu", i);
        for (std::size_t j = 0; j < result.mixing.cols(); ++j) std::printf(" %8.5f", result.mixing(i, j));
        std::printf("\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"entropic-transport classifier synthesis for class-incremental training"};
    app.require_subcommand(1);

    CliOptions opt;
    CLI::App* run = app.add_subcommand("run", "train and evaluate one method on a task stream");
    CLI::App* ablate = app.add_subcommand("ablate", "compare all methods on one stream");
    CLI::App* boundary = app.add_subcommand("boundary", "train with 2-D embeddings and export decision grids");
    CLI::App* demo = app.add_subcommand("transport-demo", "print a transport plan and mixing weights");
    for (CLI::App* sub : {run, ablate, boundary, demo}) add_common_options(*sub, opt);
    boundary->add_option("--resolution", opt.resolution, "grid resolution per axis")->capture_default_str();
    boundary->add_option("--bound", opt.bound, "grid half width")->capture_default_str();
    demo->add_option("--stage", opt.demo_stage, "stage receiving the transported classifier (>= 2)")
        ->capture_default_str();

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = apply_config_file(std::move(args));
        std::reverse(args.begin(), args.end());  // CLI11's vector parse expects reversed order
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // help exits 0, every parse problem is a config error
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    }

    for (CLI::App* sub : {run, ablate, boundary, demo})
        if (sub->parsed() && sub->count("--lr-decay-epochs") > 0) opt.explicit_decay = true;

    try {
        if (run->parsed()) return run_command(opt);
        if (ablate->parsed()) return ablate_command(opt);
        if (boundary->parsed()) return boundary_command(opt);
        if (demo->parsed()) return transport_demo_command(opt);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

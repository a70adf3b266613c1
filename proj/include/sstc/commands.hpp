#pragma once

// Implementations behind the `sstc` command-line tool. Each command returns a process
// exit code: 0 success, 1 check failure, 2 input contract violation, 3 IO, 4 divergence.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sstc/bench.hpp"
#include "sstc/io.hpp"
#include "sstc/pipeline.hpp"
#include "sstc/train.hpp"

namespace sstc::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kInputError = 2, kIoError = 3, kDiverged = 4 };

inline int exit_code_for(const FormatError& e) { return e.kind() == FormatError::Kind::io ? kIoError : kInputError; }

// ---------------------------------------------------------------------------

struct CompressArgs {
    std::string input;
    std::string config;
    std::optional<std::string> weights;
    std::uint64_t seed = 0;
    std::string output;
    bool per_frame = false;
    bool cap_frames = false;  // apply dense frame sampling down to m_max first
};

inline int cmd_compress(const CompressArgs& a, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    try {
        const MambaMiaConfig cfg = load_config(a.config);
        Tensor<float> frames = as_tensor<float>(read_tensor(a.input));
        if (frames.rank() != 3 || frames.dim(1) != cfg.n_patches || frames.dim(2) != cfg.d) {
            err << "error: input " << shape_string(frames.shape()) << " does not match config [M x " << cfg.n_patches
                << " x " << cfg.d << "]\n";
            return kInputError;
        }
        if (a.cap_frames) frames = dense_frame_sample(frames, cfg.m_max);
        const MambaMiaModel<float> model = a.weights ? model_from_named<float>(read_weights_archive(*a.weights), cfg)
                                                     : init_mambamia<float>(cfg, a.seed);
        const auto mode = a.per_frame ? CompressionMode::per_frame : CompressionMode::joint;
        const Tensor<float> tokens = compress_and_sample(frames, model, mode);
        const std::size_t t_out = tokens.size() / cfg.d;
        const std::size_t budget =
            token_budget(frames.dim(0), cfg.n_patches, cfg.k, a.per_frame ? Rational(1, 1) : cfg.s);
        write_tensor(a.output, tokens.reshaped({t_out, cfg.d}));
        out << "frames=" << frames.dim(0) << " token_budget=" << budget << " tokens_out=" << t_out << '\n';
        if (budget != t_out) {
            err << "error: output token count " << t_out << " differs from budget " << budget << '\n';
            return kCheckFailed;
        }
        return kOk;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
}

// ---------------------------------------------------------------------------

struct BenchArgs {
    std::vector<std::string> methods{"mambamia", "mamba_per_frame", "attention", "avg_pool", "none"};
    std::vector<std::size_t> frames{16, 32, 64, 128, 256};
    std::optional<std::string> config;
    std::size_t trials = 3;
    std::uint64_t seed = 0;
    std::optional<std::string> csv;
    std::optional<std::string> svg;
};

inline MambaMiaConfig default_bench_config() {
    MambaMiaConfig cfg;
    cfg.d = 64;
    cfg.d_state = 16;
    return cfg;
}

inline int cmd_bench(const BenchArgs& a, std::ostream& out = std::cout, std::ostream& err = std::cerr,
                     MemoryMeter meter = {}, std::vector<BenchRecord>* records_out = nullptr) {
    BenchOptions opt;
    try {
        opt.cfg = a.config ? load_config(*a.config) : default_bench_config();
        for (const auto& m : a.methods) opt.methods.push_back(parse_method(m));
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
    opt.frames = a.frames;
    opt.trials = std::max<std::size_t>(a.trials, 3);
    opt.seed = a.seed;
    opt.meter = std::move(meter);

    auto records = run_bench(opt, [&](const BenchRecord& r) {
        out << std::left << std::setw(16) << method_name(r.method) << " M=" << std::setw(5) << r.frames;
        if (r.wall_time)
            out << " tokens=" << std::setw(7) << *r.tokens_out << " seconds=" << std::scientific
                << std::setprecision(3) << *r.wall_time << std::defaultfloat << " bytes=" << *r.rss_estimate;
        else
            out << " failed: " << r.error;
        out << '\n' << std::flush;
    });
    for (const auto& [m, slope] : method_slopes(records))
        out << "slope " << m << " " << std::fixed << std::setprecision(3) << slope << std::defaultfloat << '\n';

    auto write_text = [&](const std::string& path, const std::string& text) {
        std::ofstream os(path);
        os << text;
        return static_cast<bool>(os);
    };
    if (a.csv && !write_text(*a.csv, bench_csv(records))) {
        err << "error: cannot write " << *a.csv << '\n';
        return kIoError;
    }
    if (a.svg && !write_text(*a.svg, bench_svg(records))) {
        err << "error: cannot write " << *a.svg << '\n';
        return kIoError;
    }
    if (records_out) *records_out = std::move(records);
    return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::string config;
    std::uint64_t seed = 0;
    double eps = 1e-5;
    double tol = 1e-4;
    std::size_t frames = 2;
    std::size_t classes = 3;
    std::optional<std::string> corrupt_group;  // test hook: perturb this group's analytic gradient
};

inline constexpr std::size_t kGradcheckParamLimit = 100000;

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    MambaMiaConfig cfg;
    try {
        cfg = load_config(a.config);
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
    MambaMiaModel<double> model = init_mambamia<double>(cfg, a.seed);
    condition_for_gradcheck(model, a.seed);
    Rng head_rng(a.seed ^ 0x68656164ULL);
    ProbeHead<double> head = init_probe_head<double>(head_rng, cfg.d, a.classes);
    const std::size_t total = model.parameter_count() + head.w.size() + head.b.size();
    if (total > kGradcheckParamLimit) {
        err << "error: " << total << " parameters exceeds the gradcheck limit of " << kGradcheckParamLimit
            << "; reduce d, expand, d_state or layers\n";
        return kInputError;
    }

    NeedleTaskSpec spec;
    spec.frames = a.frames;
    spec.patches = cfg.n_patches;
    spec.d = cfg.d;
    spec.codebook_size = a.classes;
    spec.seed = a.seed;
    const auto sample = gen_needle_dataset<double>(spec, 1).front();

    MambaMiaModel<double> mg = zeros_like(model);
    ProbeHead<double> hg{zeros_like(head.w), zeros_like(head.b)};
    probe_forward_backward(model, head, sample.video, sample.label, &mg, &hg);

    auto params = collect_params(model, head);
    auto grads = collect_params(mg, hg);
    std::vector<Tensor<double>> analytic;
    for (const auto& g : grads) analytic.push_back(*g.tensor);
    if (a.corrupt_group) {
        bool found = false;
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == *a.corrupt_group) {
                for (auto& v : analytic[i].values()) v = v * 1.5 + 1e-3;
                found = true;
            }
        if (!found) {
            err << "error: no parameter group named " << *a.corrupt_group << '\n';
            return kInputError;
        }
    }

    GradcheckOptions opt;
    opt.eps = a.eps;
    opt.seed = a.seed;
    GradcheckReport report;
    try {
        report = finite_diff_gradcheck(
            [&] { return probe_forward_backward(model, head, sample.video, sample.label).loss; }, params, analytic,
            opt);
    } catch (const GradcheckError& e) {
        err << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
    for (const auto& g : report.groups)
        out << std::left << std::setw(24) << g.name << " max_rel_err=" << std::scientific << std::setprecision(3)
            << g.max_rel_error << std::defaultfloat << (g.max_rel_error <= a.tol ? "  ok" : "  FAIL")
            << (g.probed ? " (probed)" : "") << '\n';
    const auto failed = report.failures(a.tol);
    if (!failed.empty()) {
        out << "gradcheck failed for:";
        for (const auto& f : failed) out << ' ' << f;
        out << '\n';
        return kCheckFailed;
    }
    out << "gradcheck passed: " << report.groups.size() << " groups, max_rel_err=" << std::scientific
        << report.max_error() << std::defaultfloat << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string task = "needle";
    std::string config;
    std::size_t steps = 2000;
    std::uint64_t seed = 7;
    std::optional<std::string> report;
    std::size_t frames = 8;
    std::size_t classes = 8;
    double noise_std = 0.1;
    std::size_t batch = TrainOptions{}.batch;
    double lr = TrainOptions{}.lr;
    std::size_t eval_samples = TrainOptions{}.eval_samples;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out = std::cout, std::ostream& err = std::cerr,
                     TrainReport* report_out = nullptr) {
    if (a.task != "needle") {
        err << "error: unknown task \"" << a.task << "\" (available: needle)\n";
        return kInputError;
    }
    MambaMiaConfig cfg;
    try {
        cfg = load_config(a.config);
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
    NeedleTaskSpec spec;
    spec.frames = a.frames;
    spec.patches = cfg.n_patches;
    spec.d = cfg.d;
    spec.codebook_size = a.classes;
    spec.noise_std = a.noise_std;
    spec.seed = a.seed;
    TrainOptions opt;
    opt.steps = a.steps;
    opt.seed = a.seed;
    opt.batch = a.batch;
    opt.lr = a.lr;
    opt.eval_samples = a.eval_samples;

    auto write_report = [&](const TrainReport& r) {
        if (!a.report) return true;
        std::ofstream os(*a.report);
        os << r.to_json().dump(2) << '\n';
        return static_cast<bool>(os);
    };

    TrainReport report;
    try {
        report = train_needle_probe<float>(cfg, spec, opt, {}, &report);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << " (last loss " << e.last_good_loss() << ")\n";
        write_report(report);
        return kDiverged;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
    if (!write_report(report)) {
        err << "error: cannot write " << *a.report << '\n';
        return kIoError;
    }
    out << "accuracy=" << report.accuracy << " chance=" << report.chance << " steps=" << opt.steps << '\n';
    if (report_out) *report_out = std::move(report);
    return kOk;
}

// ---------------------------------------------------------------------------

inline int cmd_info(const std::string& input, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    try {
        const TensorHeader h = read_tensor_header(input);
        out << "magic STTC\nversion " << h.version << "\ndtype " << dtype_name(h.dtype) << "\ndims";
        for (auto dim : h.dims) out << ' ' << dim;
        out << "\nelements " << shape_numel(h.dims) << "\npayload_bytes " << h.payload_bytes() << '\n';
        return kOk;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

}  // namespace sstc::cli

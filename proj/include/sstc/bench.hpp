#pragma once

// Inference-cost harness: times each compression method over a range of frame
// counts, records peak allocation, and fits log-log slopes.

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sstc/blocks.hpp"
#include "sstc/errors.hpp"
#include "sstc/pipeline.hpp"
#include "sstc/rng.hpp"

namespace sstc {

enum class BenchMethod { mambamia, mamba_per_frame, attention, avg_pool, none };

/// Spatial pooling baseline reduces 100 patches to 25 per frame.
inline constexpr std::size_t kAvgPoolFactor = 4;

inline const char* method_name(BenchMethod m) {
    switch (m) {
        case BenchMethod::mambamia: return "mambamia";
        case BenchMethod::mamba_per_frame: return "mamba_per_frame";
        case BenchMethod::attention: return "attention";
        case BenchMethod::avg_pool: return "avg_pool";
        case BenchMethod::none: return "none";
    }
    return "?";
}

inline BenchMethod parse_method(const std::string& name) {
    for (auto m : {BenchMethod::mambamia, BenchMethod::mamba_per_frame, BenchMethod::attention,
                   BenchMethod::avg_pool, BenchMethod::none})
        if (name == method_name(m)) return m;
    throw ParameterError("unknown bench method \"" + name + "\"");
}

struct BenchRecord {
    BenchMethod method = BenchMethod::none;
    std::size_t frames = 0;
    std::optional<std::size_t> tokens_out;
    std::optional<double> wall_time;          // seconds, median of trials
    std::optional<std::size_t> rss_estimate;  // bytes
    std::string error;
};

/// Peak-memory probe. The default reads the process high-water mark, which never decreases;
/// callers that can hook the allocator supply a resettable meter instead.
struct MemoryMeter {
    std::function<void()> reset = [] {};
    std::function<std::size_t()> peak = [] {
        rusage ru{};
        getrusage(RUSAGE_SELF, &ru);
        return static_cast<std::size_t>(ru.ru_maxrss) * 1024;
    };
};

struct BenchOptions {
    std::vector<BenchMethod> methods;
    std::vector<std::size_t> frames;
    MambaMiaConfig cfg;
    std::size_t trials = 3;
    std::uint64_t seed = 0;
    MemoryMeter meter;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return NAN;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Least-squares slope of log(y) against log(x).
inline double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ParameterError("slope fit needs at least two points");
    const double n = double(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0.0) throw ParameterError("slope fit needs distinct x values");
    return (n * sxy - sx * sy) / denom;
}

/// Fitted slope per method over the cells that completed.
inline std::map<std::string, double> method_slopes(const std::vector<BenchRecord>& records) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> pts;
    for (const auto& r : records)
        if (r.wall_time && *r.wall_time > 0) {
            auto& [xs, ys] = pts[method_name(r.method)];
            xs.push_back(double(r.frames));
            ys.push_back(*r.wall_time);
        }
    std::map<std::string, double> out;
    for (const auto& [m, xy] : pts)
        if (xy.first.size() >= 2) out[m] = fit_loglog_slope(xy.first, xy.second);
    return out;
}

/// One forward pass of `method` on frames [M × N × d]; returns the compressed tokens.
class BenchRunner {
public:
    BenchRunner(BenchMethod method, const MambaMiaConfig& cfg, std::uint64_t seed) : method_(method), cfg_(cfg) {
        if (method == BenchMethod::mambamia || method == BenchMethod::mamba_per_frame)
            mamba_ = init_mambamia<float>(cfg, seed);
        else if (method == BenchMethod::attention)
            attention_ = init_attention_compressor<float>(cfg, seed);
    }

    Tensor<float> run(const Tensor<float>& frames) const {
        const std::size_t m = frames.dim(0), n = frames.dim(1), d = frames.dim(2);
        switch (method_) {
            case BenchMethod::mambamia: return compress_and_sample(frames, *mamba_, CompressionMode::joint);
            case BenchMethod::mamba_per_frame: return compress_and_sample(frames, *mamba_, CompressionMode::per_frame);
            case BenchMethod::attention: return attention_compress(frames, *attention_);
            case BenchMethod::avg_pool: {
                Tensor<float> out({m, n / kAvgPoolFactor, d});
                for (std::size_t f = 0; f < m; ++f) {
                    Tensor<float> frame({n, d}, std::vector<float>(frames.data() + f * n * d, frames.data() + (f + 1) * n * d));
                    Tensor<float> pooled = avg_pool_frame(frame, kAvgPoolFactor);
                    std::copy(pooled.values().begin(), pooled.values().end(), out.data() + f * pooled.size());
                }
                return out;
            }
            case BenchMethod::none: return frames;
        }
        return {};
    }

private:
    BenchMethod method_;
    MambaMiaConfig cfg_;
    std::optional<MambaMiaModel<float>> mamba_;
    std::optional<AttentionCompressor<float>> attention_;
};

/// Methods run one after another, never concurrently. One untimed warm-up precedes the trials.
inline std::vector<BenchRecord> run_bench(const BenchOptions& opt,
                                          const std::function<void(const BenchRecord&)>& on_record = {}) {
    opt.cfg.validate();
    setenv("SSTC_THREADS", "1", 1);
    const std::size_t trials = std::max<std::size_t>(opt.trials, 1);
    std::vector<BenchRecord> out;
    for (BenchMethod method : opt.methods) {
        std::optional<BenchRunner> runner;
        std::string init_error;
        try {
            runner.emplace(method, opt.cfg, opt.seed);
        } catch (const std::exception& e) {
            init_error = e.what();
        }
        for (std::size_t m : opt.frames) {
            BenchRecord rec;
            rec.method = method;
            rec.frames = m;
            try {
                if (!runner) throw Error(init_error);
                Rng rng(opt.seed ^ (0x9E37ULL * (m + 1)));
                const Tensor<float> frames = random_normal<float>(rng, {m, opt.cfg.n_patches, opt.cfg.d});
                (void)runner->run(frames);
                std::vector<double> times;
                opt.meter.reset();
                for (std::size_t t = 0; t < trials; ++t) {
                    const auto t0 = std::chrono::steady_clock::now();
                    const Tensor<float> y = runner->run(frames);
                    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
                    rec.tokens_out = y.size() / opt.cfg.d;
                }
                rec.rss_estimate = opt.meter.peak();
                rec.wall_time = std::max(median(times), 1e-9);
            } catch (const std::exception& e) {
                rec.error = e.what();
            }
            if (on_record) on_record(rec);
            out.push_back(std::move(rec));
        }
    }
    return out;
}

inline constexpr const char* kBenchCsvHeader = "method,frames,tokens,seconds,bytes";

/// Failed cells keep their method and frame count with the measurement columns left empty.
inline std::string bench_csv(const std::vector<BenchRecord>& records) {
    std::ostringstream os;
    os << kBenchCsvHeader << '\n';
    for (const auto& r : records) {
        os << method_name(r.method) << ',' << r.frames << ',';
        if (r.tokens_out) os << *r.tokens_out;
        os << ',';
        if (r.wall_time) os << std::scientific << *r.wall_time << std::defaultfloat;
        os << ',';
        if (r.rss_estimate) os << *r.rss_estimate;
        os << '\n';
    }
    return os.str();
}

/// Log-log line chart of seconds against frames, one polyline per method.
inline std::string bench_svg(const std::vector<BenchRecord>& records) {
    constexpr double width = 640, height = 420, left = 70, right = 170, top = 30, bottom = 50;
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

    std::map<std::string, std::vector<std::pair<double, double>>> series;
    std::vector<std::string> order;
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& r : records) {
        if (!r.wall_time) continue;
        const std::string name = method_name(r.method);
        if (!series.count(name)) order.push_back(name);
        const double lx = std::log10(double(r.frames)), ly = std::log10(*r.wall_time);
        series[name].emplace_back(lx, ly);
        xmin = std::min(xmin, lx);
        xmax = std::max(xmax, lx);
        ymin = std::min(ymin, ly);
        ymax = std::max(ymax, ly);
    }
    if (order.empty()) xmin = ymin = 0, xmax = ymax = 1;
    if (xmax - xmin < 1e-9) xmax = xmin + 1;
    ymin = std::floor(ymin);
    ymax = std::ceil(ymax);
    if (ymax - ymin < 1) ymax = ymin + 1;
    const double pw = width - left - right, ph = height - top - bottom;
    auto px = [&](double lx) { return left + (lx - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double ly) { return top + (ymax - ly) / (ymax - ymin) * ph; };

    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
       << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
       << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double e = ymin; e <= ymax + 1e-9; e += 1) {
        os << "<line x1=\"" << left << "\" y1=\"" << py(e) << "\" x2=\"" << left + pw << "\" y2=\"" << py(e)
           << "\" stroke=\"#ddd\"/>\n"
           << "<text x=\"" << left - 6 << "\" y=\"" << py(e) + 4 << "\" text-anchor=\"end\">1e" << int(e)
           << "</text>\n";
    }
    std::vector<double> xticks;
    for (const auto& r : records)
        if (r.wall_time) xticks.push_back(double(r.frames));
    std::sort(xticks.begin(), xticks.end());
    xticks.erase(std::unique(xticks.begin(), xticks.end()), xticks.end());
    for (double f : xticks)
        os << "<text x=\"" << px(std::log10(f)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << f
           << "</text>\n";
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">frames (log)</text>\n"
       << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
       << top + ph / 2 << ")\">seconds (log)</text>\n";
    for (std::size_t i = 0; i < order.size(); ++i) {
        const char* color = palette[i % std::size(palette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [lx, ly] : series[order[i]]) os << px(lx) << ',' << py(ly) << ' ';
        os << "\"/>\n";
        for (const auto& [lx, ly] : series[order[i]])
            os << "<circle cx=\"" << px(lx) << "\" cy=\"" << py(ly) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        const double ly = top + 14 + 20 * double(i);
        os << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 36 << "\" y2=\"" << ly
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
           << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly + 4 << "\">" << order[i] << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace sstc

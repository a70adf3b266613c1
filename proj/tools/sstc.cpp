#include <atomic>
#include <cstdlib>
#include <new>

#include "CLI11.hpp"
#include "sstc/commands.hpp"

// Heap accounting for `bench`: tracks live bytes and a resettable high-water mark.
namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};

struct alignas(std::max_align_t) AllocHeader {
    std::size_t size;
};

void* tracked_alloc(std::size_t n) {
    void* raw = std::malloc(n + sizeof(AllocHeader));
    if (!raw) throw std::bad_alloc();
    static_cast<AllocHeader*>(raw)->size = n;
    const std::size_t live = g_live.fetch_add(n, std::memory_order_relaxed) + n;
    std::size_t peak = g_peak.load(std::memory_order_relaxed);
    while (live > peak && !g_peak.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
    }
    return static_cast<AllocHeader*>(raw) + 1;
}

void tracked_free(void* p) noexcept {
    if (!p) return;
    AllocHeader* h = static_cast<AllocHeader*>(p) - 1;
    g_live.fetch_sub(h->size, std::memory_order_relaxed);
    std::free(h);
}

sstc::MemoryMeter heap_meter() {
    sstc::MemoryMeter m;
    // Report growth over the live set at reset time, so results are per-run working memory.
    static std::size_t baseline = 0;
    m.reset = [] {
        baseline = g_live.load();
        g_peak.store(baseline);
    };
    m.peak = [] { return g_peak.load() - baseline; };
    return m;
}
}  // namespace

void* operator new(std::size_t n) { return tracked_alloc(n); }
void* operator new[](std::size_t n) { return tracked_alloc(n); }
void operator delete(void* p) noexcept { tracked_free(p); }
void operator delete[](void* p) noexcept { tracked_free(p); }
void operator delete(void* p, std::size_t) noexcept { tracked_free(p); }
void operator delete[](void* p, std::size_t) noexcept { tracked_free(p); }

int main(int argc, char** argv) {
    CLI::App app{"Selective state-space video token compression"};
    app.require_subcommand(1);
    int code = 0;

    sstc::cli::CompressArgs ca;
    auto* compress = app.add_subcommand("compress", "compress a [M x N x d] frame tensor into query tokens");
    compress->add_option("--input", ca.input, "input tensor file")->required();
    compress->add_option("--config", ca.config, "model config (JSON)")->required();
    auto* weights = compress->add_option("--weights", ca.weights, "weights archive");
    compress->add_option("--seed", ca.seed, "initialise weights from this seed")->excludes(weights);
    compress->add_option("--output", ca.output, "output tensor file")->required();
    compress->add_flag("--per-frame", ca.per_frame, "compress each frame independently, no frame sampling");
    compress->add_flag("--cap-frames", ca.cap_frames, "uniformly subsample inputs longer than m_max first");
    compress->callback([&] { code = sstc::cli::cmd_compress(ca); });

    sstc::cli::BenchArgs ba;
    std::string methods, frames;
    auto* bench = app.add_subcommand("bench", "time and memory sweep over frame counts");
    bench->add_option("--methods", methods, "comma-separated: mambamia,mamba_per_frame,attention,avg_pool,none");
    bench->add_option("--frames", frames, "comma-separated frame counts");
    bench->add_option("--config", ba.config, "model config (JSON); default d=64, d_state=16");
    bench->add_option("--trials", ba.trials, "timed trials per cell (min 3)");
    bench->add_option("--seed", ba.seed);
    bench->add_option("--csv", ba.csv, "write results CSV");
    bench->add_option("--svg", ba.svg, "write log-log chart");
    bench->callback([&] {
        auto split = [](const std::string& s) {
            std::vector<std::string> out;
            std::stringstream ss(s);
            for (std::string item; std::getline(ss, item, ',');)
                if (!item.empty()) out.push_back(item);
            return out;
        };
        if (!methods.empty()) ba.methods = split(methods);
        if (!frames.empty()) {
            ba.frames.clear();
            for (const auto& f : split(frames)) {
                try {
                    ba.frames.push_back(std::stoul(f));
                } catch (const std::exception&) {
                    std::cerr << "error: bad frame count \"" << f << "\"\n";
                    code = sstc::cli::kInputError;
                    return;
                }
            }
        }
        code = sstc::cli::cmd_bench(ba, std::cout, std::cerr, heap_meter());
    });

    sstc::cli::GradcheckArgs ga;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter group (float64)");
    grad->add_option("--config", ga.config, "model config (JSON)")->required();
    grad->add_option("--seed", ga.seed);
    grad->add_option("--eps", ga.eps, "central-difference step");
    grad->add_option("--tol", ga.tol, "max relative error per group");
    grad->add_option("--frames", ga.frames);
    grad->add_option("--classes", ga.classes);
    grad->add_option("--corrupt", ga.corrupt_group, "perturb the analytic gradient of one group (self-test)");
    grad->callback([&] { code = sstc::cli::cmd_gradcheck(ga); });

    sstc::cli::SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "train a linear probe on a synthetic retrieval task");
    synth->add_option("--task", sa.task)->check(CLI::IsMember({"needle"}));
    synth->add_option("--config", sa.config, "model config (JSON)")->required();
    synth->add_option("--steps", sa.steps);
    synth->add_option("--seed", sa.seed);
    synth->add_option("--report", sa.report, "write JSON report");
    synth->add_option("--frames", sa.frames);
    synth->add_option("--classes", sa.classes);
    synth->add_option("--noise", sa.noise_std);
    synth->add_option("--batch", sa.batch);
    synth->add_option("--lr", sa.lr);
    synth->add_option("--eval-samples", sa.eval_samples);
    synth->callback([&] { code = sstc::cli::cmd_synth(sa); });

    std::string info_input;
    auto* info = app.add_subcommand("info", "print a tensor file header");
    info->add_option("--input", info_input)->required();
    info->callback([&] { code = sstc::cli::cmd_info(info_input); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : sstc::cli::kInputError;
    }
    return code;
}

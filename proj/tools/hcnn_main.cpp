// Command-line front end: train / eval / params / analyze / selftest.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
// 5 selftest failure.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hcnn/analysis.hpp"
#include "hcnn/config_json.hpp"
#include "hcnn/data.hpp"
#include "hcnn/model.hpp"
#include "hcnn/train.hpp"

namespace fs = std::filesystem;
using namespace hcnn;
using T = float;

// ---- data loading -----------------------------------------------------------

struct SplitPair {
    LabeledImageSet<T> train;
    LabeledImageSet<T> test;
};

static SplitPair load_splits(const RunConfig& rc) {
    const DataConfig& d = rc.data;
    SplitPair out;
    if (d.dataset == "cifar10" || d.dataset == "cifar100") {
        if (d.dir.empty())
            throw config_error("data.dir is required for " + d.dataset);
        const int want = d.dataset == "cifar10" ? 10 : 100;
        if (rc.network.num_classes != want)
            throw config_error("network.num_classes must be " +
                               std::to_string(want) + " for " + d.dataset);
        auto ds = d.dataset == "cifar10" ? load_cifar10<T>(d.dir)
                                         : load_cifar100<T>(d.dir);
        out.train = std::move(ds.train);
        out.test = std::move(ds.test);
    } else if (d.dataset == "synth-easy" || d.dataset == "synth-noisy") {
        const std::string kind = d.dataset.substr(6);
        const std::size_t n_test = std::max<std::size_t>(d.synth_count / 5, 1);
        out.train = synth_dataset<T>(kind, d.synth_count, rc.seed,
                                     rc.network.spatial_size,
                                     rc.network.num_classes);
        out.test = synth_dataset<T>(kind, n_test, rc.seed + 1,
                                    rc.network.spatial_size,
                                    rc.network.num_classes);
    } else {
        throw config_error("unknown dataset: " + d.dataset);
    }
    if (out.train.images.dim(1) !=
        static_cast<std::size_t>(rc.network.spatial_size))
        throw config_error("network.spatial_size does not match the data");
    if (d.train_limit) out.train = take_front(out.train, d.train_limit);
    if (d.test_limit) out.test = take_front(out.test, d.test_limit);
    return out;
}

// ---- train ------------------------------------------------------------------

static int cmd_train(const RunConfig& rc_in) {
    RunConfig rc = rc_in;
    rc.network.validate();
    fs::create_directories(rc.output_dir);
    save_run_config(rc.output_dir + "/config.json", rc);

    SplitPair data = load_splits(rc);
    auto [mean, stdev] = standardize(data.train, &data.test);

    auto params = init_parameters<T>(rc.network, rc.seed);
    params.std_mean = mean;
    params.std_std = stdev;

    const std::string metrics_path = rc.output_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path);
    if (!metrics) throw data_error("cannot write " + metrics_path);

    auto history = train(
        data.train, &data.test, params, rc.network, rc.train, nullptr,
        [&](const EpochMetrics& m) {
            const std::string line = format_metrics(m);
            metrics << line << "\n" << std::flush;
            std::printf("%s\n", line.c_str());
            std::fflush(stdout);
            if (rc.train.checkpoint_every > 0 &&
                (m.epoch + 1) % rc.train.checkpoint_every == 0)
                save_checkpoint(rc.output_dir + "/ckpt_epoch_" +
                                    std::to_string(m.epoch) + ".ckpt",
                                params, rc.network, m.step);
        });

    const std::uint64_t final_step = history.empty() ? 0 : history.back().step;
    save_checkpoint(rc.output_dir + "/model.ckpt", params, rc.network,
                    final_step);
    std::printf("saved %s/model.ckpt (step %llu)\n", rc.output_dir.c_str(),
                static_cast<unsigned long long>(final_step));
    return 0;
}

// ---- eval -------------------------------------------------------------------

static int cmd_eval(const std::string& ckpt_path, const RunConfig& rc_in,
                    const std::string& split, int batch_size) {
    auto ckpt = load_checkpoint<T>(ckpt_path);
    RunConfig rc = rc_in;
    rc.network = ckpt.config;  // the checkpoint owns the architecture
    SplitPair data = load_splits(rc);
    LabeledImageSet<T>& set = split == "train" ? data.train : data.test;
    apply_standardization(set, ckpt.params.std_mean, ckpt.params.std_std);

    auto r = evaluate(set, ckpt.params, ckpt.config, batch_size,
                      rc.train.threads);
    json rep{{"checkpoint", ckpt_path},
             {"dataset", rc.data.dataset},
             {"split", split},
             {"count", set.count()},
             {"loss", r.loss},
             {"accuracy", r.accuracy}};
    std::printf("%s\n", rep.dump().c_str());
    return 0;
}

// ---- params -----------------------------------------------------------------

static int cmd_params(const RunConfig& rc) {
    rc.network.validate();
    ParameterCount pc = count_parameters(rc.network);
    json layers = json::array();
    for (const auto& l : pc.layers)
        layers.push_back({{"name", l.name},
                          {"headline", l.headline},
                          {"auxiliary", l.auxiliary}});
    json rep{{"layers", layers},
             {"headline", pc.headline},
             {"auxiliary", pc.auxiliary},
             {"trainable", pc.trainable}};
    std::printf("%s\n", rep.dump(2).c_str());
    return 0;
}

// ---- analyze ----------------------------------------------------------------

static int cmd_analyze(const std::string& ckpt_path, const RunConfig& rc_in,
                       const std::string& split, int depth,
                       std::vector<int> taus, int width, int queries,
                       int pgm_count, bool run_probe,
                       const std::string& out_dir) {
    auto ckpt = load_checkpoint<T>(ckpt_path);
    RunConfig rc = rc_in;
    rc.network = ckpt.config;
    // Analysis always runs with periodic extension; training boundary mode
    // does not restrict it.
    NetworkConfig cfg = ckpt.config;
    cfg.boundary = BoundaryMode::Periodic;
    cfg.validate();
    if (depth <= 0) depth = cfg.depth - 1;

    SplitPair data = load_splits(rc);
    LabeledImageSet<T>& set = split == "train" ? data.train : data.test;
    apply_standardization(set, ckpt.params.std_mean, ckpt.params.std_std);

    fs::create_directories(out_dir);
    auto corpus = build_attribute_corpus(set, ckpt.params, cfg, depth, 100,
                                         rc.train.threads);
    save_attribute_corpus(out_dir + "/corpus.hatc", corpus);

    if (queries <= 0 || queries > static_cast<int>(corpus.size()))
        queries = static_cast<int>(corpus.size());
    std::vector<AttributeArray<T>> qs(corpus.begin(),
                                      corpus.begin() + queries);
    json agreements = json::array();
    for (int tau : taus) {
        double a = class_agreement(qs, corpus, tau,
                                   static_cast<std::size_t>(width));
        agreements.push_back({{"tau", tau}, {"agreement", a}});
    }

    for (int i = 0; i < pgm_count && i < static_cast<int>(corpus.size()); ++i)
        write_pgm(out_dir + "/array_" + std::to_string(i) + ".pgm",
                  corpus[static_cast<std::size_t>(i)].values);

    json rep{{"checkpoint", ckpt_path},
             {"dataset", rc.data.dataset},
             {"split", split},
             {"depth", depth},
             {"width", width},
             {"queries", queries},
             {"corpus", corpus.size()},
             {"chance", 1.0 / cfg.num_classes},
             {"class_agreement", agreements}};

    if (run_probe) {
        std::vector<std::size_t> idx{0};
        auto [batch, labels] = gather_batch(set, idx);
        auto probe = covariance_probe(ckpt.params, cfg, batch,
                                      rc.train.threads);
        rep["covariance_worst"] = probe.worst;
    }

    std::ofstream rf(out_dir + "/report.json");
    rf << rep.dump(2) << "\n";
    std::printf("%s\n", rep.dump(2).c_str());
    return 0;
}

// ---- selftest ---------------------------------------------------------------

namespace selftest {

// Reference n-d convolution, independent of the library kernels: plain
// odometer loops, one tap sum per output element.
static Tensor<double> brute_conv(const Tensor<double>& in,
                                 const Tensor<double>& w,
                                 const std::vector<std::size_t>& axes,
                                 BoundaryMode mode,
                                 const std::vector<std::size_t>& strides) {
    std::vector<std::size_t> osh(in.shape().begin(), in.shape().end());
    for (std::size_t i = 0; i < axes.size(); ++i)
        osh[axes[i]] = (in.dim(axes[i]) + strides[i] - 1) / strides[i];
    Tensor<double> out(osh);

    std::vector<std::size_t> oidx(osh.size(), 0);
    const std::size_t total = out.size();
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rem = flat;
        for (std::size_t a = osh.size(); a-- > 0;) {
            oidx[a] = rem % osh[a];
            rem /= osh[a];
        }
        double acc = 0;
        std::vector<std::size_t> tap(axes.size(), 0);
        bool done = false;
        while (!done) {
            std::vector<long long> pos(in.rank());
            for (std::size_t a = 0; a < in.rank(); ++a)
                pos[a] = static_cast<long long>(oidx[a]);
            bool zero = false;
            for (std::size_t i = 0; i < axes.size(); ++i) {
                const long long len =
                    static_cast<long long>(in.dim(axes[i]));
                long long p =
                    static_cast<long long>(oidx[axes[i]] * strides[i]) +
                    static_cast<long long>(tap[i]) -
                    static_cast<long long>(w.dim(i) / 2);
                if (p < 0 || p >= len) {
                    if (mode == BoundaryMode::ZeroPad) {
                        zero = true;
                        break;
                    }
                    p %= len;
                    if (p < 0) p += len;
                }
                pos[axes[i]] = p;
            }
            if (!zero) {
                std::size_t iflat = 0, wflat = 0;
                for (std::size_t a = 0; a < in.rank(); ++a)
                    iflat = iflat * in.dim(a) +
                            static_cast<std::size_t>(pos[a]);
                for (std::size_t i = 0; i < axes.size(); ++i)
                    wflat = wflat * w.dim(i) + tap[i];
                acc += in.flat(iflat) * w.flat(wflat);
            }
            done = true;
            for (std::size_t i = axes.size(); i-- > 0;) {
                if (++tap[i] < w.dim(i)) {
                    done = false;
                    break;
                }
                tap[i] = 0;
            }
        }
        out.flat(flat) = acc;
    }
    return out;
}

struct Failure {
    std::string what;
};

static std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

static void check(bool ok, const std::string& what) {
    if (!ok) throw Failure{what};
    std::printf("selftest %s: ok\n", what.c_str());
}

static void randomize(Tensor<double>& t, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& v : t.vec()) v = d(rng);
}

static NetworkConfig toy_config(BoundaryMode mode) {
    NetworkConfig cfg;
    cfg.depth = 6;
    cfg.max_attributes = 8;
    cfg.rank = 4;
    cfg.spatial_size = 8;
    cfg.num_classes = 4;
    cfg.attr_support_a = 3;
    cfg.attr_support_b = 5;
    cfg.stride_depths = {5};
    cfg.boundary = mode;
    cfg.variant = Variant::Standard;
    return cfg;
}

static void run_conv_oracle() {
    std::mt19937_64 rng(11);
    double worst = 0;
    for (int inst = 0; inst < 12; ++inst) {
        std::uniform_int_distribution<std::size_t> dim(2, 5), sup(1, 3);
        const std::size_t rank = 2 + inst % 2;
        std::vector<std::size_t> ish(rank);
        for (auto& d : ish) d = dim(rng);
        std::vector<std::size_t> axes, strides, wsh;
        for (std::size_t a = 0; a < rank; ++a) {
            if (a + 1 == rank && axes.empty()) {}  // ensure at least one axis
            else if (inst % 3 == 0 && a == 0) continue;
            axes.push_back(a);
            strides.push_back(1 + (inst + a) % 2);
            wsh.push_back(std::min(sup(rng), ish[a]));
        }
        Tensor<double> in(ish), w(wsh);
        randomize(in, rng);
        randomize(w, rng);
        const BoundaryMode mode =
            inst % 2 ? BoundaryMode::Periodic : BoundaryMode::ZeroPad;
        auto got = conv_nd<double>(in, w, axes, mode, strides);
        auto want = brute_conv(in, w, axes, mode, strides);
        for (std::size_t i = 0; i < got.size(); ++i)
            worst = std::max(worst, std::abs(got.flat(i) - want.flat(i)));
    }
    check(worst <= 1e-10, "convolution matches reference (err " +
                              sci(worst) + ")");
}

static void run_separable_equivalence() {
    std::mt19937_64 rng(12);
    const std::size_t B = 2, U = 4, A = 4, R = 8, K = 5, Q = 3, Sa = 3,
                      Sr = 5;
    Tensor<double> in({B, U, U, A, R}), h({Q, 3, 3}), g({K, Q, Sa, Sr});
    randomize(in, rng);
    randomize(h, rng);
    randomize(g, rng);
    double worst = 0;
    for (auto mode : {BoundaryMode::ZeroPad, BoundaryMode::Periodic}) {
        auto t = spatial_bank_forward(in, h, mode);
        AttrConvGeom geo;
        geo.su = 1;
        geo.sa = 2;
        geo.sr = 2;
        geo.mode = mode;
        auto got = attr_bank_forward(t, g, geo);
        Tensor<double> w({K, 3, 3, Sa, Sr});
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t d1 = 0; d1 < 3; ++d1)
                for (std::size_t d2 = 0; d2 < 3; ++d2)
                    for (std::size_t da = 0; da < Sa; ++da)
                        for (std::size_t dr = 0; dr < Sr; ++dr) {
                            double acc = 0;
                            for (std::size_t q = 0; q < Q; ++q)
                                acc += h(q, d1, d2) * g(k, q, da, dr);
                            w(k, d1, d2, da, dr) = acc;
                        }
        DenseConvGeom dg;
        dg.sa = 2;
        dg.sr = 2;
        dg.su = 1;
        dg.mode = mode;
        auto want = dense_attr_forward(in, w, dg);
        for (std::size_t i = 0; i < got.size(); ++i)
            worst = std::max(worst, std::abs(got.flat(i) - want.flat(i)));
    }
    check(worst <= 1e-10, "separable bank matches materialized filter (err " +
                              sci(worst) + ")");
}

static void run_gradient_check() {
    auto cfg = toy_config(BoundaryMode::ZeroPad);
    auto params = init_parameters<double>(cfg, 3);
    std::mt19937_64 rng(4);
    Tensor<double> x({2, 8, 8, 3});
    randomize(x, rng);
    std::vector<int> labels{1, 3};

    auto acts = forward(x, params, cfg, true);
    auto grads = zero_gradients(params);
    backward(acts, params, cfg, labels, grads);
    auto parrs = trainable_arrays(params);
    auto garrs = trainable_arrays(grads);
    auto names = trainable_names(params);

    double worst = 0;
    std::string where;
    for (std::size_t a = 0; a < parrs.size(); ++a) {
        const std::size_t n = parrs[a]->size();
        const std::size_t step = std::max<std::size_t>(n / 5, 1);
        for (std::size_t i = 0; i < n; i += step) {
            double& p = parrs[a]->flat(i);
            const double eps = 1e-5, keep = p;
            p = keep + eps;
            auto up = forward(x, params, cfg, true);
            double lp = cross_entropy_from_logits(
                up.x[static_cast<std::size_t>(cfg.depth)], labels);
            p = keep - eps;
            auto dn = forward(x, params, cfg, true);
            double ln = cross_entropy_from_logits(
                dn.x[static_cast<std::size_t>(cfg.depth)], labels);
            p = keep;
            const double fd = (lp - ln) / (2 * eps);
            const double an = garrs[a]->flat(i);
            const double rel = std::abs(fd - an) /
                               std::max({std::abs(fd), std::abs(an), 1e-6});
            if (rel > worst) {
                worst = rel;
                where = names[a];
            }
        }
    }
    check(worst < 1e-3, "gradients match finite differences (worst " +
                            sci(worst) + " at " + where + ")");
}

static void run_invariance() {
    auto cfg = toy_config(BoundaryMode::Periodic);
    auto params = init_parameters<double>(cfg, 5);
    std::mt19937_64 rng(6);
    Tensor<double> x({2, 8, 8, 3});
    randomize(x, rng);
    auto probe = covariance_probe(params, cfg, x);
    check(!probe.informational && probe.worst <= 1e-5,
          "translation invariance of the class vector (worst " +
              sci(probe.worst) + ")");

    // Negative control: an inadmissible translation must move the output.
    auto acts = forward(x, params, cfg, false);
    auto ref = acts.x[static_cast<std::size_t>(cfg.depth)];
    auto spliced = acts;
    Tensor<double>& x4 = spliced.x[4];
    Tensor<double> shifted(x4.shape());
    const std::size_t last = x4.dim(5);
    for (std::size_t i = 0; i < x4.size(); ++i) {
        const std::size_t k = i % last;
        shifted.flat(i - k + (k + 1) % last) = x4.flat(i);
    }
    x4 = shifted;
    forward_from(4, params, cfg, spliced, false);
    auto& out = spliced.x[static_cast<std::size_t>(cfg.depth)];
    double dev = 0, ref_inf = 1e-12;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        dev = std::max(dev, std::abs(out.flat(i) - ref.flat(i)));
        ref_inf = std::max(ref_inf, std::abs(ref.flat(i)));
    }
    check(dev / ref_inf > 1e-3,
          "inadmissible translation moves the output (dev " +
              sci(dev / ref_inf) + ")");
}

static void run_determinism() {
    auto cfg = toy_config(BoundaryMode::ZeroPad);
    auto run = [&](const std::string& path) {
        auto set = synth_dataset<T>("easy", 60, 7, 8, 4);
        standardize(set);
        auto params = init_parameters<T>(cfg, 7);
        TrainOptions opts;
        opts.epochs = 2;
        opts.batch_size = 10;
        opts.base_lr = 3e-5;
        opts.seed = 7;
        opts.augment = true;
        opts.max_shift = 1;
        opts.log_timing = false;
        auto hist = train(set, static_cast<const LabeledImageSet<T>*>(nullptr),
                          params, cfg, opts);
        save_checkpoint(path, params, cfg, hist.back().step);
        std::string lines;
        for (const auto& m : hist) lines += format_metrics(m) + "\n";
        return lines;
    };
    const std::string p1 = "/tmp/hcnn_selftest_a.ckpt";
    const std::string p2 = "/tmp/hcnn_selftest_b.ckpt";
    const std::string l1 = run(p1), l2 = run(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    fs::remove(p1);
    fs::remove(p2);
    check(l1 == l2 && !b1.empty() && b1 == b2,
          "repeated runs are byte-identical");
}

static int run_all() {
    try {
        run_conv_oracle();
        run_separable_equivalence();
        run_gradient_check();
        run_invariance();
        run_determinism();
    } catch (const Failure& f) {
        std::fprintf(stderr, "selftest FAILED: %s\n", f.what.c_str());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "selftest FAILED with exception: %s\n", e.what());
        return 5;
    }
    std::printf("selftest: all checks passed\n");
    return 0;
}

}  // namespace selftest

// ---- flag plumbing ----------------------------------------------------------

struct CommonFlags {
    std::string config_path;
    std::string dataset, data_dir;
    std::uint64_t train_limit = 0, test_limit = 0, synth_count = 0;
    std::uint64_t seed = 0;
    std::string output_dir;
    int threads = 0;
    // network
    int depth = 0, max_attributes = 0, rank = 0, spatial_size = 0,
        num_classes = 0;
    std::vector<int> stride_depths, attr_support;
    std::string boundary, variant;
    // schedule
    int epochs = -1, batch_size = 0, decay_period = 0, checkpoint_every = -1;
    double base_lr = -1, decay_factor = -1, momentum = -1, weight_decay = -1;
    bool augment = false, no_augment = false, log_timing = false,
         no_log_timing = false;
    int max_shift = -1;
};

static void add_common_flags(CLI::App* cmd, CommonFlags& f, bool with_network,
                             bool with_schedule) {
    cmd->add_option("--config", f.config_path, "JSON run configuration");
    cmd->add_option("--dataset", f.dataset,
                    "cifar10|cifar100|synth-easy|synth-noisy");
    cmd->add_option("--data-dir", f.data_dir, "directory of binary batches");
    cmd->add_option("--train-limit", f.train_limit,
                    "keep first N training records (0 = all)");
    cmd->add_option("--test-limit", f.test_limit,
                    "keep first N test records (0 = all)");
    cmd->add_option("--synth-count", f.synth_count,
                    "synthetic training set size");
    cmd->add_option("--seed", f.seed, "seed for init and data order");
    cmd->add_option("--output-dir", f.output_dir, "where outputs go");
    cmd->add_option("--threads", f.threads, "worker threads (1 = exact repro)");
    if (with_network) {
        cmd->add_option("--depth", f.depth, "network depth J");
        cmd->add_option("--max-attributes", f.max_attributes,
                        "attribute axis size K (multiple of 4)");
        cmd->add_option("--rank", f.rank, "separable rank Q");
        cmd->add_option("--spatial-size", f.spatial_size,
                        "input side length");
        cmd->add_option("--num-classes", f.num_classes, "class count");
        cmd->add_option("--stride-depths", f.stride_depths,
                        "layers with spatial stride 2 (repeatable)");
        cmd->add_option("--attr-support", f.attr_support,
                        "attribute filter support: two values a b")
            ->expected(2);
        cmd->add_option("--boundary", f.boundary, "zero_pad|periodic");
        cmd->add_option("--variant", f.variant, "standard|plus");
    }
    if (!with_schedule) return;
    cmd->add_option("--epochs", f.epochs, "training epochs");
    cmd->add_option("--batch-size", f.batch_size, "minibatch size");
    cmd->add_option("--lr", f.base_lr, "base learning rate");
    cmd->add_option("--decay-period", f.decay_period,
                    "epochs between rate drops");
    cmd->add_option("--decay-factor", f.decay_factor, "rate drop factor");
    cmd->add_option("--momentum", f.momentum, "heavy-ball coefficient");
    cmd->add_option("--weight-decay", f.weight_decay, "L2 coefficient");
    cmd->add_option("--checkpoint-every", f.checkpoint_every,
                    "epochs between intermediate checkpoints (0 = none)");
    cmd->add_flag("--augment", f.augment, "enable train-time augmentation");
    cmd->add_flag("--no-augment", f.no_augment, "disable augmentation");
    cmd->add_flag("--log-timing", f.log_timing, "record wall time in metrics");
    cmd->add_flag("--no-log-timing", f.no_log_timing,
                  "write wall_ms as 0 for comparable logs");
    cmd->add_option("--max-shift", f.max_shift,
                    "augmentation translation range");
}

// True when the user actually passed a flag this subcommand registered.
static bool has(const CLI::App* cmd, const std::string& name) {
    const CLI::Option* o = cmd->get_option_no_throw(name);
    return o && o->count() > 0;
}

// Flags override whatever the config file set.
static RunConfig resolve(const CLI::App* cmd, const CommonFlags& f) {
    RunConfig rc;
    if (has(cmd, "--config")) rc = load_run_config(f.config_path);
    if (has(cmd, "--dataset")) rc.data.dataset = f.dataset;
    if (has(cmd, "--data-dir")) rc.data.dir = f.data_dir;
    if (has(cmd, "--train-limit")) rc.data.train_limit = f.train_limit;
    if (has(cmd, "--test-limit")) rc.data.test_limit = f.test_limit;
    if (has(cmd, "--synth-count")) rc.data.synth_count = f.synth_count;
    if (has(cmd, "--seed")) {
        rc.seed = f.seed;
        rc.train.seed = f.seed;
    }
    if (has(cmd, "--output-dir")) rc.output_dir = f.output_dir;
    if (has(cmd, "--threads")) rc.train.threads = f.threads;
    if (has(cmd, "--depth")) rc.network.depth = f.depth;
    if (has(cmd, "--max-attributes"))
        rc.network.max_attributes = f.max_attributes;
    if (has(cmd, "--rank")) rc.network.rank = f.rank;
    if (has(cmd, "--spatial-size")) rc.network.spatial_size = f.spatial_size;
    if (has(cmd, "--num-classes")) rc.network.num_classes = f.num_classes;
    if (has(cmd, "--stride-depths")) rc.network.stride_depths = f.stride_depths;
    if (has(cmd, "--attr-support")) {
        rc.network.attr_support_a =
            static_cast<std::size_t>(f.attr_support[0]);
        rc.network.attr_support_b =
            static_cast<std::size_t>(f.attr_support[1]);
    }
    if (has(cmd, "--boundary")) {
        if (f.boundary == "zero_pad")
            rc.network.boundary = BoundaryMode::ZeroPad;
        else if (f.boundary == "periodic")
            rc.network.boundary = BoundaryMode::Periodic;
        else
            throw config_error("--boundary must be zero_pad|periodic");
    }
    if (has(cmd, "--variant")) {
        if (f.variant == "standard") rc.network.variant = Variant::Standard;
        else if (f.variant == "plus") rc.network.variant = Variant::Plus;
        else throw config_error("--variant must be standard|plus");
    }
    if (has(cmd, "--epochs")) rc.train.epochs = f.epochs;
    if (has(cmd, "--batch-size")) rc.train.batch_size = f.batch_size;
    if (has(cmd, "--lr")) rc.train.base_lr = f.base_lr;
    if (has(cmd, "--decay-period")) rc.train.decay_period = f.decay_period;
    if (has(cmd, "--decay-factor")) rc.train.decay_factor = f.decay_factor;
    if (has(cmd, "--momentum")) rc.train.momentum = f.momentum;
    if (has(cmd, "--weight-decay")) rc.train.weight_decay = f.weight_decay;
    if (has(cmd, "--checkpoint-every"))
        rc.train.checkpoint_every = f.checkpoint_every;
    if (has(cmd, "--augment")) rc.train.augment = true;
    if (has(cmd, "--no-augment")) rc.train.augment = false;
    if (has(cmd, "--log-timing")) rc.train.log_timing = true;
    if (has(cmd, "--no-log-timing")) rc.train.log_timing = false;
    if (has(cmd, "--max-shift")) rc.train.max_shift = f.max_shift;
    if (rc.train.threads < 1)
        throw config_error("threads must be >= 1");
    return rc;
}

int main(int argc, char** argv) {
    CLI::App app{"multiscale attribute-convolution networks"};
    app.require_subcommand(1);

    CommonFlags tf, ef, pf, af;
    std::string eval_ckpt, eval_split = "test";
    int eval_batch = 100;
    std::string an_ckpt, an_split = "test", an_out = "analysis_out";
    int an_depth = 0, an_width = 2, an_queries = 200, an_pgm = 0;
    std::vector<int> an_taus{1};
    bool an_probe = false;

    CLI::App* t = app.add_subcommand("train", "train a network");
    add_common_flags(t, tf, true, true);

    CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint");
    e->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    e->add_option("--split", eval_split, "train|test");
    e->add_option("--batch-size", eval_batch, "evaluation batch size");
    add_common_flags(e, ef, false, false);

    CLI::App* p = app.add_subcommand("params", "print the parameter count");
    add_common_flags(p, pf, true, false);

    CLI::App* a = app.add_subcommand(
        "analyze", "attribute-translation retrieval on a checkpoint");
    a->add_option("--checkpoint", an_ckpt, "checkpoint file")->required();
    a->add_option("--split", an_split, "train|test");
    a->add_option("--depth", an_depth, "layer to summarize (default J-1)");
    a->add_option("--tau", an_taus, "translation sizes (repeatable)");
    a->add_option("--width", an_width, "box smoothing width");
    a->add_option("--queries", an_queries, "number of query images");
    a->add_option("--pgm", an_pgm, "dump first N arrays as PGM");
    a->add_flag("--probe", an_probe, "also run the covariance probe");
    a->add_option("--analysis-dir", an_out, "where analysis outputs go");
    add_common_flags(a, af, false, false);

    CLI::App* s = app.add_subcommand("selftest", "built-in correctness checks");
    (void)s;

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (t->parsed()) return cmd_train(resolve(t, tf));
        if (e->parsed()) {
            if (eval_split != "train" && eval_split != "test")
                throw config_error("--split must be train|test");
            return cmd_eval(eval_ckpt, resolve(e, ef), eval_split, eval_batch);
        }
        if (p->parsed()) return cmd_params(resolve(p, pf));
        if (a->parsed()) {
            if (an_split != "train" && an_split != "test")
                throw config_error("--split must be train|test");
            return cmd_analyze(an_ckpt, resolve(a, af), an_split, an_depth,
                               an_taus, an_width, an_queries, an_pgm,
                               an_probe, an_out);
        }
        if (s->parsed()) return selftest::run_all();
    } catch (const config_error& err) {
        std::fprintf(stderr, "config error: %s\n", err.what());
        return 2;
    } catch (const data_error& err) {
        std::fprintf(stderr, "data error: %s\n", err.what());
        return 3;
    } catch (const numeric_error& err) {
        std::fprintf(stderr, "numeric failure: %s\n", err.what());
        return 4;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 3;
    }
    return 2;
}

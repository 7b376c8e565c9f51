// cgt command-line interface: pretrain / classify / cluster / fairness /
// ablate / sweep over TSV dataset bundles, emitting one JSON record per run
// and a CSV fairness table for classification tasks.

#include <cgt/config.hpp>
#include <cgt/dataset.hpp>
#include <cgt/record.hpp>
#include <cgt/training.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace cgt;

struct TaskOutput {
    nlohmann::json metrics;
    nlohmann::json curves;
    FairnessReport fairness;
    bool has_fairness = false;
    double headline = std::numeric_limits<double>::quiet_NaN();  // accuracy or -loss, for summaries
};

nlohmann::json breakdown_curves(const std::vector<LossBreakdown>& hist) {
    nlohmann::json total = nlohmann::json::array(), trans = nlohmann::json::array(),
                   feat = nlohmann::json::array(), bce = nlohmann::json::array();
    for (const auto& b : hist) {
        total.push_back(b.total);
        trans.push_back(b.l1_transition);
        feat.push_back(b.l1_feature);
        bce.push_back(b.l2_bce);
    }
    return nlohmann::json{{"ssl_total", total},
                          {"ssl_transition", trans},
                          {"ssl_feature", feat},
                          {"ssl_bce", bce}};
}

TaskOutput run_task(const std::string& task, const Graph& g, const TrainConfig& cfg) {
    TaskOutput out;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);

    if (task == "pretrain") {
        PretrainResult pre = pretrain(pg, params, cfg);
        out.curves = breakdown_curves(pre.history);
        out.metrics["epochs_run"] = pre.epochs_run;
        out.metrics["diverged"] = pre.diverged;
        if (!pre.history.empty()) {
            out.metrics["initial_loss"] = pre.history.front().total;
            out.metrics["final_loss"] = pre.history.back().total;
            out.headline = -pre.history.back().total;
        }
        return out;
    }
    if (task == "classify" || task == "fairness") {
        if (!g.labels) throw std::runtime_error(task + " requires a labels file");
        nlohmann::json pre_curves;
        if (cfg.use_pretrain) {
            PretrainResult pre = pretrain(pg, params, cfg);
            pre_curves = breakdown_curves(pre.history);
            if (pre.diverged) out.metrics["pretrain_diverged"] = true;
        }
        Split sp = split(g.n, g.labels, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed);
        ClassifyResult res = finetune_classify(pg, params, cfg, sp);
        out.metrics["test_accuracy"] = res.test_accuracy;
        out.metrics["best_val_accuracy"] = res.best_val_accuracy;
        out.metrics["best_epoch"] = res.best_epoch;
        out.metrics["epochs_run"] = res.epochs_run;
        out.metrics["diverged"] = res.diverged;
        out.metrics["split_sizes"] = {sp.train.size(), sp.val.size(), sp.test.size()};
        out.metrics["stratified"] = sp.stratified;
        out.metrics["fairness"] = fairness_to_json(res.fairness);
        out.curves = nlohmann::json{{"train_loss", res.train_loss_history},
                                    {"val_accuracy", res.val_acc_history}};
        if (!pre_curves.is_null()) out.curves["pretrain"] = pre_curves;
        out.fairness = res.fairness;
        out.has_fairness = true;
        out.headline = res.test_accuracy;
        return out;
    }
    if (task == "cluster") {
        ClusterResult res = train_cluster(pg, params, cfg);
        out.metrics["conductance"] = res.conductance_pct;
        out.metrics["modularity"] = res.modularity_pct;
        out.metrics["empty_clusters"] = res.empty_clusters;
        out.metrics["diverged"] = res.diverged;
        out.curves = nlohmann::json{{"joint_loss", res.joint_loss_history}};
        if (!res.ssl_history.empty()) out.curves["pretrain"] = breakdown_curves(res.ssl_history);
        out.headline = res.modularity_pct;
        return out;
    }
    throw std::runtime_error("unknown task " + task);
}

void print_fairness(const FairnessReport& rep) {
    std::printf("  %-10s %10s %10s %8s\n", "bucket", "error(%)", "bias(%)", "nodes");
    for (const auto& r : rep.rows)
        std::printf("  d<=%-7d %10.4f %+10.4f %8zu\n", r.threshold, r.error_pct, r.bias_pct, r.count);
    std::printf("  %-10s %10.4f\n", "overall", rep.overall_error_pct);
    for (int t : rep.omitted_thresholds)
        std::printf("  d<=%-7d (no test nodes in bucket, row omitted)\n", t);
}

struct RunSummary {
    std::string run_id;
    double headline;
};

/// Executes `repeats` runs of one task variant, writing a record per run.
std::vector<RunSummary> run_repeated(const std::string& task, const Graph& g, const RunOptions& base,
                                     const std::string& tag, bool verbose_fairness) {
    std::vector<RunSummary> summaries;
    const std::string dsname = base.dataset.name.empty() ? "data" : base.dataset.name;
    for (int r = 0; r < base.repeats; ++r) {
        RunOptions opts = base;
        opts.train.seed = base.train.seed + static_cast<std::uint64_t>(r);
        const auto t0 = std::chrono::steady_clock::now();
        TaskOutput res = run_task(task, g, opts.train);
        const auto t1 = std::chrono::steady_clock::now();

        MetricsRecord rec;
        rec.task = task;
        rec.seed = opts.train.seed;
        rec.run_id = task + "_" + dsname + (tag.empty() ? "" : "_" + tag) + "_s" +
                     std::to_string(opts.train.seed);
        rec.config = config_to_json(opts);
        rec.metrics = res.metrics;
        rec.curves = res.curves;
        rec.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
        write_record(rec, base.out_dir);
        if (res.has_fairness) write_fairness_csv(res.fairness, base.out_dir, rec.run_id);

        std::printf("[%s] seed=%llu", rec.run_id.c_str(),
                    static_cast<unsigned long long>(opts.train.seed));
        if (std::isfinite(res.headline)) std::printf("  headline=%.4f", res.headline);
        std::printf("  wall=%.1fs\n", rec.wall_seconds);
        if (verbose_fairness && res.has_fairness) print_fairness(res.fairness);
        summaries.push_back({rec.run_id, res.headline});
    }
    if (summaries.size() > 1) {
        double mean = 0.0;
        for (const auto& s : summaries) mean += s.headline;
        mean /= static_cast<double>(summaries.size());
        double var = 0.0;
        for (const auto& s : summaries) var += (s.headline - mean) * (s.headline - mean);
        var /= static_cast<double>(summaries.size() - 1);
        std::printf("[%s%s] mean=%.4f +- %.4f over %zu runs\n", task.c_str(),
                    tag.empty() ? "" : ("_" + tag).c_str(), mean, std::sqrt(var), summaries.size());
    }
    return summaries;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"community-aware graph transformer"};
    app.require_subcommand(1);

    std::string config_path, out_dir_flag, sweep_param, sweep_values;
    int repeats_flag = 0;
    std::vector<std::string> commands = {"pretrain", "classify", "cluster", "fairness", "ablate", "sweep"};
    for (const auto& name : commands) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON config file")->required();
        sub->add_option("--repeats", repeats_flag, "number of seeded repeats");
        sub->add_option("--out-dir", out_dir_flag, "output directory for records");
        if (name == "sweep") {
            sub->add_option("--param", sweep_param, "config key to sweep")->required();
            sub->add_option("--values", sweep_values, "comma-separated values")->required();
        }
        sub->allow_extras();
    }

    try {
        app.parse(argc, argv);
        CLI::App* sub = app.get_subcommands().front();
        const std::string command = sub->get_name();

        RunOptions opts = parse_config_file(config_path);
        for (std::string extra : sub->remaining()) {
            if (extra.rfind("--", 0) != 0)
                throw std::invalid_argument("unrecognized argument '" + extra + "' (expected --key=value)");
            extra = extra.substr(2);
            const auto eq = extra.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("override '" + extra + "' must have the form key=value");
            apply_override(opts, extra.substr(0, eq), extra.substr(eq + 1));
        }
        if (repeats_flag > 0) opts.repeats = repeats_flag;
        if (!out_dir_flag.empty()) opts.out_dir = out_dir_flag;
        apply_env_seed(opts);
        if (opts.repeats < 1) throw std::invalid_argument("repeats must be >= 1");
        opts.train.validate();
        std::filesystem::create_directories(opts.out_dir);

        ParseReport rep;
        Graph g = load_dataset(opts.dataset, &rep);
        std::printf("loaded %s: %zu nodes, %zu edges (%zu duplicate, %zu self-loop lines dropped)\n",
                    opts.dataset.name.empty() ? "dataset" : opts.dataset.name.c_str(), rep.nodes,
                    rep.edges_kept, rep.duplicates_dropped, rep.self_loops_dropped);

        if (command == "pretrain" || command == "classify" || command == "cluster" ||
            command == "fairness") {
            run_repeated(command == "fairness" ? "fairness" : command, g, opts, "",
                         command == "fairness");
        } else if (command == "ablate") {
            for (int bits = 0; bits < 8; ++bits) {
                RunOptions v = opts;
                v.train.use_pretrain = bits & 4;
                v.train.use_augmentation = bits & 2;
                v.train.use_community_attention = bits & 1;
                char tag[32];
                std::snprintf(tag, sizeof(tag), "pre%d_aug%d_att%d", v.train.use_pretrain ? 1 : 0,
                              v.train.use_augmentation ? 1 : 0, v.train.use_community_attention ? 1 : 0);
                run_repeated("classify", g, v, tag, false);
            }
        } else if (command == "sweep") {
            const std::vector<std::string> values = split_csv(sweep_values);
            if (values.empty()) throw std::invalid_argument("sweep: no values given");
            for (const auto& value : values) {
                RunOptions v = opts;
                apply_override(v, sweep_param, value);
                std::string tag = sweep_param + value;
                for (char& c : tag)
                    if (c == '.') c = 'p';
                run_repeated("classify", g, v, tag, false);
            }
        }
        return 0;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

// SPDX-License-Identifier: Apache-2.0

// Command-line front end: every experiment writes
// experiment,seed,step,layer,head,policy,metric,value CSV.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "weightedkv/weightedkv.hpp"

namespace {

struct Options {
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds;
    std::size_t threads = 1;
    std::string out = "-";

    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t d_head = 16;
    std::size_t vocab = 256;
    std::string token_file;
    std::size_t steps = 256;

    std::vector<std::string> policies;
    std::size_t budget = 64;
    std::size_t sinks = 4;
    std::size_t recent = 16;
    std::size_t cam_window = 4;
    std::uint64_t cam_seed = 42;

    std::string source = "model";
    std::size_t rank = 2;
    double noise = 0.0;
    std::size_t peak_index = 0;

    std::size_t merge_step = 100;
    std::size_t window = 800;
    std::size_t sweep_points = 16;

    std::string trace;
};

const std::map<std::string, wkv::TraceSource> kSources = {
    {"model", wkv::TraceSource::ToyModel},
    {"isotropic", wkv::TraceSource::IsotropicGaussian},
    {"lowrank", wkv::TraceSource::LowRankValues},
    {"peaked", wkv::TraceSource::PeakedAttention},
};

void add_run_flags(CLI::App* app, Options& o) {
    app->set_config("--config", "", "Read flags from a key=value config file");
    app->add_option("--seed", o.seed, "Seed for a single run");
    app->add_option("--seeds", o.seeds, "List of seeds (overrides --seed)");
    app->add_option("--threads", o.threads, "Worker threads across seeds")->check(CLI::PositiveNumber);
    app->add_option("--out", o.out, "Output path, '-' for stdout");
}

void add_model_flags(CLI::App* app, Options& o) {
    app->add_option("--layers", o.layers, "Toy model layers")->check(CLI::PositiveNumber);
    app->add_option("--heads", o.heads, "Heads per layer")->check(CLI::PositiveNumber);
    app->add_option("--d-head", o.d_head, "Per-head width (even)")->check(CLI::PositiveNumber);
    app->add_option("--vocab", o.vocab, "Vocabulary size")->check(CLI::PositiveNumber);
    app->add_option("--token-file", o.token_file, "Whitespace-separated token ids instead of random tokens");
    app->add_option("--steps", o.steps, "Sequence length")->check(CLI::PositiveNumber);
}

void add_policy_flags(CLI::App* app, Options& o, bool many) {
    app->add_option("--policy", o.policies,
                    many ? "Policies to compare (default: all)"
                         : "FullKV, StreamingLLM, H2O, TOVA, CaM, WeightedKV or EvictionVariant");
    app->add_option("--budget", o.budget, "Cache budget m");
    app->add_option("--sinks", o.sinks, "Protected leading tokens");
    app->add_option("--recent", o.recent, "Protected trailing tokens");
    app->add_option("--cam-window", o.cam_window, "CaM spread window");
    app->add_option("--cam-seed", o.cam_seed, "CaM random seed");
}

void add_source_flags(CLI::App* app, Options& o) {
    app->add_option("--source", o.source, "model, isotropic, lowrank or peaked")
        ->check(CLI::IsMember({"model", "isotropic", "lowrank", "peaked"}));
    app->add_option("--rank", o.rank, "Value rank for the lowrank source");
    app->add_option("--noise", o.noise, "Noise scale for the lowrank source");
    app->add_option("--peak-index", o.peak_index, "Attended token for the peaked source");
}

wkv::PolicyConfig policy_config(const Options& o, const std::string& name) {
    wkv::PolicyConfig p;
    p.kind = wkv::parse_policy(name);
    p.budget = o.budget;
    p.sink_count = o.sinks;
    p.recent_count = o.recent;
    p.cam_window = o.cam_window;
    p.rng_seed = o.cam_seed;
    return wkv::effective_policy(p);
}

wkv::ExperimentConfig experiment_config(const Options& o) {
    wkv::ExperimentConfig c;
    c.model.layers = o.layers;
    c.model.heads = o.heads;
    c.model.d_head = o.d_head;
    c.model.vocab = o.vocab;
    if (!o.token_file.empty()) {
        c.model.sequence_source = wkv::SequenceSource::FileTokens;
        c.token_file = o.token_file;
    }
    c.seeds = o.seeds.empty() ? std::vector<std::uint64_t>{o.seed} : o.seeds;
    c.threads = o.threads;
    c.steps = o.steps;
    c.source = kSources.at(o.source);
    c.synthetic.rank = o.rank;
    c.synthetic.noise = o.noise;
    c.synthetic.peak_index = o.peak_index;
    c.merge_step = o.merge_step;
    c.window = o.window;
    c.sweep_points = o.sweep_points;
    if (o.policies.empty()) {
        for (auto kind : wkv::kAllPolicies) {
            c.policies.push_back(policy_config(o, std::string(wkv::to_string(kind))));
        }
    } else {
        for (const auto& name : o.policies) {
            c.policies.push_back(policy_config(o, name));
        }
    }
    return c;
}

void emit(const Options& o, const std::vector<wkv::MetricRow>& rows) {
    if (o.out == "-") {
        wkv::write_csv(std::cout, rows);
        std::cout.flush();
        return;
    }
    std::ofstream os(o.out);
    if (!os) {
        throw wkv::Error("cannot open '" + o.out + "' for writing");
    }
    wkv::write_csv(os, rows);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache compression experiments: WeightedKV and baseline policies"};
    app.require_subcommand(1);
    Options o;

    auto* spectrum = app.add_subcommand("spectrum", "Normalized singular values of per-head K and V");
    add_run_flags(spectrum, o);
    add_model_flags(spectrum, o);
    add_source_flags(spectrum, o);

    auto* perturb = app.add_subcommand("perturb", "Attention drift after merging one token per head");
    add_run_flags(perturb, o);
    add_model_flags(perturb, o);
    perturb->add_option("--merge-step", o.merge_step, "Tokens decoded before the merge");
    perturb->add_option("--window", o.window, "Follow-up steps compared after the merge");

    auto* diverge = app.add_subcommand("diverge", "Final-layer output divergence from full attention per policy");
    add_run_flags(diverge, o);
    add_model_flags(diverge, o);
    add_policy_flags(diverge, o, true);

    auto* golden = app.add_subcommand("golden-fig3", "Replay the budget-4 toy compression trace and check it");
    golden->set_config("--config");
    golden->add_option("--out", o.out, "Output path, '-' for stdout");

    auto* ideal = app.add_subcommand("ideal-check", "Exactness of the ideal merge and the convex approximation gap");
    add_run_flags(ideal, o);
    ideal->add_option("--sweep-points", o.sweep_points, "Points in the evicted-logit sweep");

    auto* gen = app.add_subcommand("gen-trace", "Write per-step q/k/v as .qkv.jsonl");
    add_run_flags(gen, o);
    add_model_flags(gen, o);
    add_source_flags(gen, o);
    add_policy_flags(gen, o, false);

    auto* replay = app.add_subcommand("replay", "Replay a .qkv.jsonl trace under one policy");
    add_run_flags(replay, o);
    add_policy_flags(replay, o, false);
    replay->add_option("--trace", o.trace, "Input .qkv.jsonl")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (spectrum->parsed()) {
            emit(o, wkv::run_spectrum(experiment_config(o)));
        } else if (perturb->parsed()) {
            emit(o, wkv::run_perturbation(experiment_config(o)));
        } else if (diverge->parsed()) {
            emit(o, wkv::run_policy_divergence(experiment_config(o)));
        } else if (golden->parsed()) {
            emit(o, wkv::run_fig3_golden());
        } else if (ideal->parsed()) {
            emit(o, wkv::run_ideal_check(experiment_config(o)));
        } else if (gen->parsed()) {
            if (o.policies.size() > 1) {
                throw wkv::Error("gen-trace takes at most one --policy");
            }
            wkv::ExperimentConfig c = experiment_config(o);
            c.policies.clear();
            std::optional<wkv::PolicyConfig> policy;
            if (!o.policies.empty()) {
                policy = policy_config(o, o.policies.front());
                policy->validate();
            }
            wkv::QKVTrace trace;
            if (c.source == wkv::TraceSource::ToyModel) {
                trace = wkv::generate_trace(wkv::model_for_seed(c, c.seeds.front()),
                                            wkv::tokens_for_seed(c, c.seeds.front(), c.steps), policy);
            } else {
                if (policy) {
                    throw wkv::Error("gen-trace: --policy only applies to the model source");
                }
                trace = wkv::trace_for_seed(c, c.seeds.front());
            }
            if (o.out == "-") {
                wkv::write_trace_jsonl(std::cout, trace);
            } else {
                wkv::save_trace(o.out, trace);
            }
        } else if (replay->parsed()) {
            if (o.policies.size() != 1) {
                throw wkv::Error("replay takes exactly one --policy");
            }
            emit(o, wkv::run_replay(wkv::load_trace(o.trace), policy_config(o, o.policies.front())));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

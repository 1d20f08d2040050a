#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "coupling_probe/checkpoint.hpp"
#include "coupling_probe/experiments.hpp"
#include "coupling_probe/report.hpp"
#include "coupling_probe/trajectory.hpp"

namespace cprobe::cli {

namespace fs = std::filesystem;

namespace {

/// Characters of raw-text prompts map to their index here.
constexpr std::string_view kToyAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";

struct KeySpec {
    std::string key;
    std::string fallback;  // empty means "no default"
    std::string help;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string f;
    while (std::getline(ss, f, sep)) {
        f = trim(f);
        if (!f.empty()) out.push_back(f);
    }
    return out;
}

[[noreturn]] void bad_config(const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); }

/// Resolved settings: defaults, then the config file, then explicit flags.
class Settings {
public:
    Settings(const std::vector<KeySpec>& specs, std::ostream& err) : specs_(specs), err_(err) {
        for (const auto& s : specs) {
            if (!s.fallback.empty()) values_[s.key] = s.fallback;
        }
    }

    void load_file(const fs::path& path) {
        std::ifstream in(path);
        if (!in) bad_config("cannot open config file " + path.string());
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                bad_config(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
            }
            const std::string key = trim(line.substr(0, eq));
            if (!known(key)) {
                err_ << "warning: " << path.string() << ":" << lineno << ": unknown key '" << key << "' ignored\n";
                continue;
            }
            values_[key] = trim(line.substr(eq + 1));
        }
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) bad_config("missing required setting '" + key + "'");
        return it->second;
    }

    long integer(const std::string& key) const {
        const std::string s = str(key);
        long v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_config(key + ": '" + s + "' is not an integer");
        return v;
    }

    std::uint64_t seed(const std::string& key) const {
        const std::string s = str(key);
        std::uint64_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_config(key + ": '" + s + "' is not a seed");
        return v;
    }

    double real(const std::string& key) const { return parse_real(key, str(key)); }

    bool boolean(const std::string& key) const {
        const std::string s = str(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        bad_config(key + ": '" + s + "' is not a boolean");
    }

    std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        for (const auto& f : split_list(str(key))) out.push_back(parse_real(key, f));
        return out;
    }

    std::vector<long> integers(const std::string& key) const {
        std::vector<long> out;
        for (const auto& f : split_list(str(key))) {
            long v = 0;
            auto r = std::from_chars(f.data(), f.data() + f.size(), v);
            if (r.ec != std::errc() || r.ptr != f.data() + f.size()) bad_config(key + ": '" + f + "' is not an integer");
            out.push_back(v);
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : values_) j[k] = v;
        return j;
    }

private:
    bool known(const std::string& key) const {
        return std::any_of(specs_.begin(), specs_.end(), [&](const KeySpec& s) { return s.key == key; });
    }

    static double parse_real(const std::string& key, const std::string& s) {
        if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
        double v = 0.0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_config(key + ": '" + s + "' is not a number");
        return v;
    }

    const std::vector<KeySpec>& specs_;
    std::ostream& err_;
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Key sets

const std::vector<KeySpec>& analysis_keys() {
    static const std::vector<KeySpec> keys = {
        {"checkpoint_path", "", "tensor-bundle manifest of the model"},
        {"prompts_path", "", "one prompt per line: comma-separated ids or toy-alphabet text"},
        {"K_mode", "ratio(0.1)", "ratio(r) for K = round(r * d_model), or fixed(k)"},
        {"p", "1", "norm order of the spectrum normaliser (number >= 1 or inf)"},
        {"layer_range", "", "first:last block (1-based, inclusive); all blocks when empty"},
        {"token_scheme", "depthwise,self,fixed_input,fixed_output", "coupling schemes to run"},
        {"output_dir", "", "directory for the emitted files"},
        {"seed", "0", "seed of the perturbation probe"},
        {"jobs", "1", "worker threads for Jacobians"},
        {"noise_scales", "0,0.01,0.1,1,10", "perturbation probe noise scales"},
        {"entropy_final_ln", "true", "apply the final LN before unembedding intermediate layers"},
    };
    return keys;
}

std::vector<KeySpec> run_keys() {
    return {
        {"task", "markov_chain(1,16)", "markov_chain(order,alphabet), copy_task(span[,alphabet]) or modular_sum(modulus)"},
        {"task_seed", "0", "seed of the task generator"},
        {"train_size", "4096", "training sequences"},
        {"val_size", "64", "held-out sequences"},
        {"seq_len", "33", "markov sequence length"},
        {"sharpness", "2.0", "std of the markov transition logits"},
        {"n_layers", "2", ""},
        {"d_model", "16", ""},
        {"n_heads", "2", ""},
        {"d_ff", "", "defaults to 4 * d_model"},
        {"d_vocab", "", "defaults to the task vocabulary"},
        {"max_seq", "", "defaults to the task sequence length"},
        {"pos_encoding", "rope", "rope, sinusoidal or none"},
        {"ln_epsilon", "1e-5", ""},
        {"final_ln", "true", ""},
        {"lr", "3e-4", "Adam learning rate"},
        {"beta1", "0.9", ""},
        {"beta2", "0.999", ""},
        {"eps", "1e-8", ""},
        {"weight_decay", "0", "decoupled weight decay"},
        {"steps", "1000", ""},
        {"batch_size", "8", ""},
        {"checkpoint_steps", "default", "comma-separated steps, or 'default' for the power-of-two grid"},
        {"seed", "0", "seed of initialisation and batch order"},
        {"block_skip", "0", "stochastic block-skip rate"},
        {"eval_every", "50", ""},
        {"output_dir", "", "directory for checkpoints and reports"},
        {"jobs", "1", "worker threads for Jacobians"},
    };
}

const std::vector<KeySpec>& train_keys() {
    static const std::vector<KeySpec> keys = run_keys();
    return keys;
}

std::vector<KeySpec> with_analysis(std::vector<KeySpec> keys) {
    keys.push_back({"probe_count", "4", "validation sequences in the probe-prompt set"});
    keys.push_back({"probe_length", "16", "tokens per probe prompt"});
    keys.push_back({"K_mode", "ratio(0.1)", "ratio(r) or fixed(k)"});
    keys.push_back({"p", "1", "norm order of the spectrum normaliser"});
    return keys;
}

const std::vector<KeySpec>& emergence_keys() {
    static const std::vector<KeySpec> keys = [] {
        auto k = with_analysis(run_keys());
        k.push_back({"self_coupling", "true", "also measure token self-coupling"});
        return k;
    }();
    return keys;
}

const std::vector<KeySpec>& sweep_keys() {
    static const std::vector<KeySpec> keys = [] {
        auto k = with_analysis(run_keys());
        k.push_back({"block_skip_rates", "0,0.025,0.05", "swept block-skip rates"});
        k.push_back({"seeds", "1,2", "training seeds crossed with the rates"});
        return k;
    }();
    return keys;
}

// ---------------------------------------------------------------------------
// Resolution helpers

Eigen::Index resolve_k(const std::string& mode, int d_model) {
    const std::string m = trim(mode);
    auto inner = [&](const std::string& prefix) -> std::optional<std::string> {
        if (m.rfind(prefix + "(", 0) == 0 && m.back() == ')') return m.substr(prefix.size() + 1, m.size() - prefix.size() - 2);
        return std::nullopt;
    };
    Eigen::Index k = 0;
    if (auto r = inner("ratio")) {
        double ratio = 0.0;
        try {
            ratio = std::stod(*r);
        } catch (...) {
            bad_config("K_mode: bad ratio '" + *r + "'");
        }
        if (!(ratio > 0.0 && ratio <= 1.0)) bad_config("K_mode: ratio must lie in (0, 1]");
        k = std::max<Eigen::Index>(1, std::llround(ratio * d_model));
    } else if (auto f = inner("fixed")) {
        try {
            k = std::stol(*f);
        } catch (...) {
            bad_config("K_mode: bad k '" + *f + "'");
        }
    } else {
        bad_config("K_mode must be ratio(r) or fixed(k), got '" + m + "'");
    }
    if (k < 1 || k > d_model) throw Error(ErrorCode::InvalidK, "K = " + std::to_string(k) + " outside [1, d_model]");
    return k;
}

double resolve_p(const Settings& s) {
    const double p = s.real("p");
    if (!(p >= 1.0)) bad_config("p must be >= 1 or inf");
    return p;
}

int resolve_jobs(const Settings& s) {
    long jobs = s.integer("jobs");
    if (const char* env = std::getenv("COUPLING_PROBE_JOBS"); env && *env) {
        const std::string e = env;
        long v = 0;
        auto r = std::from_chars(e.data(), e.data() + e.size(), v);
        if (r.ec != std::errc() || r.ptr != e.data() + e.size()) bad_config("COUPLING_PROBE_JOBS is not an integer");
        jobs = v;
    }
    if (jobs < 1) bad_config("jobs must be >= 1");
    return static_cast<int>(jobs);
}

std::vector<Sequence> read_prompts(const fs::path& path, int d_vocab) {
    std::ifstream in(path);
    if (!in) bad_config("cannot open prompts file " + path.string());
    std::vector<Sequence> prompts;
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        const auto fields = split_list(line);
        bool ids = !fields.empty();
        Sequence seq;
        for (const auto& f : fields) {
            int v = 0;
            auto r = std::from_chars(f.data(), f.data() + f.size(), v);
            if (r.ec != std::errc() || r.ptr != f.data() + f.size()) {
                ids = false;
                break;
            }
            seq.push_back(v);
        }
        if (!ids) {
            seq.clear();
            for (char ch : line) {
                const auto pos = kToyAlphabet.find(ch);
                if (pos == std::string_view::npos) {
                    throw Error(ErrorCode::UnknownToken, std::string("character '") + ch + "' is not in the toy alphabet");
                }
                seq.push_back(static_cast<int>(pos));
            }
        }
        for (int t : seq) {
            if (t < 0 || t >= d_vocab) throw Error(ErrorCode::UnknownToken, "token id " + std::to_string(t));
        }
        prompts.push_back(std::move(seq));
    }
    if (prompts.empty()) throw Error(ErrorCode::EmptyPrompt, "prompts file has no prompts");
    return prompts;
}

std::pair<int, int> resolve_layers(const Settings& s, int n_layers) {
    const std::string r = s.has("layer_range") ? trim(s.str("layer_range")) : "";
    if (r.empty()) return {1, n_layers};
    const auto colon = r.find(':');
    if (colon == std::string::npos) bad_config("layer_range must be first:last");
    int a = 0, b = 0;
    try {
        a = std::stoi(r.substr(0, colon));
        b = std::stoi(r.substr(colon + 1));
    } catch (...) {
        bad_config("layer_range must be first:last");
    }
    if (a < 1 || b > n_layers || a > b) bad_config("layer_range outside 1:" + std::to_string(n_layers));
    return {a, b};
}

fs::path prepare_output(const Settings& s) {
    const fs::path dir = s.str("output_dir");
    if (dir.empty()) bad_config("output_dir is empty");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) bad_config("cannot create output_dir " + dir.string());
    return dir;
}

struct RunSetup {
    SyntheticTask task;
    TaskData data;
    TrainRun run;
};

RunSetup resolve_run(const Settings& s) {
    RunSetup r;
    r.task.kind = parse_task_kind(s.str("task"));
    if (auto* mc = std::get_if<MarkovChain>(&r.task.kind)) mc->sharpness = s.real("sharpness");
    r.task.seed = s.seed("task_seed");
    r.task.train_size = static_cast<int>(s.integer("train_size"));
    r.task.val_size = static_cast<int>(s.integer("val_size"));
    r.task.seq_len = static_cast<int>(s.integer("seq_len"));
    r.task.validate();

    ModelConfig& c = r.run.config;
    c.n_layers = static_cast<int>(s.integer("n_layers"));
    c.d_model = static_cast<int>(s.integer("d_model"));
    c.n_heads = static_cast<int>(s.integer("n_heads"));
    c.d_ff = s.has("d_ff") ? static_cast<int>(s.integer("d_ff")) : 4 * c.d_model;
    c.d_vocab = s.has("d_vocab") ? static_cast<int>(s.integer("d_vocab")) : r.task.vocab();
    c.max_seq = s.has("max_seq") ? static_cast<int>(s.integer("max_seq")) : r.task.sequence_length();
    c.pos_encoding = parse_pos_encoding(s.str("pos_encoding"));
    c.ln_epsilon = s.real("ln_epsilon");
    c.final_ln = s.boolean("final_ln");

    r.run.optimizer = {s.real("lr"), s.real("beta1"), s.real("beta2"), s.real("eps"), s.real("weight_decay")};
    r.run.steps = static_cast<int>(s.integer("steps"));
    r.run.batch_size = static_cast<int>(s.integer("batch_size"));
    r.run.seed = s.seed("seed");
    r.run.block_skip = s.real("block_skip");
    r.run.eval_every = static_cast<int>(s.integer("eval_every"));
    const std::string cps = trim(s.str("checkpoint_steps"));
    if (cps == "default") {
        r.run.checkpoint_steps = default_checkpoint_steps(r.run.steps);
    } else {
        for (long v : s.integers("checkpoint_steps")) r.run.checkpoint_steps.push_back(static_cast<int>(v));
        if (r.run.checkpoint_steps.empty()) bad_config("checkpoint_steps is empty");
    }
    r.run.validate();
    r.data = generate_task(r.task);
    return r;
}

nlohmann::json manifest(const std::string& command, const Settings& s, const std::vector<std::string>& outputs) {
    return {{"command", command}, {"code_version", code_version()}, {"config", s.to_json()}, {"outputs", outputs}};
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_analyze(const Settings& s, std::ostream& out) {
    const fs::path ckpt = s.str("checkpoint_path");
    if (ckpt.empty() || !fs::exists(ckpt)) bad_config("checkpoint not found: " + ckpt.string());
    const fs::path prompts_path = s.str("prompts_path");
    if (prompts_path.empty() || !fs::exists(prompts_path)) bad_config("prompts file not found: " + prompts_path.string());
    const Checkpoint model = load_checkpoint(ckpt);
    const ModelConfig& c = model.config;
    const auto prompts = read_prompts(prompts_path, c.d_vocab);
    const Eigen::Index k = resolve_k(s.str("K_mode"), c.d_model);
    const double p = resolve_p(s);
    const auto [first, last] = resolve_layers(s, c.n_layers);
    const int jobs = resolve_jobs(s);
    const auto noise = s.reals("noise_scales");
    const bool entropy_ln = s.boolean("entropy_final_ln");
    const std::uint64_t seed = s.seed("seed");
    std::set<std::string> schemes;
    for (const auto& name : split_list(s.str("token_scheme"))) {
        if (name != "depthwise" && name != "self" && name != "fixed_input" && name != "fixed_output") {
            bad_config("unknown token_scheme '" + name + "'");
        }
        schemes.insert(name);
    }
    for (const auto& pr : prompts) {
        if (static_cast<int>(pr.size()) > c.max_seq) {
            throw Error(ErrorCode::SequenceTooLong, "prompt of " + std::to_string(pr.size()) + " tokens");
        }
    }
    const fs::path dir = prepare_output(s);

    CsvWriter coupling_csv(dir / "coupling.csv", {"prompt", "kind", "l", "t1", "t2", "l_basis", "t1_basis", "t2_basis",
                                                  "K", "p", "m_K", "c_K"});
    CsvWriter traj_csv(dir / "trajectories.csv", {"prompt", "token", "lss", "ed", "mean_alpha"});
    CsvWriter norms_csv(dir / "norms.csv", {"prompt", "token", "layer", "norm"});
    CsvWriter entropy_csv(dir / "entropy.csv", {"prompt", "layer", "entropy"});
    CsvWriter pca_csv(dir / "pca.csv", {"prompt", "token", "layer", "pc1", "pc2"});
    CsvWriter svals_csv(dir / "svals.csv", {"prompt", "layer", "rank", "value"});
    CsvWriter perturb_csv(dir / "perturb.csv", {"prompt", "scale", "cos_first", "cos_last"});

    std::vector<CouplingRecord> depth_records;
    std::vector<int> layers;
    for (int l = first; l <= last; ++l) layers.push_back(l);
    const bool all_tokens = schemes.count("self") || schemes.count("fixed_output");

    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
        const auto& prompt = prompts[pi];
        const HiddenTrace trace = forward_trace(prompt, c, model.weights);
        const int n = static_cast<int>(trace.tokens());
        const int final_tok = n - 1;

        std::vector<std::pair<int, int>> req;
        for (int l : layers) {
            if (all_tokens) {
                for (int t = 0; t < n; ++t) req.emplace_back(l, t);
            } else {
                req.emplace_back(l, final_tok);
                if (schemes.count("fixed_input") && final_tok != 0) req.emplace_back(l, 0);
            }
        }
        const JacobianMap jac = compute_jacobians(trace, req, c, model.weights, jobs);
        SpectralCache cache(jac, k);

        auto emit = [&](const std::vector<CouplingRecord>& recs) {
            for (const auto& r : recs) {
                coupling_csv.row(static_cast<int>(pi), to_string(r.kind), r.probe.layer, r.probe.t_in, r.probe.t_out,
                                 r.basis.layer, r.basis.t_in, r.basis.t_out, static_cast<long>(r.k), r.p, r.m, r.c);
            }
        };
        if (schemes.count("depthwise") && layers.size() > 1) {
            const auto dw = depthwise_coupling(cache, final_tok, p, layers);
            emit(dw.records);
            depth_records.insert(depth_records.end(), dw.records.begin(), dw.records.end());
        }
        for (int l : layers) {
            if (schemes.count("self")) emit(tokenwise_coupling(cache, SelfScheme{}, l, l, n, p));
            if (schemes.count("fixed_input")) emit(tokenwise_coupling(cache, FixedInputScheme{0}, l, l, n, p));
            if (schemes.count("fixed_output")) emit(tokenwise_coupling(cache, FixedOutputScheme{final_tok}, l, l, n, p));
        }

        for (int t = 0; t < n; ++t) {
            const TrajectoryMetrics m = trajectory_metrics(trace, t);
            traj_csv.row(static_cast<int>(pi), t, m.line_shape.lss, m.expo.ed, m.expo.alphas.mean());
            for (Eigen::Index l = 0; l < m.norms.size(); ++l) norms_csv.row(static_cast<int>(pi), t, static_cast<long>(l), m.norms(l));
        }
        const Vector h = logit_entropy_profile(trace, c, model.weights, entropy_ln);
        for (Eigen::Index l = 0; l < h.size(); ++l) entropy_csv.row(static_cast<int>(pi), static_cast<long>(l), h(l));
        if (n >= 2) {
            const PcaTrajectories pca = pca_trajectories(trace);
            for (int t = 0; t < n; ++t) {
                const Matrix& q = pca.projected[static_cast<std::size_t>(t)];
                for (Eigen::Index l = 0; l < q.rows(); ++l) {
                    pca_csv.row(static_cast<int>(pi), t, static_cast<long>(l), q(l, 0), q(l, 1));
                }
            }
        }
        for (const auto& r : singular_value_profile(jac, final_tok, layers, k)) {
            svals_csv.row(static_cast<int>(pi), r.layer, r.rank, r.value);
        }
        for (const auto& r : perturbation_probe(prompt, noise, c, model.weights, seed + pi)) {
            perturb_csv.row(static_cast<int>(pi), r.scale, r.cos_first, r.cos_last);
        }
    }

    std::vector<std::string> outputs = {"coupling.csv", "trajectories.csv", "norms.csv", "entropy.csv",
                                        "pca.csv",      "svals.csv",        "perturb.csv"};
    if (!depth_records.empty()) {
        const Matrix adj = adjacency_summary(depth_records, c.n_layers);
        write_json(adjacency_json(adj), dir / "adjacency.json");
        CsvWriter adj_csv(dir / "adjacency.csv", {"l", "l_basis", "mean_c"});
        for (Eigen::Index i = 0; i < adj.rows(); ++i)
            for (Eigen::Index j = 0; j < adj.cols(); ++j) adj_csv.row(static_cast<long>(i + 1), static_cast<long>(j + 1), adj(i, j));
        outputs.push_back("adjacency.json");
        outputs.push_back("adjacency.csv");
    }
    nlohmann::json m = manifest("analyze", s, outputs);
    m["resolved"] = {{"K", k}, {"p", std::isfinite(p) ? nlohmann::json(p) : nlohmann::json("inf")},
                     {"layers", layers}, {"seed", seed}, {"prompts", prompts}};
    m["checkpoint"] = {{"path", ckpt.string()}, {"config", config_to_json(c)}};
    write_json(m, dir / "manifest.json");
    out << "analyzed " << prompts.size() << " prompt(s) into " << dir.string() << "\n";
    return ok;
}

int cmd_train(const Settings& s, std::ostream& out) {
    RunSetup r = resolve_run(s);
    const fs::path dir = prepare_output(s);
    const TrainResult tr = train(r.run, r.task, r.data, dir);
    std::vector<std::string> outputs = {"loss.csv"};
    for (const auto& [step, path] : tr.checkpoint_files) outputs.push_back(path.filename().string());
    nlohmann::json m = manifest("train", s, outputs);
    m["task"] = describe(r.task);
    m["model"] = config_to_json(r.run.config);
    m["uniform_baseline"] = uniform_baseline(r.task);
    write_json(m, dir / "manifest.json");
    out << "trained " << r.run.steps << " steps, final val loss " << tr.loss.back().val_loss << "\n";
    return ok;
}

AnalysisOptions analysis_options(const Settings& s, int d_model) {
    AnalysisOptions o;
    o.k = resolve_k(s.str("K_mode"), d_model);
    o.p = resolve_p(s);
    o.jobs = resolve_jobs(s);
    return o;
}

int cmd_emergence(const Settings& s, std::ostream& out) {
    RunSetup r = resolve_run(s);
    const fs::path dir = prepare_output(s);
    AnalysisOptions o = analysis_options(s, r.run.config.d_model);
    o.self_coupling = s.boolean("self_coupling");
    const fs::path ckdir = dir / "checkpoints";
    const bool have_all = std::all_of(r.run.checkpoint_steps.begin(), r.run.checkpoint_steps.end(),
                                      [&](int step) { return fs::exists(checkpoint_path(ckdir, step)); });
    if (have_all) {
        out << "reusing checkpoints in " << ckdir.string() << "\n";
    } else {
        train(r.run, r.task, r.data, ckdir);
    }
    const auto rows = emergence_experiment(r.run, r.data, ckdir, o, static_cast<int>(s.integer("probe_count")),
                                           static_cast<int>(s.integer("probe_length")));
    write_emergence_csv(rows, dir / "emergence.csv");
    nlohmann::json m = manifest("emergence", s, {"emergence.csv", "checkpoints/"});
    m["task"] = describe(r.task);
    m["model"] = config_to_json(r.run.config);
    m["resolved"] = {{"K", o.k}, {"checkpoint_steps", r.run.checkpoint_steps}};
    write_json(m, dir / "manifest.json");
    for (const auto& row : rows) {
        out << "step " << row.step << ": depthwise c " << row.metrics.depthwise_coupling << ", lss " << row.metrics.lss
            << ", val loss " << row.val_loss << "\n";
    }
    return ok;
}

int cmd_sweep(const Settings& s, std::ostream& out) {
    RunSetup base = resolve_run(s);
    const fs::path dir = prepare_output(s);
    const AnalysisOptions o = analysis_options(s, base.run.config.d_model);
    std::vector<TrainRun> runs;
    std::vector<double> hyper;
    for (double rate : s.reals("block_skip_rates")) {
        for (long seed : s.integers("seeds")) {
            TrainRun r = base.run;
            r.block_skip = rate;
            r.seed = static_cast<std::uint64_t>(seed);
            r.checkpoint_steps.clear();
            r.validate();
            runs.push_back(r);
            hyper.push_back(rate);
        }
    }
    const SweepResult res = correlation_sweep(runs, hyper, base.task, base.data, o,
                                              static_cast<int>(s.integer("probe_count")),
                                              static_cast<int>(s.integer("probe_length")));
    write_sweep_csv(res, dir / "sweep.csv");
    // the paper's direction is higher coupling with lower loss, i.e. a negative rank correlation
    write_json({{"spearman", res.spearman_defined ? nlohmann::json(res.spearman) : nlohmann::json(nullptr)},
                {"spearman_defined", res.spearman_defined},
                {"paper_sign_reproduced", res.spearman_defined ? nlohmann::json(res.spearman < 0.0) : nlohmann::json(nullptr)},
                {"runs", res.rows.size()}},
               dir / "sweep_summary.json");
    write_json(manifest("sweep", s, {"sweep.csv", "sweep_summary.json"}), dir / "manifest.json");
    out << "sweep of " << res.rows.size() << " runs, spearman(coupling, val loss) = ";
    if (res.spearman_defined) out << res.spearman << "\n";
    else out << "undefined\n";
    return ok;
}

int cmd_validate(const fs::path& target, std::ostream& out) {
    std::vector<FileCheck> checks;
    if (fs::is_directory(target)) {
        checks = validate_directory(target);
    } else if (fs::exists(target)) {
        checks.push_back(validate_file(target));
    } else {
        bad_config("nothing to validate at " + target.string());
    }
    bool all_ok = !checks.empty();
    for (const auto& c : checks) {
        out << (c.ok ? "OK   " : "FAIL ") << c.path.string() << ": " << c.message << "\n";
        all_ok = all_ok && c.ok;
    }
    if (checks.empty()) out << "no CSV or JSON outputs found\n";
    return all_ok ? ok : failure;
}

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::CorruptCheckpoint: return corrupt_checkpoint;
        case ErrorCode::TrainingDiverged: return diverged;
        case ErrorCode::InvalidInput:
        case ErrorCode::ShapeMismatch:
        case ErrorCode::InvalidK:
        case ErrorCode::InvalidConfig:
        case ErrorCode::UnknownToken:
        case ErrorCode::SequenceTooLong:
        case ErrorCode::EmptyPrompt:
        case ErrorCode::InvalidConnection:
        case ErrorCode::InvalidTask:
        case ErrorCode::InvalidBasis:
        case ErrorCode::InsufficientData: return config_error;
        default: return failure;
    }
}

std::string flag_name(const std::string& key) {
    std::string f = key;
    std::replace(f.begin(), f.end(), '_', '-');
    return "--" + f;
}

struct Subcommand {
    CLI::App* app;
    const std::vector<KeySpec>* keys;
    std::string config_file;
    std::map<std::string, std::string> flags;
};

void register_keys(Subcommand& sc) {
    sc.app->add_option("--config", sc.config_file, "key = value settings file");
    for (const auto& k : *sc.keys) {
        std::string help = k.help;
        if (!k.fallback.empty()) help += (help.empty() ? "" : " ") + std::string("[default: ") + k.fallback + "]";
        sc.app->add_option(flag_name(k.key), sc.flags[k.key], help);
    }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Jacobian coupling and trajectory analysis of small transformers", "coupling-probe"};
    app.require_subcommand(1);
    app.set_version_flag("--version", code_version());

    Subcommand analyze{app.add_subcommand("analyze", "analyze a checkpoint on a prompts file"), &analysis_keys(), {}, {}};
    Subcommand trainc{app.add_subcommand("train", "train a toy model on a synthetic task"), &train_keys(), {}, {}};
    Subcommand emergence{app.add_subcommand("emergence", "train and track coupling across checkpoints"), &emergence_keys(), {}, {}};
    Subcommand sweep{app.add_subcommand("sweep", "block-skip sweep: coupling against validation loss"), &sweep_keys(), {}, {}};
    for (Subcommand* sc : {&analyze, &trainc, &emergence, &sweep}) register_keys(*sc);
    std::string validate_target;
    CLI::App* validate = app.add_subcommand("validate", "schema-check emitted CSV and JSON files");
    validate->add_option("path", validate_target, "output directory or single file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::CallForVersion&) {
        out << code_version() << "\n";
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return config_error;
    }

    try {
        if (validate->parsed()) return cmd_validate(validate_target, out);
        for (Subcommand* sc : {&analyze, &trainc, &emergence, &sweep}) {
            if (!sc->app->parsed()) continue;
            Settings s(*sc->keys, err);
            if (!sc->config_file.empty()) s.load_file(sc->config_file);
            for (const auto& k : *sc->keys) {
                if (sc->app->get_option(flag_name(k.key))->count() > 0) s.set(k.key, sc->flags[k.key]);
            }
            if (sc == &analyze) return cmd_analyze(s, out);
            if (sc == &trainc) return cmd_train(s, out);
            if (sc == &emergence) return cmd_emergence(s, out);
            return cmd_sweep(s, out);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return failure;
    }
    return failure;
}

}  // namespace cprobe::cli

#include "coupling_probe/tasks.hpp"

#include <cmath>
#include <random>
#include <regex>
#include <set>

namespace cprobe {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

int context_index(const Sequence& s, std::size_t end, int order, int alphabet) {
    int idx = 0;
    for (std::size_t i = end - static_cast<std::size_t>(order); i < end; ++i) idx = idx * alphabet + s[i];
    return idx;
}

Matrix markov_table(const MarkovChain& mc, std::mt19937_64& rng) {
    const auto rows = static_cast<Eigen::Index>(std::pow(mc.alphabet, mc.order));
    std::normal_distribution<double> normal;
    Matrix t(rows, mc.alphabet);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index j = 0; j < t.cols(); ++j) t(r, j) = std::exp(mc.sharpness * normal(rng));
        t.row(r) /= t.row(r).sum();
    }
    return t;
}

int sample(const Matrix& table, Eigen::Index row, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif;
    double u = unif(rng);
    for (Eigen::Index j = 0; j < table.cols() - 1; ++j) {
        u -= table(row, j);
        if (u < 0.0) return static_cast<int>(j);
    }
    return static_cast<int>(table.cols() - 1);
}

}  // namespace

int SyntheticTask::vocab() const {
    return std::visit(overloaded{[](const MarkovChain& m) { return m.alphabet; },
                                 [](const CopyTask& c) { return c.alphabet + 1; },
                                 [](const ModularSum& s) { return s.modulus + 2; }},
                      kind);
}

int SyntheticTask::sequence_length() const {
    return std::visit(overloaded{[&](const MarkovChain&) { return seq_len; },
                                 [](const CopyTask& c) { return 2 * c.span + 1; },
                                 [](const ModularSum&) { return 5; }},
                      kind);
}

void SyntheticTask::validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidTask, m); };
    if (train_size <= 0) bad("train_size must be positive");
    if (val_size < 0) bad("val_size must be non-negative");
    std::visit(overloaded{[&](const MarkovChain& m) {
                              if (m.order < 1 || m.alphabet < 2) bad("markov_chain needs order >= 1 and alphabet >= 2");
                              if (std::pow(m.alphabet, m.order) > 1e6) bad("markov_chain table too large");
                              if (seq_len <= m.order) bad("seq_len must exceed the markov order");
                              if (!(m.sharpness >= 0.0)) bad("sharpness must be >= 0");
                          },
                          [&](const CopyTask& c) {
                              if (c.span < 1 || c.alphabet < 2) bad("copy_task needs span >= 1 and alphabet >= 2");
                          },
                          [&](const ModularSum& s) {
                              if (s.modulus < 2) bad("modular_sum needs modulus >= 2");
                              // only modulus^2 distinct problems exist
                              if (static_cast<long>(train_size) + val_size > static_cast<long>(s.modulus) * s.modulus) {
                                  bad("train_size + val_size exceeds the number of distinct sums");
                              }
                          }},
               kind);
}

TaskData generate_task(const SyntheticTask& task) {
    task.validate();
    std::mt19937_64 rng(task.seed);
    TaskData data;
    if (const auto* mc = std::get_if<MarkovChain>(&task.kind)) data.transitions = markov_table(*mc, rng);

    auto draw = [&]() {
        Sequence s;
        std::visit(overloaded{[&](const MarkovChain& m) {
                                  std::uniform_int_distribution<int> sym(0, m.alphabet - 1);
                                  for (int i = 0; i < m.order; ++i) s.push_back(sym(rng));
                                  while (static_cast<int>(s.size()) < task.seq_len) {
                                      s.push_back(sample(data.transitions, context_index(s, s.size(), m.order, m.alphabet), rng));
                                  }
                              },
                              [&](const CopyTask& c) {
                                  std::uniform_int_distribution<int> sym(0, c.alphabet - 1);
                                  for (int i = 0; i < c.span; ++i) s.push_back(sym(rng));
                                  s.push_back(c.alphabet);
                                  for (int i = 0; i < c.span; ++i) s.push_back(s[static_cast<std::size_t>(i)]);
                              },
                              [&](const ModularSum& m) {
                                  std::uniform_int_distribution<int> sym(0, m.modulus - 1);
                                  const int a = sym(rng);
                                  const int b = sym(rng);
                                  s = {a, m.modulus, b, m.modulus + 1, (a + b) % m.modulus};
                              }},
                   task.kind);
        return s;
    };

    std::set<Sequence> seen;
    for (int i = 0; i < task.train_size; ++i) {
        data.train.push_back(draw());
        seen.insert(data.train.back());
    }
    // rejection keeps validation disjoint from training; bounded so tiny spaces cannot hang
    const long max_attempts = 1000L * (task.val_size + 1);
    long attempts = 0;
    while (static_cast<int>(data.val.size()) < task.val_size) {
        if (++attempts > max_attempts) throw Error(ErrorCode::InvalidTask, "cannot draw enough held-out sequences");
        Sequence s = draw();
        if (seen.insert(s).second) data.val.push_back(std::move(s));
    }
    return data;
}

double uniform_baseline(const SyntheticTask& task) { return std::log(static_cast<double>(task.vocab())); }

std::string describe(const SyntheticTask& task) {
    return std::visit(overloaded{[](const MarkovChain& m) {
                                     return "markov_chain(" + std::to_string(m.order) + "," + std::to_string(m.alphabet) + ")";
                                 },
                                 [](const CopyTask& c) {
                                     return "copy_task(" + std::to_string(c.span) + "," + std::to_string(c.alphabet) + ")";
                                 },
                                 [](const ModularSum& s) { return "modular_sum(" + std::to_string(s.modulus) + ")"; }},
                      task.kind);
}

TaskKind parse_task_kind(const std::string& text) {
    static const std::regex re(R"(\s*(\w+)\s*\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)\s*)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) throw Error(ErrorCode::InvalidTask, "cannot parse task '" + text + "'");
    const std::string name = m[1];
    const int a = std::stoi(m[2]);
    const bool has_b = m[3].matched;
    const int b = has_b ? std::stoi(m[3]) : 0;
    if (name == "markov_chain") {
        if (!has_b) throw Error(ErrorCode::InvalidTask, "markov_chain needs (order, alphabet)");
        return MarkovChain{a, b};
    }
    if (name == "copy_task") return has_b ? CopyTask{a, b} : CopyTask{a};
    if (name == "modular_sum") {
        if (has_b) throw Error(ErrorCode::InvalidTask, "modular_sum takes one argument");
        return ModularSum{a};
    }
    throw Error(ErrorCode::InvalidTask, "unknown task '" + name + "'");
}

}  // namespace cprobe

#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "coupling_probe/linalg.hpp"

namespace cprobe {

struct MarkovChain {
    int order = 1;
    int alphabet = 16;
    double sharpness = 2.0;  // std of the Gaussian transition logits
};

/// span random symbols, a separator, then the same span again.
struct CopyTask {
    int span = 4;
    int alphabet = 8;
};

/// a + b = (a + b) mod modulus, tokens 0..modulus-1 then '+' and '='.
struct ModularSum {
    int modulus = 7;
};

using TaskKind = std::variant<MarkovChain, CopyTask, ModularSum>;

struct SyntheticTask {
    TaskKind kind = MarkovChain{};
    std::uint64_t seed = 0;
    int train_size = 256;  // sequences
    int val_size = 32;
    int seq_len = 32;      // markov only; the other tasks have fixed length

    int vocab() const;
    int sequence_length() const;
    void validate() const;
};

using Sequence = std::vector<int>;

struct TaskData {
    std::vector<Sequence> train;
    std::vector<Sequence> val;
    /// Markov transition table, alphabet^order rows of next-symbol probabilities.
    Matrix transitions;
};

/// Deterministic in the seed; no validation sequence also occurs in the training set.
TaskData generate_task(const SyntheticTask& task);

/// Mean cross-entropy of predicting uniformly over the vocabulary, ln(vocab).
double uniform_baseline(const SyntheticTask& task);

std::string describe(const SyntheticTask& task);

/// Parses "markov_chain(order, alphabet)", "copy_task(span)" or "modular_sum(modulus)".
TaskKind parse_task_kind(const std::string& text);

}  // namespace cprobe

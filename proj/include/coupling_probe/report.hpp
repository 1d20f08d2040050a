#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coupling_probe/linalg.hpp"

namespace cprobe {

/// Library version plus the git revision seen at configure time, when there was one.
std::string code_version();

/// Comma-separated writer; doubles use 17 significant digits and non-finite values "nan".
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

    template <typename... Ts>
    void row(const Ts&... fields) {
        bool first = true;
        ((put(fields, first)), ...);
        out_ << '\n';
    }

private:
    void sep(bool& first) {
        if (!first) out_ << ',';
        first = false;
    }
    void put(double v, bool& first);
    void put(const std::string& v, bool& first) {
        sep(first);
        out_ << v;
    }
    void put(const char* v, bool& first) { put(std::string(v), first); }
    template <typename I>
        requires std::is_integral_v<I>
    void put(I v, bool& first) {
        sep(first);
        out_ << v;
    }

    std::ofstream out_;
};

enum class FieldType { integer, real, text };

struct CsvSchema {
    std::string file;
    std::vector<std::pair<std::string, FieldType>> columns;
};

/// Every CSV the tool emits, keyed by file name.
const std::vector<CsvSchema>& csv_schemas();

/// JSON null for non-finite entries.
nlohmann::json adjacency_json(const Matrix& adjacency);

/// Writes pretty-printed JSON with a trailing newline.
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

struct FileCheck {
    std::filesystem::path path;
    bool ok = true;
    std::string message;
};

/// Checks one output file against its schema. Unknown files are reported as not ok.
FileCheck validate_file(const std::filesystem::path& path);

/// Checks every recognised file under `dir`, recursing into subdirectories.
std::vector<FileCheck> validate_directory(const std::filesystem::path& dir);

}  // namespace cprobe

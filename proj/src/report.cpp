#include "coupling_probe/report.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "coupling_probe/checkpoint.hpp"

#ifndef CPROBE_VERSION
#define CPROBE_VERSION "unknown"
#endif

namespace cprobe {

std::string code_version() { return CPROBE_VERSION; }

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out_ << std::setprecision(17);
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
}

void CsvWriter::put(double v, bool& first) {
    sep(first);
    if (std::isfinite(v)) out_ << v;
    else out_ << "nan";
}

const std::vector<CsvSchema>& csv_schemas() {
    using F = FieldType;
    static const std::vector<CsvSchema> schemas = {
        {"coupling.csv",
         {{"prompt", F::integer}, {"kind", F::text}, {"l", F::integer}, {"t1", F::integer}, {"t2", F::integer},
          {"l_basis", F::integer}, {"t1_basis", F::integer}, {"t2_basis", F::integer}, {"K", F::integer},
          {"p", F::real}, {"m_K", F::real}, {"c_K", F::real}}},
        {"trajectories.csv",
         {{"prompt", F::integer}, {"token", F::integer}, {"lss", F::real}, {"ed", F::real}, {"mean_alpha", F::real}}},
        {"norms.csv", {{"prompt", F::integer}, {"token", F::integer}, {"layer", F::integer}, {"norm", F::real}}},
        {"entropy.csv", {{"prompt", F::integer}, {"layer", F::integer}, {"entropy", F::real}}},
        {"pca.csv",
         {{"prompt", F::integer}, {"token", F::integer}, {"layer", F::integer}, {"pc1", F::real}, {"pc2", F::real}}},
        {"svals.csv", {{"prompt", F::integer}, {"layer", F::integer}, {"rank", F::integer}, {"value", F::real}}},
        {"perturb.csv", {{"prompt", F::integer}, {"scale", F::real}, {"cos_first", F::real}, {"cos_last", F::real}}},
        {"adjacency.csv", {{"l", F::integer}, {"l_basis", F::integer}, {"mean_c", F::real}}},
        {"emergence.csv", {{"step", F::integer}, {"metric", F::text}, {"value", F::real}}},
        {"sweep.csv", {{"run_id", F::integer}, {"hyperparam", F::real}, {"val_loss", F::real}, {"mean_coupling", F::real}}},
        {"loss.csv", {{"step", F::integer}, {"train_loss", F::real}, {"val_loss", F::real}}},
    };
    return schemas;
}

nlohmann::json adjacency_json(const Matrix& adjacency) {
    nlohmann::json entries = nlohmann::json::array();
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i) {
        for (Eigen::Index j = 0; j < adjacency.cols(); ++j) {
            const double v = adjacency(i, j);
            entries.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
        }
    }
    return {{"L", adjacency.rows()}, {"entries", entries}};
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

namespace {

bool parses_as(const std::string& field, FieldType type) {
    if (type == FieldType::text) return !field.empty();
    if (field == "nan") return type == FieldType::real;
    const char* b = field.data();
    const char* e = b + field.size();
    if (type == FieldType::integer) {
        long v;
        auto r = std::from_chars(b, e, v);
        return r.ec == std::errc() && r.ptr == e;
    }
    double v;
    auto r = std::from_chars(b, e, v);
    return r.ec == std::errc() && r.ptr == e && std::isfinite(v);
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

FileCheck check_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    FileCheck fc{path, true, ""};
    auto fail = [&](const std::string& m) {
        fc.ok = false;
        fc.message = m;
        return fc;
    };
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) return fail("empty file");
    const auto header = split(line);
    if (header.size() != schema.columns.size()) return fail("header has " + std::to_string(header.size()) + " columns");
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] != schema.columns[i].first) return fail("column " + std::to_string(i) + " is '" + header[i] + "'");
    }
    std::size_t lineno = 1, rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto fields = split(line);
        if (fields.size() != header.size()) return fail("line " + std::to_string(lineno) + ": wrong field count");
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (!parses_as(fields[i], schema.columns[i].second)) {
                return fail("line " + std::to_string(lineno) + ": bad " + header[i] + " '" + fields[i] + "'");
            }
        }
        ++rows;
    }
    fc.message = std::to_string(rows) + " rows";
    return fc;
}

FileCheck check_json(const std::filesystem::path& path) {
    FileCheck fc{path, true, ""};
    nlohmann::json j;
    try {
        std::ifstream in(path);
        j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        return {path, false, std::string("invalid JSON: ") + e.what()};
    }
    const std::string name = path.filename().string();
    if (j.is_object() && j.value("format", "") == "tensor-bundle") {
        try {
            read_bundle(path);
            fc.message = "tensor bundle";
        } catch (const Error& e) {
            return {path, false, e.what()};
        }
        return fc;
    }
    if (name == "adjacency.json") {
        if (!j.is_object() || !j.contains("L") || !j["L"].is_number_integer() || !j.contains("entries") ||
            !j["entries"].is_array()) {
            return {path, false, "adjacency.json needs integer L and an entries array"};
        }
        const auto L = j["L"].get<long>();
        if (static_cast<long>(j["entries"].size()) != L * L) return {path, false, "entries length is not L*L"};
        for (const auto& e : j["entries"]) {
            if (!e.is_number() && !e.is_null()) return {path, false, "entries must be numbers or null"};
        }
        fc.message = "L = " + std::to_string(L);
        return fc;
    }
    if (name == "manifest.json") {
        for (const char* key : {"command", "code_version", "config", "outputs"}) {
            if (!j.contains(key)) return {path, false, std::string("manifest lacks '") + key + "'"};
        }
        fc.message = "run manifest";
        return fc;
    }
    if (name == "sweep_summary.json") {
        if (!j.contains("spearman") || !j.contains("spearman_defined")) return {path, false, "summary lacks spearman fields"};
        fc.message = "sweep summary";
        return fc;
    }
    return {path, false, "unrecognised JSON file"};
}

}  // namespace

FileCheck validate_file(const std::filesystem::path& path) {
    const std::string name = path.filename().string();
    for (const auto& s : csv_schemas()) {
        if (s.file == name) return check_csv(path, s);
    }
    if (path.extension() == ".json") return check_json(path);
    return {path, false, "no schema for this file"};
}

std::vector<FileCheck> validate_directory(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::InvalidInput, dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto ext = entry.path().extension();
        if (ext == ".csv" || ext == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<FileCheck> out;
    for (const auto& f : files) out.push_back(validate_file(f));
    return out;
}

}  // namespace cprobe

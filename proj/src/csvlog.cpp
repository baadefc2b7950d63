// SPDX-License-Identifier: Apache-2.0
#include "genrep/csvlog.hpp"

#include <cstdio>
#include <filesystem>

namespace genrep {

CsvLogger::CsvLogger(const std::string& path, bool append) { open(path, append); }

void CsvLogger::open(const std::string& path, bool append) {
    const bool existed = std::filesystem::exists(path) && std::filesystem::file_size(path) > 0;
    f_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!f_) {
        throw IoError("cannot open csv log: " + path);
    }
    if (!append || !existed) {
        f_ << "run_id,stage,step,metric_name,value\n";
    }
}

void CsvLogger::row(const std::string& run_id, const std::string& stage, long step,
                    const std::string& metric, double value) {
    f_ << run_id << ',' << stage << ',' << step << ',' << metric << ',' << format_value(value)
       << '\n';
}

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace genrep

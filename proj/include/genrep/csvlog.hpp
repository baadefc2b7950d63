// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <string>

#include "genrep/common.hpp"

namespace genrep {

// Shared metric log schema: run_id, stage, step, metric_name, value.
class CsvLogger {
public:
    CsvLogger() = default;
    CsvLogger(const std::string& path, bool append);

    void open(const std::string& path, bool append);
    bool is_open() const { return f_.is_open(); }
    void row(const std::string& run_id, const std::string& stage, long step,
             const std::string& metric, double value);
    void flush() { f_.flush(); }

private:
    std::ofstream f_;
};

std::string format_value(double v);

} // namespace genrep

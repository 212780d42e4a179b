#include "fpt/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace fpt {

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace

void RunLog::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write metrics csv '" + path + "'");
    out << csv_header() << '\n';
    for (const auto& r : records_) {
        out << r.epoch << ',' << r.cumulative_examples << ',' << r.cumulative_train_flops << ','
            << fmt6(r.train_loss) << ',' << fmt6(r.train_acc) << ',' << fmt6(r.val_acc) << ','
            << fmt6(r.wall_seconds) << ',' << r.event << '\n';
    }
    if (!out) throw IoError("write failed for metrics csv '" + path + "'");
}

std::vector<MetricsRecord> RunLog::parse_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics csv '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw MalformedFile("metrics csv is empty");
    if (line != csv_header()) throw MalformedFile("metrics csv header mismatch");
    std::vector<MetricsRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        while (fields.size() < 8) fields.emplace_back(); // trailing empty event
        if (fields.size() != 8) throw MalformedFile("metrics csv row has wrong field count");
        MetricsRecord r;
        r.epoch = std::stoi(fields[0]);
        r.cumulative_examples = std::stoll(fields[1]);
        r.cumulative_train_flops = std::stoll(fields[2]);
        r.train_loss = std::stod(fields[3]);
        r.train_acc = std::stod(fields[4]);
        r.val_acc = std::stod(fields[5]);
        r.wall_seconds = std::stod(fields[6]);
        r.event = fields[7];
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace fpt

#include "fpt/cifar_file.hpp"

#include <fstream>

#include "fpt/errors.hpp"

namespace fpt {

std::vector<CifarRecord> read_cifar_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open '" + path + "'");
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size == 0 || size % kCifarRecordBytes != 0)
        throw MalformedFile("'" + path + "' size " + std::to_string(size) +
                            " is not a positive multiple of " + std::to_string(kCifarRecordBytes));
    in.seekg(0);
    const std::size_t count = size / kCifarRecordBytes;
    std::vector<CifarRecord> out(count);
    for (auto& rec : out) {
        char label;
        in.read(&label, 1);
        in.read(reinterpret_cast<char*>(rec.pixels.data()),
                static_cast<std::streamsize>(rec.pixels.size()));
        if (!in) throw MalformedFile("'" + path + "' truncated mid-record");
        rec.label = static_cast<std::uint8_t>(label);
        if (rec.label >= 10)
            throw LabelOutOfRange("'" + path + "' contains label " + std::to_string(rec.label));
    }
    return out;
}

} // namespace fpt

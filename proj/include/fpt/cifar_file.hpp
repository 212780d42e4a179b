#ifndef FPT_CIFAR_FILE_HPP
#define FPT_CIFAR_FILE_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fpt {

/// One raw CIFAR-10 record: a label byte followed by 3072 pixel bytes
/// (channel-planar R, G, B, each 32x32 row-major).
struct CifarRecord {
    std::uint8_t label = 0;
    std::array<std::uint8_t, 3072> pixels{};
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Reads a CIFAR-10 binary file. The file size must be a multiple of the
/// 3073-byte record size and labels must lie in [0, 10).
std::vector<CifarRecord> read_cifar_file(const std::string& path);

} // namespace fpt

#endif

#ifndef FPT_IMAGE_IO_HPP
#define FPT_IMAGE_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace fpt {

/// Binary PGM (P5): grayscale, maxval 255.
void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& gray);

/// Binary PPM (P6): interleaved RGB, maxval 255.
void write_ppm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& rgb);

struct PnmImage {
    int width = 0;
    int height = 0;
    int channels = 0; // 1 = PGM, 3 = PPM
    std::vector<std::uint8_t> data;
};

PnmImage read_pnm(const std::string& path);

} // namespace fpt

#endif

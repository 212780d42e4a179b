#include "fpt/image_io.hpp"

#include <fstream>

#include "fpt/errors.hpp"

namespace fpt {

namespace {

void write_pnm(const std::string& path, const char* magic, int width, int height, int channels,
               const std::vector<std::uint8_t>& data) {
    if (width < 1 || height < 1)
        throw IoError("image extents must be >= 1 for '" + path + "'");
    if (data.size() != static_cast<std::size_t>(width) * height * channels)
        throw IoError("pixel buffer size does not match extents for '" + path + "'");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image '" + path + "'");
    out << magic << '\n' << width << ' ' << height << '\n' << 255 << '\n';
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed for image '" + path + "'");
}

} // namespace

void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& gray) {
    write_pnm(path, "P5", width, height, 1, gray);
}

void write_ppm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& rgb) {
    write_pnm(path, "P6", width, height, 3, rgb);
}

PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image '" + path + "'");
    std::string magic;
    int width = 0, height = 0, maxval = 0;
    in >> magic >> width >> height >> maxval;
    if (!in || (magic != "P5" && magic != "P6"))
        throw MalformedFile("'" + path + "' is not a binary PGM/PPM");
    if (maxval != 255) throw MalformedFile("'" + path + "' maxval must be 255");
    in.get(); // single whitespace byte after the header
    PnmImage img;
    img.width = width;
    img.height = height;
    img.channels = magic == "P5" ? 1 : 3;
    img.data.resize(static_cast<std::size_t>(width) * height * img.channels);
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
        throw MalformedFile("'" + path + "' truncated pixel data");
    return img;
}

} // namespace fpt

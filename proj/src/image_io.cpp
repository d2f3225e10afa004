#include "vesselnet/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace vesselnet {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    std::streamoff len = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(len));
    in.read(reinterpret_cast<char*>(buf.data()), len);
    if (!in) throw IngestError("short read: " + path);
    return buf;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestError("short write: " + path);
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

const std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

ImageU8 decode_png(const std::string& path, const std::vector<std::uint8_t>& file) {
    std::size_t pos = 8;
    int width = 0, height = 0, color_type = -1;
    int samples = 0;
    std::vector<std::uint8_t> idat;
    std::vector<std::uint8_t> palette;
    bool saw_ihdr = false, saw_iend = false;

    while (pos + 8 <= file.size() && !saw_iend) {
        std::uint32_t len = be32(&file[pos]);
        if (pos + 12 + len > file.size())
            throw FormatError("png: truncated chunk in " + path);
        const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
        const std::uint8_t* data = &file[pos + 8];
        std::uint32_t crc_stored = be32(&file[pos + 8 + len]);
        std::uint32_t crc_actual =
            crc32(crc32(0, &file[pos + 4], 4), data, len);
        if (crc_stored != crc_actual)
            throw FormatError("png: chunk crc mismatch in " + path);

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw FormatError("png: bad IHDR in " + path);
            width = int(be32(data));
            height = int(be32(data + 4));
            int depth = data[8];
            color_type = data[9];
            int interlace = data[12];
            if (depth != 8)
                throw FormatError("png: only 8-bit depth supported: " + path);
            if (interlace != 0)
                throw FormatError("png: interlaced images unsupported: " + path);
            switch (color_type) {
                case 0: samples = 1; break;  // gray
                case 2: samples = 3; break;  // rgb
                case 3: samples = 1; break;  // palette
                case 4: samples = 2; break;  // gray+alpha
                case 6: samples = 4; break;  // rgba
                default:
                    throw FormatError("png: unsupported color type in " + path);
            }
            saw_ihdr = true;
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            palette.assign(data, data + len);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || width <= 0 || height <= 0)
        throw FormatError("png: missing IHDR in " + path);
    if (idat.empty()) throw FormatError("png: no IDAT data in " + path);

    const std::size_t stride = std::size_t(width) * samples;
    std::vector<std::uint8_t> raw(std::size_t(height) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    int zrc = uncompress(raw.data(), &raw_len, idat.data(),
                         static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || raw_len != raw.size())
        throw FormatError("png: deflate stream corrupt in " + path);

    // undo per-row filters in place (rows shifted left over the filter byte)
    std::vector<std::uint8_t> img(std::size_t(height) * stride);
    const int bpp = samples;
    for (int y = 0; y < height; ++y) {
        const std::uint8_t filter = raw[std::size_t(y) * (stride + 1)];
        const std::uint8_t* src = &raw[std::size_t(y) * (stride + 1) + 1];
        std::uint8_t* dst = &img[std::size_t(y) * stride];
        const std::uint8_t* up = y > 0 ? &img[std::size_t(y - 1) * stride] : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            int a = x >= std::size_t(bpp) ? dst[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= std::size_t(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default:
                    throw FormatError("png: bad filter type in " + path);
            }
            dst[x] = std::uint8_t(v);
        }
    }

    ImageU8 out;
    out.width = width;
    out.height = height;
    const std::size_t npix = std::size_t(width) * height;
    switch (color_type) {
        case 0:
            out.channels = 1;
            out.pixels = std::move(img);
            break;
        case 2:
            out.channels = 3;
            out.pixels = std::move(img);
            break;
        case 3: {
            if (palette.empty()) throw FormatError("png: palette image without PLTE: " + path);
            out.channels = 3;
            out.pixels.resize(npix * 3);
            for (std::size_t i = 0; i < npix; ++i) {
                std::size_t idx = std::size_t(img[i]) * 3;
                if (idx + 2 >= palette.size())
                    throw FormatError("png: palette index out of range in " + path);
                out.pixels[i * 3 + 0] = palette[idx + 0];
                out.pixels[i * 3 + 1] = palette[idx + 1];
                out.pixels[i * 3 + 2] = palette[idx + 2];
            }
            break;
        }
        case 4:
            out.channels = 1;
            out.pixels.resize(npix);
            for (std::size_t i = 0; i < npix; ++i) out.pixels[i] = img[i * 2];
            break;
        case 6:
            out.channels = 3;
            out.pixels.resize(npix * 3);
            for (std::size_t i = 0; i < npix; ++i) {
                out.pixels[i * 3 + 0] = img[i * 4 + 0];
                out.pixels[i * 3 + 1] = img[i * 4 + 1];
                out.pixels[i * 3 + 2] = img[i * 4 + 2];
            }
            break;
    }
    return out;
}

int pnm_token(const std::vector<std::uint8_t>& file, std::size_t& pos) {
    // skip whitespace and '#' comments
    while (pos < file.size()) {
        std::uint8_t c = file[pos];
        if (c == '#') {
            while (pos < file.size() && file[pos] != '\n') ++pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++pos;
        } else {
            break;
        }
    }
    int v = 0;
    bool any = false;
    while (pos < file.size() && file[pos] >= '0' && file[pos] <= '9') {
        v = v * 10 + (file[pos] - '0');
        ++pos;
        any = true;
    }
    if (!any) throw FormatError("pnm: malformed header");
    return v;
}

ImageU8 decode_pnm(const std::string& path, const std::vector<std::uint8_t>& file) {
    const int channels = file[1] == '5' ? 1 : 3;
    std::size_t pos = 2;
    int w = pnm_token(file, pos);
    int h = pnm_token(file, pos);
    int maxval = pnm_token(file, pos);
    if (maxval != 255) throw FormatError("pnm: only maxval 255 supported: " + path);
    ++pos;  // single whitespace after maxval
    const std::size_t need = std::size_t(w) * h * channels;
    if (pos + need > file.size()) throw FormatError("pnm: truncated pixel data: " + path);
    ImageU8 out;
    out.width = w;
    out.height = h;
    out.channels = channels;
    out.pixels.assign(file.begin() + pos, file.begin() + pos + need);
    return out;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
    auto file = read_file(path);
    if (file.size() >= 8 && std::memcmp(file.data(), kPngSig, 8) == 0)
        return decode_png(path, file);
    if (file.size() >= 2 && file[0] == 'P' && (file[1] == '5' || file[1] == '6'))
        return decode_pnm(path, file);
    throw FormatError("unrecognized image format: " + path);
}

void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("write_png: channels must be 1 or 3");
    if (img.pixels.size() != img.size_bytes())
        throw ContractError("write_png: pixel buffer size mismatch");

    const std::size_t stride = std::size_t(img.width) * img.channels;
    std::vector<std::uint8_t> raw(std::size_t(img.height) * (stride + 1));
    for (int y = 0; y < img.height; ++y) {
        raw[std::size_t(y) * (stride + 1)] = 0;  // filter: none
        std::memcpy(&raw[std::size_t(y) * (stride + 1) + 1],
                    &img.pixels[std::size_t(y) * stride], stride);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zdata(bound);
    if (compress2(zdata.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw FormatError("png: compression failed");
    zdata.resize(bound);

    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    auto chunk = [&out](const char* type, const std::uint8_t* data, std::size_t len) {
        put_be32(out, std::uint32_t(len));
        std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        if (len) out.insert(out.end(), data, data + len);
        std::uint32_t crc = crc32(0, &out[start], static_cast<uInt>(4 + len));
        put_be32(out, crc);
    };
    std::uint8_t ihdr[13];
    ihdr[0] = std::uint8_t(img.width >> 24);
    ihdr[1] = std::uint8_t(img.width >> 16);
    ihdr[2] = std::uint8_t(img.width >> 8);
    ihdr[3] = std::uint8_t(img.width);
    ihdr[4] = std::uint8_t(img.height >> 24);
    ihdr[5] = std::uint8_t(img.height >> 16);
    ihdr[6] = std::uint8_t(img.height >> 8);
    ihdr[7] = std::uint8_t(img.height);
    ihdr[8] = 8;                                   // bit depth
    ihdr[9] = img.channels == 1 ? 0 : 2;           // gray / rgb
    ihdr[10] = 0;
    ihdr[11] = 0;
    ihdr[12] = 0;
    chunk("IHDR", ihdr, 13);
    chunk("IDAT", zdata.data(), zdata.size());
    chunk("IEND", nullptr, 0);
    write_file(path, out);
}

void write_pnm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("write_pnm: channels must be 1 or 3");
    std::string header = (img.channels == 1 ? "P5\n" : "P6\n") +
                         std::to_string(img.width) + " " + std::to_string(img.height) +
                         "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_file(path, out);
}

}  // namespace vesselnet

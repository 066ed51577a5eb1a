/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/image.hpp
 *
 * Copyright 2026 The facedirs authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef FACEDIRS_IMAGE_HPP
#define FACEDIRS_IMAGE_HPP

#include "facedirs/autograd.hpp"

#include "Eigen/Core"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/**
 * A planar C×H×W image with values in [-1, 1].
 */
struct ImageTensor
{
    int channels = 3;
    int height = 0;
    int width = 0;
    Eigen::ArrayXd data;

    ImageTensor() = default;
    ImageTensor(int c, int h, int w) : channels(c), height(h), width(w), data(Eigen::ArrayXd::Zero(c * h * w)) {}

    double& at(int c, int y, int x) { return data((static_cast<Eigen::Index>(c) * height + y) * width + x); }
    double at(int c, int y, int x) const { return data((static_cast<Eigen::Index>(c) * height + y) * width + x); }

    ag::Var var() const { return ag::Var::constant(data, ag::Shape{channels, height, width}); }

    static ImageTensor from_var(const ag::Var& v)
    {
        if (v.shape().size() != 3)
        {
            throw std::invalid_argument("ImageTensor::from_var: expected C×H×W, got " + ag::shape_str(v.shape()));
        }
        ImageTensor img(v.shape()[0], v.shape()[1], v.shape()[2]);
        img.data = v.value().max(-1.0).min(1.0);
        return img;
    }

    bool same_size(const ImageTensor& o) const
    {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

class ImageDecodeError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct PngReadBuffer
{
    const unsigned char* data;
    std::size_t size;
    std::size_t offset;
};

inline void png_read_from_buffer(png_structp png, png_bytep out, png_size_t count)
{
    auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
    if (buf->offset + count > buf->size)
    {
        png_error(png, "read past end of buffer");
    }
    std::memcpy(out, buf->data + buf->offset, count);
    buf->offset += count;
}

inline void png_write_to_vector(png_structp png, png_bytep in, png_size_t count)
{
    auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
    out->insert(out->end(), in, in + count);
}

inline void png_flush_noop(png_structp) {}

inline unsigned char to_byte(double v)
{
    const double c = std::clamp(v, -1.0, 1.0);
    return static_cast<unsigned char>(std::lround((c + 1.0) * 127.5));
}

inline double from_byte(unsigned char b) { return b / 127.5 - 1.0; }

} // namespace detail

/**
 * Decodes PNG bytes into an RGB image in [-1, 1]. Gray and alpha inputs are
 * converted to RGB.
 */
inline ImageTensor decode_png(const std::vector<unsigned char>& bytes)
{
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    {
        throw ImageDecodeError("not a PNG image");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png)
    {
        throw ImageDecodeError("png_create_read_struct failed");
    }
    png_infop info = png_create_info_struct(png);
    if (!info)
    {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw ImageDecodeError("png_create_info_struct failed");
    }
    detail::PngReadBuffer buf{bytes.data(), bytes.size(), 0};
    std::vector<unsigned char> pixels;
    std::vector<png_bytep> rows;
    png_uint_32 width = 0, height = 0;
    if (setjmp(png_jmpbuf(png)))
    {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageDecodeError("corrupt PNG data");
    }
    png_set_read_fn(png, &buf, detail::png_read_from_buffer);
    png_read_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    if (bit_depth == 16)
    {
        png_set_strip_16(png);
    }
    if (color_type == PNG_COLOR_TYPE_PALETTE)
    {
        png_set_palette_to_rgb(png);
    }
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    {
        png_set_gray_to_rgb(png);
    }
    if (color_type & PNG_COLOR_MASK_ALPHA)
    {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * height);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y)
    {
        rows[y] = pixels.data() + y * stride;
    }
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    ImageTensor img(3, static_cast<int>(height), static_cast<int>(width));
    for (int y = 0; y < img.height; ++y)
    {
        for (int x = 0; x < img.width; ++x)
        {
            for (int c = 0; c < 3; ++c)
            {
                img.at(c, y, x) = detail::from_byte(pixels[static_cast<std::size_t>(y) * stride + 3 * x + c]);
            }
        }
    }
    return img;
}

/// Encodes an RGB image as 8-bit PNG bytes. Output is deterministic.
inline std::vector<unsigned char> encode_png(const ImageTensor& img)
{
    if (img.channels != 3 && img.channels != 1)
    {
        throw std::invalid_argument("encode_png: only 1 or 3 channel images are supported");
    }
    std::vector<unsigned char> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info)
    {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("encode_png: libpng initialisation failed");
    }
    const int channels = img.channels;
    std::vector<unsigned char> pixels(static_cast<std::size_t>(img.height) * img.width * channels);
    for (int y = 0; y < img.height; ++y)
    {
        for (int x = 0; x < img.width; ++x)
        {
            for (int c = 0; c < channels; ++c)
            {
                pixels[(static_cast<std::size_t>(y) * img.width + x) * channels + c] = detail::to_byte(img.at(c, y, x));
            }
        }
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
    {
        rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * img.width * channels;
    }
    if (setjmp(png_jmpbuf(png)))
    {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("encode_png: libpng error");
    }
    png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path)
{
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f)
    {
        throw ImageDecodeError("cannot open " + path);
    }
    std::vector<unsigned char> bytes;
    unsigned char chunk[65536];
    std::size_t n = 0;
    while ((n = std::fread(chunk, 1, sizeof(chunk), f)) > 0)
    {
        bytes.insert(bytes.end(), chunk, chunk + n);
    }
    std::fclose(f);
    return bytes;
}

inline ImageTensor read_png(const std::string& path)
{
    try
    {
        return decode_png(read_file_bytes(path));
    } catch (const ImageDecodeError& e)
    {
        throw ImageDecodeError(path + ": " + e.what());
    }
}

inline void write_png(const ImageTensor& img, const std::string& path)
{
    const auto bytes = encode_png(img);
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f)
    {
        throw std::runtime_error("write_png: cannot open " + path);
    }
    const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
    std::fclose(f);
    if (!ok)
    {
        throw std::runtime_error("write_png: short write to " + path);
    }
}

/// Rounds every pixel to the 8-bit grid, as a PNG round trip would.
inline ImageTensor quantize(const ImageTensor& img)
{
    ImageTensor out = img;
    for (Eigen::Index i = 0; i < out.data.size(); ++i)
    {
        out.data(i) = detail::from_byte(detail::to_byte(out.data(i)));
    }
    return out;
}

} // namespace facedirs

#endif /* FACEDIRS_IMAGE_HPP */

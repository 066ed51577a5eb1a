/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/serialize.hpp
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

#ifndef FACEDIRS_SERIALIZE_HPP
#define FACEDIRS_SERIALIZE_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/shape3d.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/**
 * Array container: 4-byte magic, u32 version (1), u32 array count, then for
 * each array a u64 length followed by that many little-endian f64 values.
 */
inline void save_arrays(const std::string& path, const char magic[4], const std::vector<ag::Array>& arrays)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
    {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    os.write(magic, 4);
    detail::write_pod<std::uint32_t>(os, 1);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays)
    {
        detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(a.size()));
        detail::write_doubles(os, a.data(), static_cast<std::size_t>(a.size()));
    }
    if (!os)
    {
        throw std::runtime_error("write failed for '" + path + "'");
    }
}

inline std::vector<ag::Array> load_arrays(const std::string& path, const char magic[4])
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
    {
        throw std::runtime_error("cannot open '" + path + "'");
    }
    char m[4];
    is.read(m, 4);
    if (!is || std::memcmp(m, magic, 4) != 0)
    {
        throw std::runtime_error("'" + path + "' is not a " + std::string(magic, 4) + " file");
    }
    if (detail::read_pod<std::uint32_t>(is) != 1)
    {
        throw std::runtime_error("'" + path + "': unsupported version");
    }
    const auto count = detail::read_pod<std::uint32_t>(is);
    std::vector<ag::Array> out;
    for (std::uint32_t i = 0; i < count; ++i)
    {
        const auto n = detail::read_pod<std::uint64_t>(is);
        if (n > (1ull << 32))
        {
            throw std::runtime_error("'" + path + "': corrupt array length");
        }
        ag::Array a(static_cast<Eigen::Index>(n));
        detail::read_doubles(is, a.data(), static_cast<std::size_t>(n));
        out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<ag::Array> params_to_arrays(const std::vector<ag::Var>& params)
{
    std::vector<ag::Array> out;
    for (const auto& p : params)
    {
        out.push_back(p.value());
    }
    return out;
}

/// Copies arrays into parameter values in place, checking sizes.
inline void arrays_to_params(const std::vector<ag::Array>& arrays, std::vector<ag::Var> params,
                             const std::string& what)
{
    if (arrays.size() != params.size())
    {
        throw std::runtime_error(what + ": expected " + std::to_string(params.size()) + " arrays, found " +
                                 std::to_string(arrays.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i)
    {
        if (arrays[i].size() != params[i].size())
        {
            throw std::runtime_error(what + ": array " + std::to_string(i) + " has size " +
                                     std::to_string(arrays[i].size()) + ", expected " +
                                     std::to_string(params[i].size()));
        }
        params[i].mutable_value() = arrays[i];
    }
}

} // namespace facedirs

#endif /* FACEDIRS_SERIALIZE_HPP */

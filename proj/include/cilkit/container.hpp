/*
 * Copyright 2026 The cilkit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// "CILB1" binary container shared by backbone weights and prototype stores.
//
// Layout (all integers little-endian, unsigned unless noted):
//
//   magic        5 bytes   "CILB1"
//   n_config     u32
//   config       n_config x i32
//   n_arrays     u32
//   per array:
//     name_len   u32
//     name       name_len bytes (UTF-8, no terminator)
//     rank       u32
//     extents    rank x u32
//     payload    prod(extents) x f64 (IEEE-754 binary64, little-endian)
//
// Nothing follows the last array.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cilkit/tensor.hpp"

namespace cilkit {

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;

    bool operator==(const NamedArray&) const = default;
};

struct Container {
    std::vector<std::int32_t> config;
    std::vector<NamedArray> arrays;

    /// Throws ParseError naming the missing array.
    const NamedArray& get(const std::string& name) const;
    bool has(const std::string& name) const;

    bool operator==(const Container&) const = default;
};

inline constexpr char kContainerMagic[] = "CILB1";

void write_container(std::ostream& out, const Container& container);
/// Throws ParseError with the byte offset and field that failed.
Container read_container(std::istream& in);

void save_container(const std::filesystem::path& path, const Container& container);
Container load_container(const std::filesystem::path& path);

}  // namespace cilkit

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

#include "cilkit/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cilkit/error.hpp"

namespace cilkit {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    template <class T>
    T get(const std::string& field) {
        unsigned char bytes[sizeof(T)];
        read_raw(bytes, sizeof(T), field);
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
        T value;
        std::memcpy(&value, bytes, sizeof(T));
        return value;
    }

    void read_raw(void* dst, std::size_t n, const std::string& field) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw ParseError("CILB1: truncated input reading " + field + " at byte " + std::to_string(offset_));
        }
        offset_ += n;
    }

    std::size_t offset() const { return offset_; }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::istream& in_;
    std::size_t offset_ = 0;
};

constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxName = 4096;

}  // namespace

const NamedArray& Container::get(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw ParseError("CILB1: missing array '" + name + "'");
}

bool Container::has(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return true;
    return false;
}

void write_container(std::ostream& out, const Container& container) {
    out.write(kContainerMagic, 5);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(container.config.size()));
    for (std::int32_t v : container.config) put<std::int32_t>(out, v);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(container.arrays.size()));
    for (const auto& a : container.arrays) {
        if (shape_numel(a.shape) != a.data.size()) {
            throw DimensionError("CILB1: array '" + a.name + "' shape " + shape_string(a.shape) +
                                 " does not match payload length " + std::to_string(a.data.size()));
        }
        put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
        out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
        for (std::size_t e : a.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
        for (double v : a.data) put<double>(out, v);
    }
    if (!out) throw Error("CILB1: write failed");
}

Container read_container(std::istream& in) {
    Reader r(in);
    char magic[5];
    r.read_raw(magic, 5, "magic");
    if (std::memcmp(magic, kContainerMagic, 5) != 0) throw ParseError("CILB1: bad magic at byte 0");

    Container c;
    const auto n_config = r.get<std::uint32_t>("config count");
    if (n_config > 1024) throw ParseError("CILB1: implausible config count " + std::to_string(n_config));
    for (std::uint32_t i = 0; i < n_config; ++i) c.config.push_back(r.get<std::int32_t>("config[" + std::to_string(i) + "]"));

    const auto n_arrays = r.get<std::uint32_t>("array count");
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        const std::string where = "array " + std::to_string(i);
        NamedArray a;
        const auto name_len = r.get<std::uint32_t>(where + " name length");
        if (name_len > kMaxName) throw ParseError("CILB1: " + where + " name length " + std::to_string(name_len) + " too large");
        a.name.resize(name_len);
        r.read_raw(a.name.data(), name_len, where + " name");
        const std::string field = where + " '" + a.name + "'";
        const auto rank = r.get<std::uint32_t>(field + " rank");
        if (rank > kMaxRank) throw ParseError("CILB1: " + field + " rank " + std::to_string(rank) + " too large");
        for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(r.get<std::uint32_t>(field + " extent"));
        const std::size_t n = shape_numel(a.shape);
        if (n > (std::size_t{1} << 31)) throw ParseError("CILB1: " + field + " payload too large");
        a.data.resize(n);
        for (std::size_t k = 0; k < n; ++k) a.data[k] = r.get<double>(field + " payload");
        c.arrays.push_back(std::move(a));
    }
    if (!r.at_end()) throw ParseError("CILB1: trailing bytes after byte " + std::to_string(r.offset()));
    return c;
}

void save_container(const std::filesystem::path& path, const Container& container) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_container(out, container);
}

Container load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    return read_container(in);
}

}  // namespace cilkit

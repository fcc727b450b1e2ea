// Copyright 2026 The MoSARe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MOSARE_PNG_HPP_
#define MOSARE_PNG_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace mosare {

// Writes an 8-bit grayscale PNG; `pixels` is row-major, width * height
// bytes. Throws ValueError on a size mismatch and IoError on write failure.
void write_png_gray(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels);

}  // namespace mosare

#endif  // MOSARE_PNG_HPP_

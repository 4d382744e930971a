/*
 * Copyright 2026 The e2d Authors
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

#pragma once

#include <vector>

#include "common/rng.hpp"
#include "diffnet/model.hpp"
#include "diffnet/ops.hpp"

namespace e2d::recover {

using diffnet::CropSpec;

struct CropRange {
  double scale_lo = 0.25;
  double scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
};

inline constexpr int kCropTries = 10;

/// RandomResizedCrop: area fraction uniform in [scale_lo, scale_hi],
/// log-aspect uniform, position uniform over valid placements. After
/// kCropTries rejections a center crop is returned and `*fallbacks` (when
/// given) is incremented. The output resolution is the image resolution.
CropSpec sample_rrc(Rng& rng, int height, int width, const CropRange& range, long* fallbacks = nullptr);

/// Normalized GradCAM heat map of `image` (1, C, H, W) for `label`, upsampled
/// to (H, W) and scaled to [0, 1] by its maximum. All zeros when the map is
/// degenerate.
diffnet::Tensor gradcam_map(const diffnet::Model& teacher, const diffnet::Tensor& image, int label);

/// Crop whose center pixel is drawn with probability proportional to
/// (1 - map). Falls back to uniform centers when every weight is zero or the
/// map is all zeros. Size follows the RandomResizedCrop rules.
CropSpec sample_inverse_activation(Rng& rng, const diffnet::Tensor& map, const CropRange& range,
                                   long* fallbacks = nullptr);

/// Center-sampling weights used by sample_inverse_activation, row-major
/// over (H, W), summing to 1.
std::vector<double> center_weights(const diffnet::Tensor& map);

} // namespace e2d::recover

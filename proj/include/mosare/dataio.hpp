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

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mosare/common.hpp"

namespace mosare {

inline constexpr int kNumModalities = 3;

enum class Modality { Wsi = 0, Rna = 1, Rpt = 2 };

// Bare array indices for the three modality slots.
inline constexpr std::size_t kWsi = 0, kRna = 1, kRpt = 2;

inline const char* modality_name(int m) {
  static const char* names[kNumModalities] = {"wsi", "rna", "rpt"};
  return names[m];
}

struct ModalityData {
  bool present = false;
  Vec global;  // (D)
  Mat local;   // (C_m, D); C_m = C for wsi/rpt, N_h for rna
};

struct SampleRecord {
  std::string sample_id;
  int label = 0;
  std::array<ModalityData, kNumModalities> modality;
  Mat patch_embeddings;  // raw-mode WSI bag (N_patch, D); empty otherwise
  Mat patch_coords;      // optional (N_patch, 2) positions for heatmap export

  bool complete() const {
    for (const auto& m : modality)
      if (!m.present) return false;
    return true;
  }
};

struct DatasetManifest {
  int n_samples = 0;
  int n_classes = 0;
  int D = 0;
  int C = 16;
  int N_h = 16;
  std::map<std::string, int> folds;  // sample_id -> fold in [0, 5)
  std::string provenance;            // "synthetic" | "ingested"

  int local_rows(int m) const { return m == static_cast<int>(Modality::Rna) ? N_h : C; }
};

struct Dataset {
  std::vector<SampleRecord> records;
  DatasetManifest manifest;
};

struct SyntheticSpec {
  int n_classes = 3;
  int samples_per_class = 40;
  int D = 32;
  int C = 16;
  int N_h = 16;
  double class_separation = 4.0;    // centroid distance in within-class stds
  double modality_correlation = 0.3;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Three-modality Gaussian synthetic dataset. Per class a centroid is drawn;
/// per sample the three modality latents share a correlated component, and
/// global/local tensors are the latent plus independent noise. All modalities
/// present; folds stratified.
Dataset generate_synthetic(const SyntheticSpec& spec);

void save_dataset(const Dataset& ds, const std::string& dir);

struct IngestResult {
  Dataset dataset;
  std::vector<std::string> warnings;
};

IngestResult ingest(const std::string& dir);

/// Victim-assignment flavor for apply_mask. Independent draws each modality's
/// victims separately (the default contract). Balanced deals exact per-modality
/// quotas across samples so that coverage is maximal: at fraction f with
/// 3*f >= 1 every sample loses at least one modality, which is what drives the
/// removed-train NA row at 50%.
enum class MaskPolicy { Independent, Balanced };

/// Zeroes exactly round(fraction * n) samples per modality (present=false,
/// tensors zero-filled). No sample ever loses all three modalities.
std::vector<SampleRecord> apply_mask(const std::vector<SampleRecord>& records,
                                     double fraction_per_modality, std::uint64_t seed,
                                     MaskPolicy policy = MaskPolicy::Independent);

/// Stratified k-fold assignment; per class, fold sizes differ by at most one.
std::map<std::string, int> stratified_folds(const std::vector<SampleRecord>& records,
                                            int k_folds, std::uint64_t seed);

/// Checks SampleRecord invariants against a manifest; throws on violation.
void validate_records(const std::vector<SampleRecord>& records, const DatasetManifest& manifest);

}  // namespace mosare

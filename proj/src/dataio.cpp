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

#include "mosare/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "mosare/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mosare {

namespace {

constexpr int kMaxPatchRows = 2048;

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(cat("cannot open for writing: ", path.string()));
  out << content;
  if (!out) throw IoError(cat("write failed: ", path.string()));
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(cat("cannot open: ", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(cat("malformed JSON in ", path.string(), ": ", e.what()));
  }
}

json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Vec json_to_vec(const json& a, const std::string& where) {
  if (!a.is_array()) throw ParseError(cat(where, ": expected array"));
  Vec v(static_cast<Eigen::Index>(a.size()));
  Eigen::Index i = 0;
  for (const auto& x : a) {
    if (!x.is_number()) throw ParseError(cat(where, ": expected number"));
    v(i++) = x.get<double>();
  }
  return v;
}

Mat json_to_mat(const json& a, const std::string& where) {
  if (!a.is_array()) throw ParseError(cat(where, ": expected array of rows"));
  const auto n_rows = static_cast<Eigen::Index>(a.size());
  Mat m;
  Eigen::Index i = 0;
  for (const auto& row : a) {
    Vec v = json_to_vec(row, where);
    if (i == 0) m.resize(n_rows, v.size());
    if (v.size() != m.cols()) throw ParseError(cat(where, ": ragged rows"));
    m.row(i++) = v;
  }
  return m;
}

int json_int_field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ParseError(cat(where, ": missing field '", key, "'"));
  if (!j[key].is_number_integer()) throw ParseError(cat(where, ": field '", key, "' not an integer"));
  return j[key].get<int>();
}

/// Masked-modality counts per sample for the conflict checks below.
int hit_count(const std::array<std::vector<char>, kNumModalities>& mask, std::size_t i) {
  int c = 0;
  for (const auto& m : mask) c += m[i] != 0;
  return c;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_classes < 2) throw ConfigError("synthetic: n_classes must be >= 2");
  if (samples_per_class < 1) throw ConfigError("synthetic: samples_per_class must be positive");
  if (D < 1) throw ConfigError("synthetic: D must be positive");
  if (C < 1) throw ConfigError("synthetic: C must be positive");
  if (N_h < 1) throw ConfigError("synthetic: N_h must be positive");
  if (class_separation < 0) throw ConfigError("synthetic: class_separation must be >= 0");
  if (modality_correlation < 0 || modality_correlation > 1)
    throw ConfigError("synthetic: modality_correlation must be in [0, 1]");
  if (!(noise_std > 0)) throw ConfigError("synthetic: noise_std must be > 0");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  RngStream rng = RngStream::derive(spec.seed, "generate_synthetic");

  // Within-class per-coordinate std is noise_std * sqrt(2) (latent noise plus
  // observation noise). Centroids sit on orthonormal directions scaled so
  // every pairwise centroid distance equals class_separation in those units;
  // random centroids would make the realized separation a chi-squared draw.
  const double centroid_scale = spec.class_separation * spec.noise_std;
  const double rho = spec.modality_correlation;
  const double w_shared = std::sqrt(rho);
  const double w_own = std::sqrt(1.0 - rho);

  std::vector<Vec> centroids(static_cast<std::size_t>(spec.n_classes));
  if (spec.n_classes <= spec.D) {
    std::vector<Vec> basis;
    while (static_cast<int>(basis.size()) < spec.n_classes) {
      Vec v = rng.normal_vector(spec.D);
      for (const Vec& u : basis) v -= v.dot(u) * u;
      if (v.norm() < 1e-9) continue;
      basis.push_back(v.normalized());
    }
    for (int c = 0; c < spec.n_classes; ++c)
      centroids[static_cast<std::size_t>(c)] = centroid_scale * basis[static_cast<std::size_t>(c)];
  } else {
    // More classes than dimensions: fall back to random placement with the
    // same expected pairwise distance.
    const double sigma_c = centroid_scale / std::sqrt(static_cast<double>(spec.D));
    for (auto& c : centroids) c = rng.normal_vector(spec.D, sigma_c);
  }

  Dataset ds;
  ds.manifest.n_classes = spec.n_classes;
  ds.manifest.n_samples = spec.n_classes * spec.samples_per_class;
  ds.manifest.D = spec.D;
  ds.manifest.C = spec.C;
  ds.manifest.N_h = spec.N_h;
  ds.manifest.provenance = "synthetic";

  int serial = 0;
  for (int cls = 0; cls < spec.n_classes; ++cls) {
    for (int s = 0; s < spec.samples_per_class; ++s) {
      SampleRecord rec;
      char buf[16];
      std::snprintf(buf, sizeof buf, "s%04d", serial++);
      rec.sample_id = buf;
      rec.label = cls;
      Vec shared = rng.normal_vector(spec.D);
      for (int m = 0; m < kNumModalities; ++m) {
        Vec own = rng.normal_vector(spec.D);
        Vec latent = centroids[static_cast<std::size_t>(cls)] +
                     spec.noise_std * (w_shared * shared + w_own * own);
        ModalityData& md = rec.modality[static_cast<std::size_t>(m)];
        md.present = true;
        md.global = latent + rng.normal_vector(spec.D, spec.noise_std);
        const int rows = ds.manifest.local_rows(m);
        md.local.resize(rows, spec.D);
        for (int r = 0; r < rows; ++r)
          md.local.row(r) = (latent + rng.normal_vector(spec.D, spec.noise_std)).transpose();
      }
      ds.records.push_back(std::move(rec));
    }
  }

  ds.manifest.folds = stratified_folds(ds.records, 5, spec.seed);
  validate_records(ds.records, ds.manifest);
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root / "samples", ec);
  if (ec) throw IoError(cat("cannot create dataset directory: ", dir, ": ", ec.message()));

  json manifest;
  manifest["n_samples"] = ds.manifest.n_samples;
  manifest["n_classes"] = ds.manifest.n_classes;
  manifest["D"] = ds.manifest.D;
  manifest["C"] = ds.manifest.C;
  manifest["N_h"] = ds.manifest.N_h;
  manifest["provenance"] = ds.manifest.provenance;
  json folds = json::object();
  for (const auto& [id, fold] : ds.manifest.folds) folds[id] = fold;
  manifest["folds"] = std::move(folds);
  write_text_file(root / "manifest.json", manifest.dump(2) + "\n");

  for (const SampleRecord& rec : ds.records) {
    json j;
    j["label"] = rec.label;
    for (int m = 0; m < kNumModalities; ++m) {
      const ModalityData& md = rec.modality[static_cast<std::size_t>(m)];
      json jm;
      jm["present"] = md.present;
      jm["global"] = vec_to_json(md.global);
      jm["local"] = mat_to_json(md.local);
      j[modality_name(m)] = std::move(jm);
    }
    if (rec.patch_embeddings.rows() > 0) {
      j["n_patch"] = static_cast<int>(rec.patch_embeddings.rows());
      if (rec.patch_coords.rows() > 0) j["patch_coords"] = mat_to_json(rec.patch_coords);
      std::ofstream bin(root / "samples" / (rec.sample_id + ".wsi.bin"), std::ios::binary);
      if (!bin) throw IoError(cat("cannot write patch file for ", rec.sample_id));
      for (Eigen::Index r = 0; r < rec.patch_embeddings.rows(); ++r)
        for (Eigen::Index c = 0; c < rec.patch_embeddings.cols(); ++c) {
          float f = static_cast<float>(rec.patch_embeddings(r, c));
          bin.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
    write_text_file(root / "samples" / (rec.sample_id + ".json"), j.dump(2) + "\n");
  }
}

namespace {

Mat read_patch_bin(const fs::path& path, int n_patch, int d, const std::string& sample_id) {
  std::ifstream bin(path, std::ios::binary | std::ios::ate);
  if (!bin) throw ParseError(cat("missing patch file for ", sample_id, ": ", path.string()));
  const auto bytes = static_cast<std::uint64_t>(bin.tellg());
  const std::uint64_t expect = static_cast<std::uint64_t>(n_patch) * static_cast<std::uint64_t>(d) * 4;
  if (bytes != expect)
    throw DimensionError(cat(sample_id, ": patch file holds ", bytes, " bytes, expected ", expect));
  bin.seekg(0);
  Mat m(n_patch, d);
  for (int r = 0; r < n_patch; ++r)
    for (int c = 0; c < d; ++c) {
      float f;
      bin.read(reinterpret_cast<char*>(&f), sizeof f);
      m(r, c) = static_cast<double>(f);
    }
  if (!bin) throw ParseError(cat(sample_id, ": truncated patch file"));
  return m;
}

}  // namespace

IngestResult ingest(const std::string& dir) {
  fs::path root(dir);
  json manifest_json = read_json_file(root / "manifest.json");
  const std::string where = "manifest.json";

  IngestResult result;
  DatasetManifest& manifest = result.dataset.manifest;
  manifest.n_samples = json_int_field(manifest_json, "n_samples", where);
  manifest.n_classes = json_int_field(manifest_json, "n_classes", where);
  manifest.D = json_int_field(manifest_json, "D", where);
  manifest.C = json_int_field(manifest_json, "C", where);
  manifest.N_h = json_int_field(manifest_json, "N_h", where);
  if (!manifest_json.contains("provenance") || !manifest_json["provenance"].is_string())
    throw ParseError("manifest.json: missing string field 'provenance'");
  manifest.provenance = manifest_json["provenance"].get<std::string>();
  if (!manifest_json.contains("folds") || !manifest_json["folds"].is_object())
    throw ParseError("manifest.json: missing object field 'folds'");
  for (const auto& [id, fold] : manifest_json["folds"].items()) {
    if (!fold.is_number_integer()) throw ParseError(cat("manifest.json: fold for ", id, " not an integer"));
    manifest.folds[id] = fold.get<int>();
  }
  if (static_cast<int>(manifest.folds.size()) != manifest.n_samples)
    throw ParseError(cat("manifest.json: n_samples=", manifest.n_samples, " but folds lists ",
                         manifest.folds.size(), " samples"));

  for (const auto& [id, fold] : manifest.folds) {
    (void)fold;
    fs::path sample_path = root / "samples" / (id + ".json");
    json j = read_json_file(sample_path);
    SampleRecord rec;
    rec.sample_id = id;
    rec.label = json_int_field(j, "label", id);
    if (rec.label < 0 || rec.label >= manifest.n_classes)
      throw ParseError(cat(id, ": label ", rec.label, " outside [0, ", manifest.n_classes, ")"));
    for (int m = 0; m < kNumModalities; ++m) {
      const char* name = modality_name(m);
      if (!j.contains(name)) throw ParseError(cat(id, ": missing modality '", name, "'"));
      const json& jm = j[name];
      ModalityData& md = rec.modality[static_cast<std::size_t>(m)];
      if (!jm.contains("present") || !jm["present"].is_boolean())
        throw ParseError(cat(id, ".", name, ": missing boolean 'present'"));
      md.present = jm["present"].get<bool>();
      md.global = json_to_vec(jm.value("global", json::array()), cat(id, ".", name, ".global"));
      md.local = json_to_mat(jm.value("local", json::array()), cat(id, ".", name, ".local"));
      if (md.global.size() != manifest.D)
        throw DimensionError(cat(id, ".", name, ": global has dim ", md.global.size(),
                                 ", manifest D=", manifest.D));
      const int rows = manifest.local_rows(m);
      if (md.local.rows() != rows || md.local.cols() != manifest.D)
        throw DimensionError(cat(id, ".", name, ": local is ", md.local.rows(), "x", md.local.cols(),
                                 ", expected ", rows, "x", manifest.D));
      if (md.present) {
        if (!md.global.allFinite() || !md.local.allFinite())
          throw ParseError(cat(id, ".", name, ": non-finite values in present modality"));
      } else if (md.global.cwiseAbs().sum() != 0.0 || md.local.cwiseAbs().sum() != 0.0) {
        md.global.setZero();
        md.local.setZero();
        result.warnings.push_back(cat(id, ".", name, ": absent modality had nonzero tensors; zero-filled"));
      }
    }
    if (j.contains("n_patch")) {
      const int n_patch = json_int_field(j, "n_patch", id);
      if (n_patch < 1) throw ParseError(cat(id, ": n_patch must be positive"));
      Mat patches = read_patch_bin(root / "samples" / (id + ".wsi.bin"), n_patch, manifest.D, id);
      if (j.contains("patch_coords")) {
        rec.patch_coords = json_to_mat(j["patch_coords"], cat(id, ".patch_coords"));
        if (rec.patch_coords.rows() != n_patch || rec.patch_coords.cols() != 2)
          throw DimensionError(cat(id, ": patch_coords is ", rec.patch_coords.rows(), "x",
                                   rec.patch_coords.cols(), ", expected ", n_patch, "x2"));
      }
      if (n_patch > kMaxPatchRows) {
        RngStream sub = RngStream::derive(fnv1a64(id), "patch_downsample");
        std::vector<int> keep = sub.sample_without_replacement(n_patch, kMaxPatchRows);
        std::sort(keep.begin(), keep.end());
        Mat down(kMaxPatchRows, manifest.D);
        Mat down_coords;
        if (rec.patch_coords.rows() > 0) down_coords.resize(kMaxPatchRows, 2);
        for (int r = 0; r < kMaxPatchRows; ++r) {
          down.row(r) = patches.row(keep[static_cast<std::size_t>(r)]);
          if (down_coords.rows() > 0)
            down_coords.row(r) = rec.patch_coords.row(keep[static_cast<std::size_t>(r)]);
        }
        rec.patch_embeddings = std::move(down);
        rec.patch_coords = std::move(down_coords);
      } else {
        rec.patch_embeddings = std::move(patches);
      }
      if (!rec.patch_embeddings.allFinite()) throw ParseError(cat(id, ": non-finite patch values"));
    }
    result.dataset.records.push_back(std::move(rec));
  }

  validate_records(result.dataset.records, manifest);
  return result;
}

std::vector<SampleRecord> apply_mask(const std::vector<SampleRecord>& records,
                                     double fraction_per_modality, std::uint64_t seed,
                                     MaskPolicy policy) {
  if (fraction_per_modality < 0.0 || fraction_per_modality > 1.0)
    throw MaskingError(cat("mask fraction ", fraction_per_modality, " outside [0, 1]"));
  std::vector<SampleRecord> out = records;
  if (fraction_per_modality == 0.0) return out;

  for (const SampleRecord& r : records)
    if (!r.complete())
      throw MaskingError(cat("apply_mask requires complete records; ", r.sample_id, " already masked"));

  const auto n = records.size();
  const auto m = static_cast<std::size_t>(std::lround(fraction_per_modality * static_cast<double>(n)));
  if (3 * m > 2 * n)
    throw MaskingError(cat("fraction ", fraction_per_modality, " needs ", 3 * m,
                           " masked slots over ", n, " samples; some sample would lose all modalities"));

  RngStream rng = RngStream::derive(seed, "apply_mask");
  std::array<std::vector<char>, kNumModalities> mask;
  for (auto& v : mask) v.assign(n, 0);

  if (policy == MaskPolicy::Independent) {
    for (int mod = 0; mod < kNumModalities; ++mod)
      for (int i : rng.sample_without_replacement(static_cast<int>(n), static_cast<int>(m)))
        mask[static_cast<std::size_t>(mod)][static_cast<std::size_t>(i)] = 1;
    // Relocate victims of fully-masked samples while preserving exact counts.
    std::size_t budget = 10 * n + 100;
    for (std::size_t i = 0; i < n;) {
      if (hit_count(mask, i) < kNumModalities) {
        ++i;
        continue;
      }
      if (budget-- == 0) throw MaskingError("mask constraint unsatisfied after retry budget");
      int mod = static_cast<int>(rng.uniform_int(kNumModalities));
      std::size_t j = static_cast<std::size_t>(rng.uniform_int(n));
      if (j == i || mask[static_cast<std::size_t>(mod)][j] || hit_count(mask, j) >= kNumModalities - 1)
        continue;
      mask[static_cast<std::size_t>(mod)][i] = 0;
      mask[static_cast<std::size_t>(mod)][j] = 1;
    }
  } else {
    // Deal the 3m victim slots over a shuffled sample order, at most two per
    // sample, always drawing from the modality with the largest remaining
    // quota that does not already hit the sample.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::array<std::size_t, kNumModalities> quota;
    quota.fill(m);
    std::size_t slots = kNumModalities * m;
    std::size_t cursor = 0;
    std::size_t stall = 0;
    while (slots > 0) {
      if (stall > 2 * n + 10) throw MaskingError("mask constraint unsatisfied after retry budget");
      std::size_t i = order[cursor % n];
      ++cursor;
      if (hit_count(mask, i) >= kNumModalities - 1) {
        ++stall;
        continue;
      }
      int best = -1;
      for (int mod = 0; mod < kNumModalities; ++mod) {
        if (mask[static_cast<std::size_t>(mod)][i]) continue;
        if (quota[static_cast<std::size_t>(mod)] == 0) continue;
        if (best < 0 || quota[static_cast<std::size_t>(mod)] > quota[static_cast<std::size_t>(best)])
          best = mod;
      }
      if (best < 0) {
        ++stall;
        continue;
      }
      mask[static_cast<std::size_t>(best)][i] = 1;
      --quota[static_cast<std::size_t>(best)];
      --slots;
      stall = 0;
    }
  }

  for (std::size_t i = 0; i < n; ++i)
    for (int mod = 0; mod < kNumModalities; ++mod)
      if (mask[static_cast<std::size_t>(mod)][i]) {
        ModalityData& md = out[i].modality[static_cast<std::size_t>(mod)];
        md.present = false;
        md.global.setZero();
        md.local.setZero();
      }
  return out;
}

std::map<std::string, int> stratified_folds(const std::vector<SampleRecord>& records,
                                            int k_folds, std::uint64_t seed) {
  if (k_folds < 2) throw StratificationError("k_folds must be >= 2");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < records.size(); ++i)
    by_class[records[i].label].push_back(i);

  RngStream rng = RngStream::derive(seed, "stratified_folds");
  std::map<std::string, int> folds;
  int class_serial = 0;
  for (auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) < k_folds)
      throw StratificationError(cat("class ", label, " has ", members.size(),
                                    " samples, need >= ", k_folds));
    rng.shuffle(members);
    // Rotate the starting fold per class so overall fold sizes stay close.
    int at = class_serial++ % k_folds;
    for (std::size_t idx : members) {
      folds[records[idx].sample_id] = at;
      at = (at + 1) % k_folds;
    }
  }
  return folds;
}

void validate_records(const std::vector<SampleRecord>& records, const DatasetManifest& manifest) {
  if (static_cast<int>(records.size()) != manifest.n_samples)
    throw DimensionError(cat("record count ", records.size(), " != manifest n_samples ",
                             manifest.n_samples));
  for (const SampleRecord& rec : records) {
    if (rec.label < 0 || rec.label >= manifest.n_classes)
      throw ValueError(cat(rec.sample_id, ": label out of range"));
    bool any_present = false;
    for (int m = 0; m < kNumModalities; ++m) {
      const ModalityData& md = rec.modality[static_cast<std::size_t>(m)];
      if (md.global.size() != manifest.D)
        throw DimensionError(cat(rec.sample_id, ".", modality_name(m), ": bad global dim"));
      if (md.local.rows() != manifest.local_rows(m) || md.local.cols() != manifest.D)
        throw DimensionError(cat(rec.sample_id, ".", modality_name(m), ": bad local shape"));
      if (md.present) {
        any_present = true;
        if (!md.global.allFinite() || !md.local.allFinite())
          throw ValueError(cat(rec.sample_id, ".", modality_name(m), ": non-finite values"));
      } else if (md.global.cwiseAbs().sum() != 0.0 || md.local.cwiseAbs().sum() != 0.0) {
        throw ValueError(cat(rec.sample_id, ".", modality_name(m),
                             ": absent modality carries nonzero tensors"));
      }
    }
    if (!any_present) throw ValueError(cat(rec.sample_id, ": no modality present"));
  }
}

}  // namespace mosare

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

#include "mosare/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace mosare {
namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& raw) {
  try {
    std::size_t pos = 0;
    double v = std::stod(raw, &pos);
    if (pos != raw.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + raw + "'");
  }
}

long long parse_int(const std::string& key, const std::string& raw) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (ec != std::errc() || ptr != raw.data() + raw.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + raw + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + raw + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define MOSARE_FIELD_D(key, member)                                             \
  Field{key, [](const RunConfig& c) { return fmt_double(c.member); },           \
        [](RunConfig& c, const std::string& raw) { c.member = parse_double(key, raw); }}
#define MOSARE_FIELD_I(key, member)                                             \
  Field{key, [](const RunConfig& c) { return std::to_string(c.member); },       \
        [](RunConfig& c, const std::string& raw) {                              \
          c.member = static_cast<int>(parse_int(key, raw));                     \
        }}
#define MOSARE_FIELD_B(key, member)                                             \
  Field{key, [](const RunConfig& c) { return c.member ? "true" : "false"; },    \
        [](RunConfig& c, const std::string& raw) { c.member = parse_bool(key, raw); }}
#define MOSARE_FIELD_S(key, member)                                             \
  Field{key, [](const RunConfig& c) { return c.member; },                       \
        [](RunConfig& c, const std::string& raw) { c.member = raw; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      MOSARE_FIELD_D("train.lr", lr),
      MOSARE_FIELD_I("train.batch_size", batch_size),
      MOSARE_FIELD_I("train.epochs", epochs),
      MOSARE_FIELD_I("train.warmup_epochs", warmup_epochs),
      MOSARE_FIELD_D("train.beta1", beta1),
      MOSARE_FIELD_D("train.beta2", beta2),
      MOSARE_FIELD_D("train.adam_eps", adam_eps),
      MOSARE_FIELD_D("train.weight_decay", weight_decay),
      MOSARE_FIELD_D("train.grad_clip_norm", grad_clip_norm),
      Field{"train.seed",
            [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& raw) {
              c.seed = static_cast<std::uint64_t>(parse_int("train.seed", raw));
            }},
      MOSARE_FIELD_I("train.eval_fold", eval_fold),

      MOSARE_FIELD_D("loss.lambda1", lambda1),
      MOSARE_FIELD_D("loss.lambda2", lambda2),
      MOSARE_FIELD_D("loss.lambda3", lambda3),
      MOSARE_FIELD_D("loss.lambda4", lambda4),
      MOSARE_FIELD_D("loss.tau_symcl", tau_symcl),
      MOSARE_FIELD_D("loss.tau_mcl", tau_mcl),
      MOSARE_FIELD_B("loss.symcl_tau_multiplies", symcl_tau_multiplies),
      MOSARE_FIELD_B("loss.rec_on_masked", rec_loss_on_masked),

      MOSARE_FIELD_I("model.n_experts", n_experts),
      MOSARE_FIELD_I("model.top_k", top_k),
      MOSARE_FIELD_I("model.k_loc", k_loc),
      MOSARE_FIELD_I("model.d_attn", d_attn),
      MOSARE_FIELD_D("model.dropout", dropout),
      MOSARE_FIELD_B("model.renormalize_gate", renormalize_gate),
      MOSARE_FIELD_B("model.final_moe_concat", final_moe_concat),
      MOSARE_FIELD_B("model.rec_share_heads", rec_share_heads),
      MOSARE_FIELD_B("model.per_modality_heads", per_modality_heads),
      MOSARE_FIELD_B("model.use_cma", use_cma),
      MOSARE_FIELD_B("model.use_moe", use_moe),
      MOSARE_FIELD_B("model.use_rec", use_rec),
      MOSARE_FIELD_B("model.use_align", use_align),

      MOSARE_FIELD_I("align.m_comp", m_comp),
      MOSARE_FIELD_D("align.momentum", gmm_momentum),
      MOSARE_FIELD_I("align.sinkhorn_iters", sinkhorn_iters),
      MOSARE_FIELD_D("align.sinkhorn_reg", sinkhorn_reg),
      MOSARE_FIELD_D("align.var_floor", var_floor),
      MOSARE_FIELD_B("align.pure_em", pure_em),

      MOSARE_FIELD_S("encoders.mode", encoder_mode),

      MOSARE_FIELD_D("mask.fraction", mask_fraction),
      MOSARE_FIELD_S("mask.policy", mask_policy),

      MOSARE_FIELD_S("scenario.kind", scenario),
  };
  return table;
}

#undef MOSARE_FIELD_D
#undef MOSARE_FIELD_I
#undef MOSARE_FIELD_B
#undef MOSARE_FIELD_S

const Field* find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

const char* scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::MaskedTrainMaskedTest: return "masked_train_masked_test";
    case ScenarioKind::MaskedTrainUnmaskedTest: return "masked_train_unmasked_test";
    case ScenarioKind::RemovedTrainUnmaskedTest: return "removed_train_unmasked_test";
  }
  throw ValueError("unknown scenario kind");
}

ScenarioKind scenario_from_name(const std::string& name) {
  if (name == "masked_train_masked_test") return ScenarioKind::MaskedTrainMaskedTest;
  if (name == "masked_train_unmasked_test") return ScenarioKind::MaskedTrainUnmaskedTest;
  if (name == "removed_train_unmasked_test") return ScenarioKind::RemovedTrainUnmaskedTest;
  throw ConfigError("unknown scenario '" + name + "'");
}

void RunConfig::validate() const {
  if (lr <= 0) throw ConfigError("train.lr must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("train.warmup_epochs must be smaller than train.epochs");
  }
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (grad_clip_norm < 0) throw ConfigError("train.grad_clip_norm must be non-negative");
  if (eval_fold < 0) throw ConfigError("train.eval_fold must be non-negative");
  if (tau_symcl <= 0 || tau_mcl <= 0) throw ConfigError("temperatures must be positive");
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (n_experts < 1) throw ConfigError("model.n_experts must be at least 1");
  if (top_k < 1 || top_k > n_experts) {
    throw ConfigError("model.top_k must lie in [1, model.n_experts]");
  }
  if (k_loc < 1) throw ConfigError("model.k_loc must be at least 1");
  if (d_attn < 0) throw ConfigError("model.d_attn must be non-negative");
  if (dropout < 0 || dropout >= 1) throw ConfigError("model.dropout must lie in [0, 1)");
  if (m_comp < 1) throw ConfigError("align.m_comp must be at least 1");
  if (gmm_momentum < 0 || gmm_momentum > 1) {
    throw ConfigError("align.momentum must lie in [0, 1]");
  }
  if (sinkhorn_iters < 0) throw ConfigError("align.sinkhorn_iters must be non-negative");
  if (sinkhorn_reg <= 0) throw ConfigError("align.sinkhorn_reg must be positive");
  if (var_floor <= 0) throw ConfigError("align.var_floor must be positive");
  if (encoder_mode != "precomputed" && encoder_mode != "raw") {
    throw ConfigError("encoders.mode must be 'precomputed' or 'raw'");
  }
  if (mask_fraction < 0 || mask_fraction > 0.6) {
    throw ConfigError("mask.fraction must lie in [0, 0.6]");
  }
  if (mask_policy != "independent" && mask_policy != "balanced") {
    throw ConfigError("mask.policy must be 'independent' or 'balanced'");
  }
  scenario_from_name(scenario);
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> kv;
  for (const Field& f : fields()) kv[f.key] = f.get(*this);
  return kv;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [key, value] : kv) {
    const Field* f = find_field(key);
    if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
    f->set(cfg, value);
  }
  return cfg;
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [key, value] : to_map()) os << key << "=" << value << "\n";
  return os.str();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(serialize()); }

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = strip(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        line + "'");
    }
    std::string key = strip(line.substr(0, eq));
    std::string value = strip(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (find_field(key) == nullptr) throw ConfigError("unknown config key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_override(std::map<std::string, std::string>& kv, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must have the form key=value, got '" + assignment + "'");
  }
  std::string key = strip(assignment.substr(0, eq));
  std::string value = strip(assignment.substr(eq + 1));
  if (find_field(key) == nullptr) throw ConfigError("unknown config key '" + key + "'");
  kv[key] = value;
}

}  // namespace mosare

// SPDX-License-Identifier: Apache-2.0
#include "dqlora/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dqlora/errors.hpp"

namespace dqlora {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

const KeySpec& spec_for(const std::string& key) {
  const auto& keys = config_keys();
  auto it = std::find_if(keys.begin(), keys.end(),
                         [&](const KeySpec& k) { return k.name == key; });
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it;
}

bool parse_int(const std::string& s, long long& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  in >> out;
  return !in.fail() && in.eof() && std::isfinite(out);
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no") {
    out = false;
    return true;
  }
  return false;
}

void validate(const KeySpec& spec, const std::string& value) {
  long long i = 0;
  double r = 0.0;
  bool b = false;
  switch (spec.type) {
    case KeyType::kInt:
      if (!parse_int(value, i)) throw ConfigError(spec.name + ": expected an integer, got '" + value + "'");
      break;
    case KeyType::kReal:
      if (!parse_real(value, r)) throw ConfigError(spec.name + ": expected a finite real, got '" + value + "'");
      break;
    case KeyType::kBool:
      if (!parse_bool(value, b)) throw ConfigError(spec.name + ": expected true/false, got '" + value + "'");
      break;
    case KeyType::kChoice:
      if (std::find(spec.choices.begin(), spec.choices.end(), value) == spec.choices.end()) {
        std::string all;
        for (const auto& c : spec.choices) all += (all.empty() ? "" : "|") + c;
        throw ConfigError(spec.name + ": expected one of " + all + ", got '" + value + "'");
      }
      break;
    case KeyType::kString:
      break;
  }
}

}  // namespace

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"corpus", KeyType::kString, "corpus.dql", "corpus file read by train/evaluate", {}},
      {"corpus.n_train", KeyType::kInt, "300", "training utterances", {}},
      {"corpus.n_val", KeyType::kInt, "100", "validation utterances", {}},
      {"corpus.n_test", KeyType::kInt, "624", "test utterances", {}},
      {"corpus.seed", KeyType::kInt, "20240501", "corpus master seed", {}},
      {"corpus.min_tokens", KeyType::kInt, "3", "shortest transcript", {}},
      {"corpus.max_tokens", KeyType::kInt, "8", "longest transcript", {}},
      {"out", KeyType::kString, "run", "output directory (datagen: corpus file)", {}},
      {"stage", KeyType::kChoice, "teacher", "training stage", {"teacher", "student_base", "distill"}},
      {"seed", KeyType::kInt, "1", "training seed (init, shuffling, noise draws)", {}},
      {"snr_db", KeyType::kReal, "5", "noise level for distillation and noisy evaluation", {}},
      {"lambda", KeyType::kReal, "1", "KL distillation weight", {}},
      {"mu", KeyType::kReal, "0", "coalescence weight", {}},
      {"alpha", KeyType::kReal, "0", "coalescence decay rate in exp(-alpha*t)", {}},
      {"tau", KeyType::kReal, "1", "distillation temperature", {}},
      {"coal_mode", KeyType::kChoice, "weighted_sum", "coalescence reduction", {"mean", "weighted_sum"}},
      {"coal_normalize", KeyType::kBool, "false", "divide weighted sum by sum of weights", {}},
      {"kl_direction", KeyType::kChoice, "student_teacher", "KL argument order",
       {"student_teacher", "teacher_student"}},
      {"teacher_input", KeyType::kChoice, "noisy", "input the teacher sees while distilling",
       {"noisy", "clean"}},
      {"epochs", KeyType::kInt, "0", "epoch override for the selected stage (0 = stage default)", {}},
      {"epochs.teacher", KeyType::kInt, "30", "teacher stage epochs", {}},
      {"epochs.student_base", KeyType::kInt, "20", "student base stage epochs", {}},
      {"epochs.distill", KeyType::kInt, "20", "distillation stage epochs", {}},
      {"batch_size", KeyType::kInt, "8", "utterances per optimizer step", {}},
      {"lr.teacher", KeyType::kReal, "0.001", "teacher learning rate", {}},
      {"lr.student_base", KeyType::kReal, "0.001", "student base learning rate", {}},
      {"lr.distill", KeyType::kReal, "0.003", "adapter learning rate", {}},
      {"adam.beta1", KeyType::kReal, "0.9", "Adam first-moment decay", {}},
      {"adam.beta2", KeyType::kReal, "0.999", "Adam second-moment decay", {}},
      {"adam.eps", KeyType::kReal, "1e-8", "Adam epsilon", {}},
      {"teacher.blocks", KeyType::kInt, "4", "teacher encoder blocks", {}},
      {"teacher.d_model", KeyType::kInt, "64", "teacher width", {}},
      {"student.blocks", KeyType::kInt, "2", "student encoder blocks", {}},
      {"student.d_model", KeyType::kInt, "32", "student width", {}},
      {"model.conv_kernel", KeyType::kInt, "5", "temporal convolution length (odd)", {}},
      {"lora.rank", KeyType::kInt, "1", "adapter rank", {}},
      {"lora.alpha", KeyType::kReal, "2", "adapter scaling numerator", {}},
      {"quant.block_size", KeyType::kInt, "64", "elements per quantization block", {}},
      {"quant.codebook", KeyType::kChoice, "linear", "4-bit codebook", {"linear", "normal"}},
      {"teacher_checkpoint", KeyType::kString, "", "teacher checkpoint (default <out>/teacher.dqck)", {}},
      {"student_checkpoint", KeyType::kString, "",
       "student base checkpoint (default <out>/student_base.dqck)", {}},
      {"eval.rtf_utterances", KeyType::kInt, "20", "test utterances timed for RTF", {}},
      {"eval.rtf_repetitions", KeyType::kInt, "3", "RTF repetitions (median reported)", {}},
  };
  return keys;
}

Config::Config() {
  for (const KeySpec& k : config_keys()) values_[k.name] = k.default_value;
}

void Config::set(const std::string& key, const std::string& value) {
  const KeySpec& spec = spec_for(key);
  const std::string v = trim(value);
  validate(spec, v);
  values_[key] = v;
  explicit_.insert(key);
}

void Config::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("expected key=value, got '" + assignment + "'");
  }
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void Config::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      set_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  load_text(buf.str(), path.string());
}

const std::string& Config::get(const std::string& key) const {
  spec_for(key);
  return values_.at(key);
}

long long Config::get_int(const std::string& key) const {
  long long v = 0;
  if (spec_for(key).type != KeyType::kInt || !parse_int(get(key), v)) {
    throw ConfigError(key + " is not an integer key");
  }
  return v;
}

double Config::get_real(const std::string& key) const {
  double v = 0.0;
  if (spec_for(key).type != KeyType::kReal || !parse_real(get(key), v)) {
    throw ConfigError(key + " is not a real-valued key");
  }
  return v;
}

bool Config::get_bool(const std::string& key) const {
  bool v = false;
  if (spec_for(key).type != KeyType::kBool || !parse_bool(get(key), v)) {
    throw ConfigError(key + " is not a boolean key");
  }
  return v;
}

std::string Config::dump() const {
  std::string out;
  for (const KeySpec& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

}  // namespace dqlora

#include "run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace rohydr::cli {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(0, key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(0, key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(0, key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <std::size_t N, class T, class Convert>
std::array<T, N> to_array(const std::string& key, const std::string& v, Convert convert) {
  auto parts = split_commas(v);
  if (parts.size() != N) {
    throw ConfigError(0, key + ": expected " + std::to_string(N) + " comma separated values");
  }
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<T>(convert(key, parts[i]));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <class Field>
Setter size_key(Field field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    field(c) = static_cast<std::size_t>(to_uint(k, v));
  };
}

template <class Field>
Setter real_key(Field field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = to_double(k, v); };
}

template <class Field>
Setter bool_key(Field field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = to_bool(k, v); };
}

template <class Field>
Setter text_key(Field field) {
  return [field](RunConfig& c, const std::string&, const std::string& v) { field(c) = v; };
}

#define FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      // dataset
      {"n", size_key(FIELD(c.dataset.n))},
      {"seq_len", size_key(FIELD(c.dataset.seq_len))},
      {"dims",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.dataset.dims = to_array<data::kModalities, std::size_t>(k, v, to_uint);
       }},
      {"latent", size_key(FIELD(c.dataset.latent))},
      {"noise",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.dataset.noise = to_array<data::kModalities, double>(k, v, to_double);
       }},
      {"data_seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.dataset.seed = to_uint(k, v); }},
      {"train_fraction", real_key(FIELD(c.dataset.train_fraction))},
      {"val_fraction", real_key(FIELD(c.dataset.val_fraction))},
      {"test_fraction", real_key(FIELD(c.dataset.test_fraction))},
      // model
      {"width", size_key(FIELD(c.model.width))},
      {"tokens", size_key(FIELD(c.model.tokens))},
      {"heads", size_key(FIELD(c.model.heads))},
      {"conv_kernel", size_key(FIELD(c.model.conv_kernel))},
      {"lstm_hidden", size_key(FIELD(c.model.lstm_hidden))},
      {"denoiser_blocks", size_key(FIELD(c.model.denoiser_blocks))},
      {"fusion_blocks", size_key(FIELD(c.model.fusion_blocks))},
      {"mlp_hidden", size_key(FIELD(c.model.mlp_hidden))},
      {"fused_width", size_key(FIELD(c.model.fused_width))},
      {"head_hidden", size_key(FIELD(c.model.head_hidden))},
      {"diffusion_steps", size_key(FIELD(c.model.diffusion_steps))},
      {"x0_clip", real_key(FIELD(c.model.x0_clip))},
      {"use_hddm", bool_key(FIELD(c.model.components.hddm))},
      {"use_ur", bool_key(FIELD(c.model.components.ur))},
      {"use_disc", bool_key(FIELD(c.model.components.disc))},
      {"use_mr", bool_key(FIELD(c.model.components.mr))},
      {"baseline", bool_key(FIELD(c.model.zero_impute))},
      // training
      {"epochs", size_key(FIELD(c.train.epochs))},
      {"batch_size", size_key(FIELD(c.train.batch_size))},
      {"lr", real_key(FIELD(c.train.lr))},
      {"lr_disc", real_key(FIELD(c.train.lr_disc))},
      {"lambda_g", real_key(FIELD(c.train.lambda_g))},
      {"lambda_al", real_key(FIELD(c.train.lambda_al))},
      {"lambda_c", real_key(FIELD(c.train.lambda_c))},
      {"strategy",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.train.strategy = train::parse_strategy(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError(0, k + ": expected one, two or three, got '" + v + "'");
         }
       }},
      {"seed",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.seed = to_uint(k, v);
         c.seed_set = true;
       }},
      {"stride", size_key(FIELD(c.train.stride))},
      {"eval_stride", size_key(FIELD(c.train.eval_stride))},
      {"eval_batch", size_key(FIELD(c.train.eval_batch))},
      // protocol and plumbing
      {"missing_rate",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.missing_rate = to_double(k, v);
         c.rate_set = true;
       }},
      {"availability", text_key(FIELD(c.availability))},
      {"mask_seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.mask_seed = to_uint(k, v); }},
      {"seeds",
       [](RunConfig& c, const std::string&, const std::string& v) { c.seeds = parse_seed_list(v); }},
      {"data", text_key(FIELD(c.data_dir))},
      {"out", text_key(FIELD(c.out_dir))},
      {"checkpoint", text_key(FIELD(c.checkpoint))},
  };
  return table;
}

#undef FIELD

}  // namespace

ConfigError::ConfigError(std::size_t line, const std::string& what)
    : std::runtime_error(what), line_(line) {}

void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError(0, "unknown key '" + key + "'");
  it->second(cfg, key, value);
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(line_no, "missing key before '='");
    if (value.empty()) throw ConfigError(line_no, key + ": missing value");
    try {
      set_config_key(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(line_no, e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(0, "cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split_commas(text)) {
    if (part.empty()) continue;
    out.push_back(to_double("list", part));
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& part : split_commas(text)) {
    if (part.empty()) continue;
    out.push_back(to_uint("seeds", part));
  }
  if (out.empty()) throw ConfigError(0, "seeds: empty list");
  return out;
}

}  // namespace rohydr::cli

#include "adavib/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adavib/errors.hpp"

namespace adavib {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kSignatureStream = 11;
constexpr std::uint64_t kTrainStream = 12;
constexpr std::uint64_t kEvalStream = 13;
constexpr std::uint64_t kFlipStream = 14;
constexpr std::uint64_t kPretrainStream = 15;

constexpr const char* kDatasetMagic = "# adavib-dataset v1";
constexpr int kDecoderVersion = 1;

bool contains(const std::vector<ObjectId>& v, ObjectId o) {
  return std::find(v.begin(), v.end(), o) != v.end();
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
  if (n_objects == 0) fail("n_objects must be >= 1");
  if (TokenLayout::kFirstObject + n_objects + prompt_length > vocab_size) {
    fail("vocab_size " + std::to_string(vocab_size) +
         " cannot hold the end token, all object tokens and the prompt");
  }
  if (input_dim == 0 || tokens == 0) fail("input_dim and tokens must be >= 1");
  if (min_objects == 0 || min_objects > max_objects || max_objects > n_objects) {
    fail("need 1 <= min_objects <= max_objects <= n_objects");
  }
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (!(signature_scale > 0.0)) fail("signature_scale must be > 0");
  for (const auto& p : cooccur_pairs) {
    if (p.a >= n_objects || p.b >= n_objects || p.a == p.b) {
      fail("co-occurrence pair must name two distinct objects below n_objects");
    }
    if (!(p.probability >= 0.0 && p.probability <= 1.0)) {
      fail("co-occurrence probability must be in [0,1]");
    }
  }
}

std::string SynthConfig::to_header() const {
  std::ostringstream s;
  s << "n_objects=" << n_objects << " input_dim=" << input_dim << " tokens=" << tokens
    << " vocab_size=" << vocab_size << " train_size=" << train_size
    << " eval_size=" << eval_size << " noise_std=" << format_double(noise_std)
    << " seed=" << seed << " min_objects=" << min_objects << " max_objects=" << max_objects
    << " prompt_length=" << prompt_length
    << " signature_scale=" << format_double(signature_scale)
    << " cooccur=" << format_cooccur(cooccur_pairs);
  return s.str();
}

namespace {

double parse_double(const std::string& s, const std::string& what) {
  double x = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(what + ": bad number '" + s + "'");
  }
  return x;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::uint64_t x = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(what + ": bad integer '" + s + "'");
  }
  return x;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) {
      break;
    }
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::string format_cooccur(const std::vector<CooccurPair>& pairs) {
  std::string s;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    s += (i ? ";" : "") + std::to_string(p.a) + ":" + std::to_string(p.b) + ":" +
         format_double(p.probability);
  }
  return s;
}

std::vector<CooccurPair> parse_cooccur(const std::string& text) {
  std::vector<CooccurPair> out;
  if (text.empty()) {
    return out;
  }
  for (const auto& p : split(text, ';')) {
    const auto parts = split(p, ':');
    if (parts.size() != 3) {
      throw ParseError("bad co-occurrence pair '" + p + "' (expected a:b:probability)");
    }
    out.push_back({parse_u64(parts[0], "pair"), parse_u64(parts[1], "pair"),
                   parse_double(parts[2], "pair")});
  }
  return out;
}

SynthConfig SynthConfig::from_header(const std::string& line) {
  SynthConfig c;
  c.cooccur_pairs.clear();
  std::istringstream in(line);
  std::string kv;
  std::set<std::string> seen;
  while (in >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ParseError("dataset config: expected key=value, got '" + kv + "'");
    }
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    seen.insert(key);
    if (key == "n_objects") c.n_objects = parse_u64(val, key);
    else if (key == "input_dim") c.input_dim = parse_u64(val, key);
    else if (key == "tokens") c.tokens = parse_u64(val, key);
    else if (key == "vocab_size") c.vocab_size = parse_u64(val, key);
    else if (key == "train_size") c.train_size = parse_u64(val, key);
    else if (key == "eval_size") c.eval_size = parse_u64(val, key);
    else if (key == "noise_std") c.noise_std = parse_double(val, key);
    else if (key == "seed") c.seed = parse_u64(val, key);
    else if (key == "min_objects") c.min_objects = parse_u64(val, key);
    else if (key == "max_objects") c.max_objects = parse_u64(val, key);
    else if (key == "prompt_length") c.prompt_length = parse_u64(val, key);
    else if (key == "signature_scale") c.signature_scale = parse_double(val, key);
    else if (key == "cooccur") c.cooccur_pairs = parse_cooccur(val);
    else {
      throw ParseError("dataset config: unknown key '" + key + "'");
    }
  }
  for (const char* required : {"n_objects", "input_dim", "tokens", "vocab_size", "seed"}) {
    if (!seen.count(required)) {
      throw ParseError(std::string("dataset config: missing key '") + required + "'");
    }
  }
  return c;
}

std::vector<TokenId> fixed_prompt(const SynthConfig& cfg) {
  std::vector<TokenId> q;
  for (std::size_t i = 0; i < cfg.prompt_length; ++i) {
    q.push_back(TokenLayout::kFirstObject + cfg.n_objects + i);
  }
  return q;
}

namespace {

bool independent_signatures(const Matrix& sig) {
  const std::size_t k = sig.rows();
  for (std::size_t i = 0; i < k; ++i) {
    const double ni = std::sqrt(dot(sig.row(i), sig.row(i)));
    for (std::size_t j = i + 1; j < k; ++j) {
      const double nj = std::sqrt(dot(sig.row(j), sig.row(j)));
      if (std::abs(dot(sig.row(i), sig.row(j))) >= (1.0 - 1e-9) * ni * nj) {
        return false;
      }
    }
  }
  if (k > sig.cols()) {
    return true;
  }
  // Full rank via Gram-Schmidt when the dimension allows it.
  std::vector<Vector> basis;
  for (std::size_t i = 0; i < k; ++i) {
    Vector r(sig.row(i).begin(), sig.row(i).end());
    const double norm0 = std::sqrt(dot(r, r));
    for (const Vector& b : basis) {
      const double c = dot(r, b);
      for (std::size_t d = 0; d < r.size(); ++d) {
        r[d] -= c * b[d];
      }
    }
    const double norm = std::sqrt(dot(r, r));
    if (norm < 1e-6 * norm0) {
      return false;
    }
    for (double& x : r) {
      x /= norm;
    }
    basis.push_back(std::move(r));
  }
  return true;
}

Matrix make_signatures(const SynthConfig& cfg, const SeededRng& root) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    SeededRng rng = root.split(kSignatureStream).split(attempt);
    Matrix sig(cfg.n_objects, cfg.input_dim);
    for (double& x : sig.values()) {
      x = cfg.signature_scale * rng.normal();
    }
    if (independent_signatures(sig)) {
      return sig;
    }
  }
}

std::vector<ObjectId> draw_objects(SeededRng& rng, const SynthConfig& cfg) {
  const std::size_t n = cfg.min_objects + rng.uniform_index(cfg.max_objects - cfg.min_objects + 1);
  std::vector<ObjectId> pool(cfg.n_objects);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    pool[i] = i;
  }
  std::vector<ObjectId> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

DataSample make_sample(std::size_t id, std::vector<ObjectId> objects, bool spurious,
                       const SynthConfig& cfg, const Matrix& signatures, SeededRng& rng) {
  std::sort(objects.begin(), objects.end());
  const TokenLayout layout = cfg.layout();
  DataSample s;
  s.id = id;
  s.gold_objects = objects;
  s.present_spurious = spurious;
  s.prompt = fixed_prompt(cfg);
  for (ObjectId o : objects) {
    s.target.push_back(layout.token_of(o));
  }
  s.target.push_back(TokenLayout::kEos);
  s.v = Matrix(cfg.tokens, cfg.input_dim);
  for (std::size_t t = 0; t < cfg.tokens; ++t) {
    for (std::size_t d = 0; d < cfg.input_dim; ++d) {
      double x = 0.0;
      for (ObjectId o : objects) {
        x += signatures(o, d);
      }
      if (cfg.noise_std > 0.0) {
        x += cfg.noise_std * rng.normal();
      }
      s.v(t, d) = x;
    }
  }
  return s;
}

}  // namespace

SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const SeededRng root(cfg.seed);
  SynthDataset ds;
  ds.config = cfg;
  ds.signatures = make_signatures(cfg, root);
  std::size_t next_id = 0;

  for (std::size_t i = 0; i < cfg.train_size; ++i) {
    SeededRng rng = root.split(kTrainStream).split(i);
    std::vector<ObjectId> objs = draw_objects(rng, cfg);
    bool spurious = false;
    for (const auto& p : cfg.cooccur_pairs) {
      if (!contains(objs, p.a)) {
        continue;
      }
      const bool with_b = rng.uniform() < p.probability;
      const bool has_b = contains(objs, p.b);
      if (with_b && !has_b) {
        objs.push_back(p.b);
        spurious = true;
      } else if (!with_b && has_b) {
        objs.erase(std::find(objs.begin(), objs.end(), p.b));
      }
    }
    ds.train.push_back(make_sample(next_id++, std::move(objs), spurious, cfg, ds.signatures, rng));
  }

  for (std::size_t i = 0; i < cfg.eval_size; ++i) {
    SeededRng rng = root.split(kEvalStream).split(i);
    ds.eval.push_back(make_sample(next_id++, draw_objects(rng, cfg), false, cfg, ds.signatures, rng));
  }

  if (!cfg.cooccur_pairs.empty()) {
    for (std::size_t i = 0; i < cfg.eval_size; ++i) {
      SeededRng rng = root.split(kFlipStream).split(i);
      const CooccurPair& pair = cfg.cooccur_pairs[i % cfg.cooccur_pairs.size()];
      std::vector<ObjectId> objs{pair.a};
      const std::size_t want =
          cfg.min_objects + rng.uniform_index(cfg.max_objects - cfg.min_objects + 1);
      std::vector<ObjectId> candidates;
      for (ObjectId o = 0; o < cfg.n_objects; ++o) {
        if (o != pair.a) {
          candidates.push_back(o);
        }
      }
      for (std::size_t k = candidates.size(); k > 1; --k) {
        std::swap(candidates[k - 1], candidates[rng.uniform_index(k)]);
      }
      for (ObjectId c : candidates) {
        if (objs.size() >= want) {
          break;
        }
        objs.push_back(c);
        bool ok = true;
        for (const auto& p : cfg.cooccur_pairs) {
          if (contains(objs, p.a) && contains(objs, p.b)) {
            ok = false;
          }
        }
        if (!ok) {
          objs.pop_back();
        }
      }
      ds.flip.push_back(make_sample(next_id++, std::move(objs), false, cfg, ds.signatures, rng));
    }
  }
  return ds;
}

std::vector<DataSample> generate_pretraining_scenes(const SynthConfig& cfg, std::size_t count) {
  cfg.validate();
  const SeededRng root(cfg.seed);
  const Matrix signatures = make_signatures(cfg, root);
  const std::size_t flip_size = cfg.cooccur_pairs.empty() ? 0 : cfg.eval_size;
  std::size_t next_id = cfg.train_size + cfg.eval_size + flip_size;
  std::vector<DataSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng rng = root.split(kPretrainStream).split(i);
    out.push_back(make_sample(next_id++, draw_objects(rng, cfg), false, cfg, signatures, rng));
  }
  return out;
}

void require_compatible(const SynthConfig& cfg, const FrozenDecoderParams& decoder) {
  if (cfg.vocab_size != decoder.vocab_size()) {
    throw ConfigError("dataset vocabulary " + std::to_string(cfg.vocab_size) +
                      " does not match decoder vocabulary " +
                      std::to_string(decoder.vocab_size()));
  }
}

namespace {

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) {
      s += ',';
    }
    s += std::to_string(ids[i]);
  }
  return s;
}

}  // namespace

void write_split(std::ostream& out, const SynthConfig& cfg, const std::string& split_name,
                 const std::vector<DataSample>& samples) {
  out << kDatasetMagic << '\n';
  out << "# config " << cfg.to_header() << '\n';
  out << "# split " << split_name << '\n';
  out << "# id\tpresent_spurious\tgold\tprompt\ttarget\tfeatures(" << cfg.tokens << "x"
      << cfg.input_dim << ")\n";
  for (const DataSample& s : samples) {
    out << s.id << '\t' << (s.present_spurious ? 1 : 0) << '\t' << join_ids(s.gold_objects)
        << '\t' << join_ids(s.prompt) << '\t' << join_ids(s.target);
    for (double x : s.v.values()) {
      out << '\t' << format_double(x);
    }
    out << '\n';
  }
}

LoadedSplit read_split(std::istream& in, const std::string& source) {
  LoadedSplit ls;
  std::string line;
  std::size_t line_no = 0;
  std::size_t offset = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw ParseError(source + ":" + std::to_string(line_no) + " (byte offset " +
                     std::to_string(offset) + "): " + msg);
  };
  bool have_config = false;
  bool have_magic = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) {
      continue;
    }
    if (line[0] == '#') {
      if (line_no == 1) {
        if (line != kDatasetMagic) {
          fail("not an adavib dataset (expected '" + std::string(kDatasetMagic) + "')");
        }
        have_magic = true;
      } else if (line.rfind("# config ", 0) == 0) {
        try {
          ls.config = SynthConfig::from_header(line.substr(9));
        } catch (const ParseError& e) {
          fail(e.what());
        }
        have_config = true;
      } else if (line.rfind("# split ", 0) == 0) {
        ls.split = line.substr(8);
      }
      continue;
    }
    if (!have_magic || !have_config) {
      fail("missing dataset header");
    }
    offset = line_start;
    const auto f = split(line, '\t');
    const std::size_t n_feat = ls.config.tokens * ls.config.input_dim;
    if (f.size() != 5 + n_feat) {
      fail("expected " + std::to_string(5 + n_feat) + " fields, got " + std::to_string(f.size()));
    }
    DataSample s;
    try {
      s.id = parse_u64(f[0], "id");
      const auto flag = parse_u64(f[1], "present_spurious");
      if (flag > 1) {
        fail("present_spurious must be 0 or 1");
      }
      s.present_spurious = flag == 1;
      auto ids = [&](const std::string& field, const char* what) {
        std::vector<std::size_t> out;
        if (!field.empty()) {
          for (const auto& p : split(field, ',')) {
            out.push_back(parse_u64(p, what));
          }
        }
        return out;
      };
      s.gold_objects = ids(f[2], "gold");
      s.prompt = ids(f[3], "prompt");
      s.target = ids(f[4], "target");
      Vector feats(n_feat);
      for (std::size_t i = 0; i < n_feat; ++i) {
        feats[i] = parse_double(f[5 + i], "feature");
      }
      s.v = Matrix(ls.config.tokens, ls.config.input_dim, std::move(feats));
    } catch (const ParseError& e) {
      fail(e.what());
    }
    if (s.target.empty()) {
      fail("empty target sequence");
    }
    for (TokenId t : s.prompt) {
      if (t >= ls.config.vocab_size) fail("prompt token outside vocabulary");
    }
    for (TokenId t : s.target) {
      if (t >= ls.config.vocab_size) fail("target token outside vocabulary");
    }
    for (ObjectId o : s.gold_objects) {
      if (o >= ls.config.n_objects) fail("gold object id outside object range");
    }
    offset = line_start + line.size() + 1;
    ls.samples.push_back(std::move(s));
  }
  if (!have_magic || !have_config) {
    fail("missing dataset header");
  }
  return ls;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    fs::create_directories(target.parent_path());
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write " + tmp.string());
    }
    out << contents;
    if (!out.flush()) {
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError("cannot open " + path);
  }
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void save_dataset(const std::string& dir, const SynthDataset& ds) {
  const std::pair<const char*, const std::vector<DataSample>*> splits[] = {
      {"train", &ds.train}, {"eval", &ds.eval}, {"flip", &ds.flip}};
  for (const auto& [name, samples] : splits) {
    std::ostringstream out;
    write_split(out, ds.config, name, *samples);
    write_file_atomic((std::filesystem::path(dir) / (std::string(name) + ".tsv")).string(),
                      out.str());
  }
}

LoadedSplit load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open dataset file " + path);
  }
  return read_split(in, path);
}

SynthDataset load_dataset(const std::string& dir) {
  SynthDataset ds;
  const auto p = [&](const char* name) {
    return (std::filesystem::path(dir) / (std::string(name) + ".tsv")).string();
  };
  LoadedSplit train = load_split(p("train"));
  LoadedSplit eval = load_split(p("eval"));
  LoadedSplit flip = load_split(p("flip"));
  if (!(train.config == eval.config) || !(train.config == flip.config)) {
    throw ConfigError("dataset splits in " + dir + " were generated with different configs");
  }
  ds.config = train.config;
  ds.train = std::move(train.samples);
  ds.eval = std::move(eval.samples);
  ds.flip = std::move(flip.samples);
  // Signatures are a pure function of the config.
  ds.signatures = make_signatures(ds.config, SeededRng(ds.config.seed));
  return ds;
}

namespace {

json matrix_json(const std::string& name, std::size_t rows, std::size_t cols,
                 std::span<const double> values) {
  return json{{"name", name},
              {"shape", {rows, cols}},
              {"values", std::vector<double>(values.begin(), values.end())}};
}

json head_json(const std::string& prefix, const MlpProjectorParams& h) {
  json arr = json::array();
  arr.push_back(matrix_json(prefix + ".w_z", h.w_z.rows(), h.w_z.cols(), h.w_z.values()));
  arr.push_back(matrix_json(prefix + ".b_z", 1, h.b_z.size(), h.b_z));
  arr.push_back(matrix_json(prefix + ".w_h", h.w_h.rows(), h.w_h.cols(), h.w_h.values()));
  arr.push_back(matrix_json(prefix + ".b_h", 1, h.b_h.size(), h.b_h));
  return arr;
}

std::map<std::string, Matrix> read_params(const json& arr, const std::string& source) {
  std::map<std::string, Matrix> out;
  if (!arr.is_array()) {
    throw ParseError(source + ": 'params' must be an array");
  }
  for (const auto& p : arr) {
    if (!p.contains("name") || !p.contains("shape") || !p.contains("values")) {
      throw ParseError(source + ": parameter entry missing name/shape/values");
    }
    const std::string name = p.at("name").get<std::string>();
    const auto& shape = p.at("shape");
    if (!shape.is_array() || shape.size() != 2 || !shape[0].is_number_unsigned() ||
        !shape[1].is_number_unsigned()) {
      throw ParseError(source + ": bad shape header for " + name);
    }
    const auto rows = shape[0].get<std::size_t>();
    const auto cols = shape[1].get<std::size_t>();
    auto values = p.at("values").get<std::vector<double>>();
    if (values.size() != rows * cols) {
      throw ParseError(source + ": " + name + " has " + std::to_string(values.size()) +
                       " values for shape " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
    out.emplace(name, Matrix(rows, cols, std::move(values)));
  }
  return out;
}

MlpProjectorParams read_head(std::map<std::string, Matrix>& params, const std::string& prefix,
                             const std::string& source) {
  auto take = [&](const std::string& n) {
    const auto it = params.find(prefix + "." + n);
    if (it == params.end()) {
      throw ParseError(source + ": missing parameter " + prefix + "." + n);
    }
    return it->second;
  };
  auto as_vec = [&](const Matrix& m, const std::string& n) {
    if (m.rows() != 1) {
      throw ParseError(source + ": bias " + prefix + "." + n + " must have shape 1xN");
    }
    return Vector(m.values().begin(), m.values().end());
  };
  MlpProjectorParams h{take("w_z"), as_vec(take("b_z"), "b_z"), take("w_h"),
                       as_vec(take("b_h"), "b_h")};
  try {
    h.validate();
  } catch (const std::exception& e) {
    throw ParseError(source + ": " + prefix + ": " + e.what());
  }
  return h;
}

json config_json(const TrainConfig& c) {
  return json{{"mode", to_string(c.mode)},
              {"base_beta", c.base_beta},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"micro_batch", c.micro_batch},
              {"grad_accum", c.grad_accum},
              {"epochs", c.epochs},
              {"warmup_fraction", c.warmup_fraction},
              {"poly_decay_power", c.poly_decay_power},
              {"dropout_rate", c.dropout_rate},
              {"seed", c.seed},
              {"kl_direction", to_string(c.kl_direction)},
              {"pooled_posterior", c.pooled_posterior},
              {"sigma_floor", c.sigma_floor},
              {"sigma_init_gain", c.sigma_init_gain},
              {"sigma_init_bias", c.sigma_init_bias}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.mode = train_mode_from_string(j.at("mode").get<std::string>());
  c.base_beta = j.at("base_beta").get<double>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.micro_batch = j.at("micro_batch").get<std::size_t>();
  c.grad_accum = j.at("grad_accum").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.warmup_fraction = j.at("warmup_fraction").get<double>();
  c.poly_decay_power = j.at("poly_decay_power").get<double>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.kl_direction = kl_direction_from_string(j.at("kl_direction").get<std::string>());
  c.pooled_posterior = j.at("pooled_posterior").get<bool>();
  c.sigma_floor = j.at("sigma_floor").get<double>();
  c.sigma_init_gain = j.at("sigma_init_gain").get<double>();
  c.sigma_init_bias = j.at("sigma_init_bias").get<double>();
  return c;
}

json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": " + e.what());
  }
}

void check_header(const json& j, const char* format, int version, const std::string& source) {
  if (!j.is_object() || j.value("format", "") != format) {
    throw ParseError(source + ": not an " + format + " document");
  }
  const int v = j.value("version", -1);
  if (v != version) {
    throw ConfigError(source + ": " + format + " version " + std::to_string(v) +
                      " is not supported (this build reads version " + std::to_string(version) +
                      "); re-export it with a matching adavib release");
  }
}

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg) { return config_json(cfg).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  try {
    return config_from_json(parse_json(text, "config"));
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
}

std::string checkpoint_to_string(const Checkpoint& ckpt) {
  json params = head_json("mu_head", ckpt.mu_head);
  if (ckpt.sigma_head) {
    for (auto& p : head_json("sigma_head", *ckpt.sigma_head)) {
      params.push_back(std::move(p));
    }
  }
  json j{{"format", "adavib-checkpoint"},
         {"version", Checkpoint::kVersion},
         {"vocab_size", ckpt.vocab_size},
         {"config", config_json(ckpt.config)},
         {"params", std::move(params)}};
  return j.dump(1) + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text, const std::string& source) {
  const json j = parse_json(text, source);
  check_header(j, "adavib-checkpoint", Checkpoint::kVersion, source);
  try {
    Checkpoint c;
    c.config = config_from_json(j.at("config"));
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    auto params = read_params(j.at("params"), source);
    c.mu_head = read_head(params, "mu_head", source);
    if (params.count("sigma_head.w_z")) {
      c.sigma_head = read_head(params, "sigma_head", source);
    }
    if (uses_bottleneck(c.config.mode) && !c.sigma_head) {
      throw ParseError(source + ": bottleneck checkpoint without a scale head");
    }
    return c;
  } catch (const json::exception& e) {
    throw ParseError(source + ": " + e.what());
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file_atomic(path, checkpoint_to_string(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_string(read_file(path), path);
}

VibProjectorParams vib_from_checkpoint(const Checkpoint& ckpt, SeededRng& rng, double sigma_gain,
                                       double sigma_bias) {
  return init_vib_from(ckpt.mu_head, rng, sigma_gain, sigma_bias);
}

std::string decoder_to_string(const FrozenDecoderParams& d) {
  const Matrix& e = d.token_embeddings.table();
  json params = json::array();
  params.push_back(matrix_json("embeddings", e.rows(), e.cols(), e.values()));
  params.push_back(matrix_json("readout", d.readout.rows(), d.readout.cols(), d.readout.values()));
  params.push_back(matrix_json("mixing", d.mixing.rows(), d.mixing.cols(), d.mixing.values()));
  json j{{"format", "adavib-decoder"},
         {"version", kDecoderVersion},
         {"vocab_size", d.vocab_size()},
         {"params", std::move(params)}};
  return j.dump(1) + "\n";
}

FrozenDecoderParams decoder_from_string(const std::string& text, const std::string& source) {
  const json j = parse_json(text, source);
  check_header(j, "adavib-decoder", kDecoderVersion, source);
  auto params = read_params(j.at("params"), source);
  for (const char* n : {"embeddings", "readout", "mixing"}) {
    if (!params.count(n)) {
      throw ParseError(source + ": missing parameter " + std::string(n));
    }
  }
  FrozenDecoderParams d{FrozenEmbeddings(params.at("embeddings")), params.at("readout"),
                        params.at("mixing")};
  try {
    d.validate();
  } catch (const DimensionError& e) {
    throw ParseError(source + ": " + e.what());
  }
  return d;
}

void save_decoder(const std::string& path, const FrozenDecoderParams& decoder) {
  write_file_atomic(path, decoder_to_string(decoder));
}

FrozenDecoderParams load_decoder(const std::string& path) {
  return decoder_from_string(read_file(path), path);
}

}  // namespace adavib

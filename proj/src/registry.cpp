#include "trajaux/registry.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <functional>
#include <set>

#include "trajaux/decoder_visible.hpp"
#include "trajaux/dist_losses.hpp"
#include "trajaux/error.hpp"
#include "trajaux/traj_losses.hpp"

namespace trajaux {

const std::vector<LossSpec>& loss_catalog() {
  static const std::vector<LossSpec> specs = {
      {"stp", "STP", "trajectory", 1.0},
      {"ctube", "T1", "trajectory", 1.0},
      {"rig", "T2", "trajectory", 1.0},
      {"jfr", "T3", "trajectory", 1e-3},
      {"local_jfr", "T3-Local", "trajectory", 1e-3},
      {"dst_jfr", "T5", "trajectory", 1.0},
      {"mstb_jfr", "T6", "trajectory", 1e-3},
      {"contrastive", "T7", "contrastive", 1.0},
      {"sigreg_state", "L1", "distributional", 1.0},
      {"sigreg_tangent", "L2", "distributional", 1.0},
      {"ctube_sectional", "L3", "distributional", 1.0},
      {"stp_cmf", "L4", "distributional", 1.0},
      {"vicreg_vc", "L5", "distributional", 1.0},
      {"sw_iso", "L6", "distributional", 1.0},
      {"score_match", "L9", "distributional", 1.0},
      {"cpc", "L12", "predictive", 1.0},
      {"byol", "L13", "predictive", 1.0},
      {"ijepa", "L14", "predictive", 1.0},
      {"fisher_jfr", "Fisher-JFR", "fisher", 1e-3},
      {"fisher_mstb", "Fisher-MSTB", "fisher", 1e-3},
      {"fisher_local_jfr", "Fisher-Local-JFR", "fisher", 1e-3},
      {"dv_jepa", "DV-JEPA", "decoder-visible", 1.0},
  };
  return specs;
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

class HyperReader {
 public:
  explicit HyperReader(const Hyper& hp) : hp_(hp) {}

  double num(const std::string& key, double def) {
    const std::string* s = get(key);
    if (!s) return def;
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
    if (ec != std::errc() || p != s->data() + s->size()) bad(key, *s);
    return v;
  }

  std::size_t count(const std::string& key, std::size_t def) {
    const std::string* s = get(key);
    if (!s) return def;
    return parse_size(key, *s);
  }

  bool flag(const std::string& key, bool def) {
    const std::string* s = get(key);
    if (!s) return def;
    const std::string v = lower(*s);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    bad(key, *s);
    return def;
  }

  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> def) {
    const std::string* s = get(key);
    if (!s) return def;
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= s->size()) {
      const std::size_t end = std::min(s->find(',', start), s->size());
      out.push_back(parse_size(key, s->substr(start, end - start)));
      start = end + 1;
    }
    return out;
  }

  std::vector<int> ints(const std::string& key, const std::vector<int>& def) {
    const std::string* s = get(key);
    if (!s) return def;
    std::vector<int> out;
    for (std::size_t v : sizes(key, {})) out.push_back(static_cast<int>(v));
    return out;
  }

  void finish(std::string_view loss) const {
    for (const auto& [k, v] : hp_) {
      if (!seen_.count(k)) {
        throw ConfigError("unknown option '" + k + "' for loss " + std::string(loss));
      }
    }
  }

  const std::set<std::string>& seen() const { return seen_; }

 private:
  const std::string* get(const std::string& key) {
    seen_.insert(key);
    auto it = hp_.find(key);
    return it == hp_.end() ? nullptr : &it->second;
  }

  std::size_t parse_size(const std::string& key, const std::string& s) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad(key, s);
    return v;
  }

  [[noreturn]] static void bad(const std::string& key, const std::string& v) {
    throw ConfigError("option " + key + ": cannot parse '" + v + "'");
  }

  const Hyper& hp_;
  std::set<std::string> seen_;
};

MemoryBank read_bank(HyperReader& r) {
  return MemoryBank(r.count("bank_capacity", 512), r.count("bank_k", 8), r.num("bank_tau", 0.1));
}

SketchedOptions read_sketch(HyperReader& r) {
  SketchedOptions o;
  o.dprime = r.count("dprime", o.dprime);
  o.directions = r.count("directions", o.directions);
  return o;
}

FisherOptions read_fisher(HyperReader& r, FisherVariant v) {
  FisherOptions o;
  o.variant = v;
  if (v == FisherVariant::Mstb) o.scales = r.sizes("scales", o.scales);
  o.margin_weighting = r.flag("margin_weighting", false);
  o.margin.gamma = r.num("gamma", o.margin.gamma);
  o.margin.q = r.num("q", o.margin.q);
  return o;
}

std::unique_ptr<AuxLoss> build(const std::string& id, std::size_t D, std::uint64_t seed, HyperReader& r) {
  if (id == "stp") return std::make_unique<StpLoss>();
  if (id == "ctube") return std::make_unique<CtubeLoss>();
  if (id == "rig") {
    RigOptions o;
    o.rank = r.count("rank", o.rank);
    o.width = r.count("width", o.width);
    o.log_diag_init = r.num("log_diag_init", o.log_diag_init);
    o.euclidean = r.flag("euclidean", o.euclidean);
    return std::make_unique<RigLoss>(D, o, seed);
  }
  if (id == "jfr") return std::make_unique<JfrLoss>();
  if (id == "local_jfr") return std::make_unique<LocalJfrLoss>(read_bank(r));
  if (id == "dst_jfr") {
    return std::make_unique<DstJfrLoss>(r.ints("layers", {4, 8, 12, 16}),
                                        static_cast<int>(r.count("final_layer", 16)));
  }
  if (id == "mstb_jfr") return std::make_unique<MstbJfrLoss>(r.sizes("scales", {1, 2, 3}), r.flag("raw", false));
  if (id == "contrastive") {
    return std::make_unique<ContrastiveLoss>(D, r.count("proj_dim", 128), r.num("tau", 0.07), seed);
  }
  if (id == "sigreg_state") return std::make_unique<SigregStateLoss>(D, read_sketch(r), seed);
  if (id == "sigreg_tangent") return std::make_unique<SigregTangentLoss>(D, read_sketch(r), seed);
  if (id == "ctube_sectional") return std::make_unique<SectionalLoss>(r.count("triples", 4));
  if (id == "stp_cmf") return std::make_unique<StpCmfLoss>(D, read_sketch(r), seed);
  if (id == "vicreg_vc") {
    return std::make_unique<VicregVcLoss>(D, r.count("dprime", 64), r.num("eps", 1e-4), r.num("mu", 1.0), seed);
  }
  if (id == "sw_iso") return std::make_unique<SwIsoLoss>(D, read_sketch(r), seed);
  if (id == "score_match") {
    ScoreOptions o;
    o.dprime = r.count("dprime", o.dprime);
    o.width = r.count("width", o.width);
    o.lambda_sm = r.num("lambda_sm", o.lambda_sm);
    o.raw = r.flag("raw", o.raw);
    return std::make_unique<ScoreMatchLoss>(D, o, seed);
  }
  if (id == "cpc") return std::make_unique<CpcLoss>(D, r.count("horizon", 2), r.num("tau", 0.07), seed);
  if (id == "byol") {
    return std::make_unique<ByolLoss>(D, r.count("width", 256), r.count("out", 128), r.num("tau_ema", 0.996), seed);
  }
  if (id == "ijepa") {
    IjepaOptions o;
    o.mask_ratio = r.num("mask_ratio", o.mask_ratio);
    o.posemb_dim = r.count("posemb_dim", o.posemb_dim);
    o.width = r.count("width", o.width);
    return std::make_unique<IjepaLoss>(D, o, seed);
  }
  if (id == "fisher_jfr") return std::make_unique<FisherJfrLoss>(read_fisher(r, FisherVariant::Jfr));
  if (id == "fisher_mstb") return std::make_unique<FisherJfrLoss>(read_fisher(r, FisherVariant::Mstb));
  if (id == "fisher_local_jfr") {
    FisherOptions o = read_fisher(r, FisherVariant::Local);
    return std::make_unique<FisherJfrLoss>(o, read_bank(r));
  }
  if (id == "dv_jepa") {
    DvJepaOptions o;
    o.horizons = r.sizes("horizons", o.horizons);
    o.width = r.count("width", o.width);
    o.tau_kl = r.num("tau_kl", o.tau_kl);
    o.margin = r.num("hinge_margin", o.margin);
    o.beta = r.num("beta", o.beta);
    return std::make_unique<DvJepaLoss>(D, o, seed);
  }
  throw ConfigError("no constructor for loss " + id);
}

}  // namespace

const LossSpec& find_loss(std::string_view name) {
  const std::string n = lower(name);
  for (const LossSpec& s : loss_catalog()) {
    if (s.id == n || lower(s.cell) == n) return s;
  }
  std::string known;
  for (const LossSpec& s : loss_catalog()) known += (known.empty() ? "" : ", ") + s.id;
  throw ConfigError("unknown loss '" + std::string(name) + "' (known: " + known + ")");
}

std::unique_ptr<AuxLoss> make_loss(std::string_view name, std::size_t D, std::uint64_t seed, const Hyper& hp) {
  if (D == 0) throw ConfigError("hidden width must be positive");
  const LossSpec& spec = find_loss(name);
  HyperReader r(hp);
  const std::size_t margin = r.count("margin", 2), min_len = r.count("min_len", 3);
  auto loss = build(spec.id, D, seed, r);
  loss->margin = margin;
  loss->min_len = min_len;
  r.finish(spec.id);
  return loss;
}

std::vector<std::string> hyper_keys(std::string_view name) {
  const LossSpec& spec = find_loss(name);
  const Hyper none;
  HyperReader r(none);
  build(spec.id, 4, 0, r);
  return {r.seen().begin(), r.seen().end()};
}

}  // namespace trajaux

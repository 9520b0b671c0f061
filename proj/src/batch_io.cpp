#include "trajaux/batch_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "trajaux/error.hpp"

namespace trajaux {

static_assert(std::endian::native == std::endian::little, "binary batches assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'R', 'J', 'B'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("batch file truncated");
  return v;
}

void put_doubles(std::ostream& out, std::span<const double> xs) {
  out.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size() * sizeof(double)));
}

void get_doubles(std::istream& in, std::span<double> xs) {
  if (!in.read(reinterpret_cast<char*>(xs.data()), static_cast<std::streamsize>(xs.size() * sizeof(double)))) {
    throw DataError("batch file truncated");
  }
}

void put_spans(std::ostream& out, const std::vector<Span>& spans) {
  for (const Span& s : spans) {
    put<std::uint64_t>(out, s.lo);
    put<std::uint64_t>(out, s.hi);
  }
}

std::vector<Span> get_spans(std::istream& in, std::size_t n) {
  std::vector<Span> out(n);
  for (Span& s : out) {
    s.lo = get<std::uint64_t>(in);
    s.hi = get<std::uint64_t>(in);
  }
  return out;
}

// guards against absurd headers before allocating
constexpr std::uint64_t kMaxElems = std::uint64_t{1} << 32;

nlohmann::json spans_json(const std::vector<Span>& spans) {
  nlohmann::json a = nlohmann::json::array();
  for (const Span& s : spans) a.push_back({s.lo, s.hi});
  return a;
}

std::vector<Span> spans_from(const nlohmann::json& a) {
  std::vector<Span> out;
  for (const auto& s : a) {
    if (!s.is_array() || s.size() != 2) throw DataError("span entries must be [lo, hi] pairs");
    out.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>()});
  }
  return out;
}

Tensor tensor_from(const nlohmann::json& a, const Shape& shape) {
  auto v = a.get<std::vector<double>>();
  if (v.size() != shape_numel(shape)) throw ShapeError("batch JSON: tensor length does not match B x S x D");
  return Tensor(shape, std::move(v));
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void write_binary(std::ostream& out, const TrajectoryBatch& batch) {
  batch.validate();
  out.write(kMagic, 4);
  put(out, kVersion);
  put<std::uint64_t>(out, batch.B());
  put<std::uint64_t>(out, batch.S());
  put<std::uint64_t>(out, batch.D());
  put_doubles(out, batch.hidden.data());
  put_spans(out, batch.spans);
  put<std::uint8_t>(out, batch.has_labels() ? 1 : 0);
  for (int l : batch.labels) put<std::int32_t>(out, l);
  put<std::uint8_t>(out, batch.prompt_spans.empty() ? 0 : 1);
  put_spans(out, batch.prompt_spans);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(batch.layer_stack.size()));
  for (const auto& [layer, t] : batch.layer_stack) {
    put<std::int32_t>(out, layer);
    put_doubles(out, t.data());
  }
  if (!out) throw DataError("failed writing batch");
}

TrajectoryBatch read_binary(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a TRJB batch file");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw DataError("unsupported batch version " + std::to_string(version));
  const auto B = get<std::uint64_t>(in), S = get<std::uint64_t>(in), D = get<std::uint64_t>(in);
  if (B == 0 || S == 0 || D == 0 || B * S > kMaxElems / D) throw DataError("batch header has a bad shape");
  TrajectoryBatch batch;
  const Shape shape{B, S, D};
  batch.hidden = Tensor(shape);
  get_doubles(in, batch.hidden.data());
  batch.spans = get_spans(in, B);
  if (get<std::uint8_t>(in)) {
    batch.labels.resize(B * S);
    for (int& l : batch.labels) l = get<std::int32_t>(in);
  }
  if (get<std::uint8_t>(in)) batch.prompt_spans = get_spans(in, B);
  const auto n_layers = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const int layer = get<std::int32_t>(in);
    Tensor t(shape);
    get_doubles(in, t.data());
    batch.layer_stack.emplace(layer, std::move(t));
  }
  batch.validate();
  return batch;
}

nlohmann::json batch_to_json(const TrajectoryBatch& batch) {
  nlohmann::json j;
  j["shape"] = {batch.B(), batch.S(), batch.D()};
  j["hidden"] = batch.hidden.vec();
  j["spans"] = spans_json(batch.spans);
  if (batch.has_labels()) j["labels"] = batch.labels;
  if (!batch.prompt_spans.empty()) j["prompt_spans"] = spans_json(batch.prompt_spans);
  if (!batch.layer_stack.empty()) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [layer, t] : batch.layer_stack) layers[std::to_string(layer)] = t.vec();
    j["layers"] = std::move(layers);
  }
  return j;
}

TrajectoryBatch batch_from_json(const nlohmann::json& j) {
  try {
    const auto dims = j.at("shape").get<std::vector<std::size_t>>();
    if (dims.size() != 3) throw ShapeError("batch JSON: shape must have three entries");
    const Shape shape{dims[0], dims[1], dims[2]};
    TrajectoryBatch batch;
    batch.hidden = tensor_from(j.at("hidden"), shape);
    batch.spans = spans_from(j.at("spans"));
    if (j.contains("labels")) batch.labels = j["labels"].get<std::vector<int>>();
    if (j.contains("prompt_spans")) batch.prompt_spans = spans_from(j["prompt_spans"]);
    if (j.contains("layers")) {
      for (const auto& [k, v] : j["layers"].items()) batch.layer_stack.emplace(std::stoi(k), tensor_from(v, shape));
    }
    batch.validate();
    return batch;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("batch JSON: ") + e.what());
  }
}

void save_batch(const std::string& path, const TrajectoryBatch& batch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  if (ends_with(path, ".json")) {
    out << batch_to_json(batch).dump() << '\n';
  } else {
    write_binary(out, batch);
  }
  if (!out) throw DataError("failed writing " + path);
}

TrajectoryBatch load_batch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  if (ends_with(path, ".json")) {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
    return batch_from_json(j);
  }
  return read_binary(in);
}

}  // namespace trajaux

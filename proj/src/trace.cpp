#include <ostream>

#include "ni/experiment.hpp"
#include "ni/layers.hpp"

namespace ni::exp {

std::vector<TraceRecord> collect_trace(const core::Model& model, const Array& inputs,
                                       const core::ForwardOptions& options) {
  constexpr std::size_t kChunk = 256;
  const std::size_t n = inputs.dim(0);
  const std::size_t width = inputs.size() / n;
  std::vector<TraceRecord> out;
  for (std::size_t lo = 0; lo < n; lo += kChunk) {
    const std::size_t hi = std::min(n, lo + kChunk);
    Shape shape = inputs.shape();
    shape[0] = hi - lo;
    const Array part(shape, std::vector<double>(inputs.data() + lo * width, inputs.data() + hi * width));
    std::vector<std::vector<TraceRecord>> per_sample(hi - lo);
    core::ForwardOptions o = options;
    o.observer = [&](std::size_t script, std::size_t iteration, const Array& compat, const Array& types) {
      const std::size_t f = compat.dim(0), b = compat.dim(1), s = compat.dim(2), dt = types.dim(2);
      for (std::size_t i = 0; i < b; ++i) {
        TraceRecord r{lo + i, script, iteration, Array({f, s}), Array({s, dt})};
        for (std::size_t u = 0; u < f; ++u) {
          for (std::size_t e = 0; e < s; ++e) r.compat[u * s + e] = compat[(u * b + i) * s + e];
        }
        std::copy_n(types.data() + i * s * dt, s * dt, r.types.data());
        per_sample[i].push_back(std::move(r));
      }
      if (options.observer) options.observer(script, iteration, compat, types);
    };
    core::predict_values(model, part, o);
    for (auto& recs : per_sample) {
      for (auto& r : recs) out.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

Json rows(const Array& a) {
  Json j = Json::array();
  const std::size_t cols = a.dim(1);
  for (std::size_t r = 0; r < a.dim(0); ++r) {
    j.push_back(std::vector<double>(a.data() + r * cols, a.data() + (r + 1) * cols));
  }
  return j;
}

Array from_rows(const Json& j) {
  const std::size_t r = j.size();
  const std::size_t c = r ? j.at(0).size() : 0;
  Array a({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    if (j.at(i).size() != c) throw Error("format", "ragged matrix in trace record");
    for (std::size_t k = 0; k < c; ++k) a[i * c + k] = j.at(i).at(k).get<double>();
  }
  return a;
}

}  // namespace

Json to_json(const TraceRecord& r) {
  return Json{{"sample", r.sample},
              {"script", r.script},
              {"iteration", r.iteration},
              {"compat", rows(r.compat)},
              {"types", rows(r.types)}};
}

TraceRecord trace_record_from_json(const Json& j) {
  try {
    return TraceRecord{j.at("sample"), j.at("script"), j.at("iteration"), from_rows(j.at("compat")),
                       from_rows(j.at("types"))};
  } catch (const Json::exception& e) {
    throw Error("format", std::string("trace record: ") + e.what());
  }
}

void write_trace(std::ostream& os, const std::vector<TraceRecord>& records) {
  for (const TraceRecord& r : records) os << to_json(r).dump() << '\n';
}

}  // namespace ni::exp

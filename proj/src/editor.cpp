#include "control4d/editor.hpp"

#include <httplib.h>

#include <chrono>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <nlohmann/json.hpp>
#include <thread>

#include "control4d/errors.hpp"
#include "control4d/image_io.hpp"
#include "control4d/rng.hpp"

namespace c4d {

using nlohmann::json;

void EditRequest::validate() const {
  if (!original.defined() || original.dim() != 3 || original.size(0) != 3) {
    throw UsageError("edit request: original must be [3,H,W]");
  }
  auto same = [&](const torch::Tensor& t, const char* name) {
    if (t.defined() && t.sizes() != original.sizes()) {
      throw UsageError(std::string("edit request: ") + name + " resolution differs from original");
    }
  };
  same(render, "render");
  same(condition, "condition");
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw UsageError("edit request: noise_level must be in [0, 1]");
}

// ---------------------------------------------------------------------------
// Synthetic editor

bool SyntheticEditorConfig::is_identity_style() const {
  static const std::array<double, 12> id{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  return style == id;
}

std::array<double, 3> synthetic_global_shift(const SyntheticEditorConfig& cfg, int frame_id, int camera_id,
                                             int64_t iteration) {
  if (cfg.jitter_std == 0.0) return {0.0, 0.0, 0.0};
  const uint64_t key = hash_keys({cfg.seed_base, static_cast<uint64_t>(frame_id), static_cast<uint64_t>(camera_id),
                                  static_cast<uint64_t>(iteration), 0x51f7ULL});
  auto gen = at::make_generator<at::CPUGeneratorImpl>(key);
  auto draw = torch::randn({3}, gen, torch::kDouble);
  auto a = draw.accessor<double, 1>();
  return {a[0] * cfg.jitter_std, a[1] * cfg.jitter_std, a[2] * cfg.jitter_std};
}

EditedFrame synthetic_edit(const EditRequest& request, const SyntheticEditorConfig& cfg) {
  request.validate();
  torch::NoGradGuard guard;
  const auto& in = request.original;
  torch::Tensor out;
  if (cfg.is_identity_style()) {
    out = in.clone();
  } else {
    auto m = torch::tensor(std::vector<double>(cfg.style.begin(), cfg.style.end()), in.options()).view({3, 4});
    auto flat = in.reshape({3, -1});
    out = (torch::matmul(m.slice(1, 0, 3), flat) + m.slice(1, 3, 4)).view(in.sizes());
  }
  if (cfg.jitter_std != 0.0) {
    const auto shift = synthetic_global_shift(cfg, request.frame_id, request.camera_id, request.iteration);
    out = out + torch::tensor(std::vector<double>(shift.begin(), shift.end()), in.options()).view({3, 1, 1});
  }
  if (cfg.detail_jitter_std != 0.0 && request.noise_level != 0.0) {
    const uint64_t key = hash_keys({cfg.seed_base, static_cast<uint64_t>(request.frame_id),
                                    static_cast<uint64_t>(request.camera_id), static_cast<uint64_t>(request.iteration),
                                    0xde7a11ULL});
    auto gen = at::make_generator<at::CPUGeneratorImpl>(key);
    out = out + torch::randn(in.sizes(), gen, in.options()) * (cfg.detail_jitter_std * request.noise_level);
  }
  EditedFrame f;
  f.image = out.clamp(0.0, 1.0);
  f.request = request;
  f.editor_id = "synthetic";
  f.iteration = request.iteration;
  return f;
}

// ---------------------------------------------------------------------------
// Remote editor

json encode_edit_request(const EditRequest& request) {
  request.validate();
  auto img = [](const torch::Tensor& t, const torch::Tensor& fallback) {
    return base64_encode(encode_png(t.defined() ? t : fallback));
  };
  json j;
  j["render_png_b64"] = img(request.render, request.original);
  j["original_png_b64"] = img(request.original, request.original);
  j["condition_png_b64"] = img(request.condition, torch::full_like(request.original, 0.5));
  j["prompt"] = request.prompt;
  j["noise_level"] = request.noise_level;
  j["seed"] = request.seed;
  return j;
}

EditedFrame decode_edit_response(const std::string& body, const EditRequest& request) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw TransportError(std::string("remote editor: response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("edited_png_b64") || !j["edited_png_b64"].is_string()) {
    throw TransportError("remote editor: response lacks edited_png_b64");
  }
  EditedFrame f;
  try {
    f.image = decode_png(base64_decode(j["edited_png_b64"].get<std::string>()));
  } catch (const SchemaError& e) {
    throw TransportError(std::string("remote editor: bad image payload: ") + e.what());
  }
  if (f.image.sizes() != request.original.sizes()) {
    throw TransportError("remote editor: returned image resolution does not match the request");
  }
  f.request = request;
  f.editor_id = j.contains("editor_id") && j["editor_id"].is_string() ? j["editor_id"].get<std::string>() : "remote";
  f.iteration = request.iteration;
  return f;
}

namespace {

struct Endpoint {
  std::string base;
  std::string path_prefix;
};

Endpoint split_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  const auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
  const auto slash = url.find('/', host_start);
  if (slash == std::string::npos) return {url, ""};
  std::string prefix = url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, slash), prefix};
}

}  // namespace

EditedFrame remote_edit(const EditRequest& request, const RemoteEditorOptions& options) {
  if (options.endpoint.empty()) throw TransportError("remote editor: no endpoint configured");
  if (options.attempts < 1) throw ConfigError("remote editor: attempts must be >= 1");
  const std::string body = encode_edit_request(request).dump();
  const auto ep = split_endpoint(options.endpoint);

  std::string last_error;
  double delay = options.backoff_s;
  for (int attempt = 1; attempt <= options.attempts; ++attempt) {
    httplib::Client client(ep.base);
    const auto secs = static_cast<time_t>(options.timeout_s);
    const auto usecs = static_cast<time_t>((options.timeout_s - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(ep.path_prefix + "/edit", body, "application/json");
    if (!res) {
      last_error = "attempt " + std::to_string(attempt) + ": " + httplib::to_string(res.error());
    } else if (res->status != 200) {
      last_error = "attempt " + std::to_string(attempt) + ": HTTP " + std::to_string(res->status);
    } else {
      try {
        return decode_edit_response(res->body, request);
      } catch (const TransportError& e) {
        last_error = "attempt " + std::to_string(attempt) + ": " + e.what();
      }
    }
    if (attempt < options.attempts && delay > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      delay *= 2.0;
    }
  }
  throw TransportError("remote editor at " + options.endpoint + " failed after " + std::to_string(options.attempts) +
                       " attempt(s); last error: " + last_error);
}

EditedFrame RemoteEditor::edit(const EditRequest& request) {
  auto f = remote_edit(request, options_);
  last_id_ = f.editor_id;
  return f;
}

// ---------------------------------------------------------------------------
// Normals

NormalMap extract_normals(const torch::Tensor& depth, const CameraModel& cam, const torch::Tensor& alpha) {
  cam.validate();
  TORCH_CHECK(depth.dim() == 2, "extract_normals: depth must be [H,W]");
  const int64_t h = depth.size(0), w = depth.size(1);
  auto z = depth.detach().to(torch::kDouble).contiguous();
  auto valid = z > 0.0;
  if (alpha.defined()) valid = valid & (alpha.detach().to(torch::kDouble) > 0.5);
  NormalMap out;
  out.valid = valid.clone();
  out.normals = torch::zeros({3, h, w}, torch::kDouble);
  out.empty = !valid.any().item<bool>();
  if (!out.empty) {
    auto za = z.accessor<double, 2>();
    auto va = valid.accessor<bool, 2>();
    auto na = out.normals.accessor<double, 3>();
    auto ok = out.valid.accessor<bool, 2>();
    auto point = [&](int64_t v, int64_t u) {
      const double d = za[v][u];
      return std::array<double, 3>{d * (u - cam.cx) / cam.fx, d * (v - cam.cy) / cam.fy, d};
    };
    auto diff = [](const std::array<double, 3>& a, const std::array<double, 3>& b, double s) {
      return std::array<double, 3>{(a[0] - b[0]) * s, (a[1] - b[1]) * s, (a[2] - b[2]) * s};
    };
    for (int64_t v = 0; v < h; ++v) {
      for (int64_t u = 0; u < w; ++u) {
        if (!va[v][u]) continue;
        const bool l = u > 0 && va[v][u - 1], r = u + 1 < w && va[v][u + 1];
        const bool t = v > 0 && va[v - 1][u], b = v + 1 < h && va[v + 1][u];
        if (!(l || r) || !(t || b)) {
          ok[v][u] = false;
          continue;
        }
        const auto du = l && r ? diff(point(v, u + 1), point(v, u - 1), 0.5)
                               : (r ? diff(point(v, u + 1), point(v, u), 1.0) : diff(point(v, u), point(v, u - 1), 1.0));
        const auto dv = t && b ? diff(point(v + 1, u), point(v - 1, u), 0.5)
                               : (b ? diff(point(v + 1, u), point(v, u), 1.0) : diff(point(v, u), point(v - 1, u), 1.0));
        std::array<double, 3> n{du[1] * dv[2] - du[2] * dv[1], du[2] * dv[0] - du[0] * dv[2],
                                du[0] * dv[1] - du[1] * dv[0]};
        const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
        if (!(len > 0.0)) {
          ok[v][u] = false;
          continue;
        }
        for (int c = 0; c < 3; ++c) na[c][v][u] = n[c] / len;
      }
    }
    out.empty = !out.valid.any().item<bool>();
  }
  out.encoded = torch::where(out.valid.unsqueeze(0), (out.normals + 1.0) * 0.5, torch::full_like(out.normals, 0.5))
                    .to(torch::kFloat);
  out.normals = out.normals.to(torch::kFloat);
  return out;
}

double noise_schedule(int64_t iteration, int64_t total, double n_max, double n_min, NoiseShape shape) {
  if (total <= 0) return n_min;
  const double s = std::clamp(static_cast<double>(iteration) / static_cast<double>(total), 0.0, 1.0);
  if (s <= 0.0) return n_max;
  if (s >= 1.0) return n_min;
  const double lo = std::min(n_min, n_max), hi = std::max(n_min, n_max);
  switch (shape) {
    case NoiseShape::kCosine:
      return std::clamp(n_min + (n_max - n_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * s)), lo, hi);
    case NoiseShape::kLinear:
    default:
      return std::clamp(n_max + (n_min - n_max) * s, lo, hi);
  }
}

}  // namespace c4d

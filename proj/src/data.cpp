#include "control4d/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "control4d/errors.hpp"
#include "control4d/image_io.hpp"
#include "control4d/json_util.hpp"
#include "control4d/rng.hpp"

namespace c4d {

using nlohmann::json;

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }

std::string camera_dir(int camera) { return std::to_string(camera); }

}  // namespace

std::string frame_filename(int frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d.png", frame);
  return buf;
}

bool Dataset::has_masks() const {
  return !records.empty() && std::all_of(records.begin(), records.end(), [](const auto& r) { return r.mask.has_value(); });
}

json cameras_to_json(const std::vector<CameraModel>& cams) {
  json out = json::array();
  for (const auto& c : cams) {
    out.push_back({{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"R", c.R}, {"t", c.t},
                   {"width", c.width}, {"height", c.height}});
  }
  return out;
}

void write_cameras(const fs::path& path, const std::vector<CameraModel>& cams) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write " + path.string());
  out << cameras_to_json(cams).dump(2) << "\n";
}

namespace {

std::optional<CameraModel> parse_camera(const json& j, size_t index, std::vector<std::string>& errors) {
  const std::string where = "cams.json[" + std::to_string(index) + "]";
  if (!j.is_object()) {
    errors.push_back(where + ": not an object");
    return std::nullopt;
  }
  static const std::set<std::string> known{"fx", "fy", "cx", "cy", "R", "t", "width", "height"};
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) errors.push_back(where + ": unknown field '" + k + "'");
  }
  CameraModel c;
  bool ok = true;
  auto num = [&](const char* key, double& out) {
    if (!j.contains(key) || !j[key].is_number()) {
      errors.push_back(where + ": missing or non-numeric '" + key + "'");
      ok = false;
    } else {
      out = j[key].get<double>();
    }
  };
  auto integer = [&](const char* key, int& out) {
    if (!j.contains(key) || !j[key].is_number_integer()) {
      errors.push_back(where + ": missing or non-integer '" + key + "'");
      ok = false;
    } else {
      out = j[key].get<int>();
    }
  };
  auto arr = [&](const char* key, double* out, size_t n) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != n) {
      errors.push_back(where + ": '" + key + "' must be an array of " + std::to_string(n) + " numbers");
      ok = false;
      return;
    }
    for (size_t i = 0; i < n; ++i) {
      if (!j[key][i].is_number()) {
        errors.push_back(where + ": '" + key + "' must be an array of " + std::to_string(n) + " numbers");
        ok = false;
        return;
      }
      out[i] = j[key][i].get<double>();
    }
  };
  num("fx", c.fx);
  num("fy", c.fy);
  num("cx", c.cx);
  num("cy", c.cy);
  arr("R", c.R.data(), 9);
  arr("t", c.t.data(), 3);
  integer("width", c.width);
  integer("height", c.height);
  if (!ok) return std::nullopt;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    errors.push_back(where + ": " + e.what());
    return std::nullopt;
  }
  return c;
}

}  // namespace

std::vector<CameraModel> read_cameras(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open camera file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_array() || j.empty()) throw ConfigError(path.string() + " must be a non-empty array of cameras");
  std::vector<std::string> errors;
  std::vector<CameraModel> cams;
  for (size_t i = 0; i < j.size(); ++i) {
    if (auto c = parse_camera(j[i], i, errors)) cams.push_back(*c);
  }
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += (msg.empty() ? "" : "; ") + e;
    throw ConfigError(msg);
  }
  return cams;
}

Dataset load_dataset(const fs::path& root) {
  std::vector<std::string> errors;
  Dataset ds;
  ds.root = root;
  if (!fs::is_directory(root)) throw DatasetError({"dataset root " + root.string() + " is not a directory"});

  const auto cams_path = root / "cams.json";
  // Entries of cams.json; a camera that fails to parse still counts so that
  // its frames are checked too.
  std::vector<std::optional<CameraModel>> parsed;
  bool cams_ok = false;
  if (!fs::exists(cams_path)) {
    errors.push_back("missing calibration file " + cams_path.string());
  } else {
    json j;
    try {
      std::ifstream in(cams_path);
      j = json::parse(in);
    } catch (const json::exception& e) {
      errors.push_back("cams.json is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_null()) {
      if (!j.is_array() || j.empty()) {
        errors.push_back("cams.json must be a non-empty array of cameras");
      } else {
        cams_ok = true;
        for (size_t i = 0; i < j.size(); ++i) {
          parsed.push_back(parse_camera(j[i], i, errors));
          if (parsed.back()) ds.cameras.push_back(*parsed.back());
        }
      }
    }
  }

  const auto frames_dir = root / "frames";
  if (!fs::is_directory(frames_dir)) errors.push_back("missing frames directory " + frames_dir.string());
  const auto masks_dir = root / "masks";
  const bool masks = fs::is_directory(masks_dir);

  if (cams_ok && fs::is_directory(frames_dir)) {
    ds.num_cameras = static_cast<int>(parsed.size());
    // Frame count comes from the first camera; every camera must match it.
    int frames = 0;
    while (fs::exists(frames_dir / camera_dir(0) / frame_filename(frames))) ++frames;
    if (frames == 0) errors.push_back("no frames found under " + (frames_dir / camera_dir(0)).string());
    std::set<std::string> expected;
    for (int f = 0; f < frames; ++f) expected.insert(frame_filename(f));
    auto scan = [&](const fs::path& dir) {
      for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        const bool numeric = !name.empty() && std::all_of(name.begin(), name.end(), ::isdigit);
        if (!entry.is_directory() || !numeric || std::stoi(name) >= ds.num_cameras) {
          errors.push_back("unexpected entry " + entry.path().string() + " (no matching camera in cams.json)");
          continue;
        }
        for (const auto& file : fs::directory_iterator(entry.path())) {
          if (!expected.count(file.path().filename().string())) {
            errors.push_back("unexpected entry " + file.path().string() + " (camera 0 has " + std::to_string(frames) +
                             " frames)");
          }
        }
      }
    };
    scan(frames_dir);
    if (masks) scan(masks_dir);
    ds.num_frames = frames;
    for (int f = 0; f < frames; ++f) {
      for (int c = 0; c < ds.num_cameras; ++c) {
        FrameRecord r;
        r.frame_id = f;
        r.camera_id = c;
        r.time = ds.time_of(f);
        r.image = frames_dir / camera_dir(c) / frame_filename(f);
        const auto& cam = parsed[static_cast<size_t>(c)];
        if (!fs::exists(r.image)) {
          errors.push_back("missing frame " + r.image.string());
        } else if (cam) {
          try {
            const auto [w, h] = png_size(r.image);
            if (w != cam->width || h != cam->height) {
              errors.push_back(r.image.string() + ": size " + std::to_string(w) + "x" + std::to_string(h) +
                               " does not match camera " + std::to_string(c) + " (" + std::to_string(cam->width) +
                               "x" + std::to_string(cam->height) + ")");
            }
          } catch (const SchemaError& e) {
            errors.push_back(e.what());
          }
        }
        if (masks) {
          auto m = masks_dir / camera_dir(c) / frame_filename(f);
          if (!fs::exists(m)) {
            errors.push_back("missing mask " + m.string());
          } else {
            r.mask = m;
          }
        }
        ds.records.push_back(std::move(r));
      }
    }
  }
  if (!errors.empty()) throw DatasetError(std::move(errors));
  return ds;
}

torch::Tensor load_images(const Dataset& ds) {
  std::vector<torch::Tensor> all;
  all.reserve(ds.records.size());
  for (const auto& r : ds.records) all.push_back(read_png(r.image));
  auto stacked = torch::stack(all);
  return stacked.view({ds.num_frames, ds.num_cameras, 3, stacked.size(2), stacked.size(3)});
}

torch::Tensor load_masks(const Dataset& ds) {
  if (!ds.has_masks()) return {};
  std::vector<torch::Tensor> all;
  for (const auto& r : ds.records) all.push_back((read_gray_png(*r.mask) > (127.5f / 255.0f)).to(torch::kFloat));
  auto stacked = torch::stack(all);
  return stacked.view({ds.num_frames, ds.num_cameras, stacked.size(1), stacked.size(2)});
}

// ---------------------------------------------------------------------------
// Synthetic scene spec

namespace {

Vec3 eval_cubic(const std::array<std::array<double, 3>, 4>& c, double t) {
  Vec3 p{};
  for (int a = 0; a < 3; ++a) p[a] = c[0][a] + t * (c[1][a] + t * (c[2][a] + t * c[3][a]));
  return p;
}

double unit_draw(uint64_t& state) {
  state = splitmix64(state);
  return static_cast<double>(state >> 11) * 0x1.0p-53;
}

}  // namespace

void SyntheticSceneSpec::validate() const {
  if (num_frames < 2) throw ConfigError("scene: num_frames must be >= 2");
  if (ring.count < 1) throw ConfigError("scene: ring.count must be >= 1");
  if (!(ring.focal > 0.0) || ring.width < 1 || ring.height < 1) throw ConfigError("scene: bad ring intrinsics");
  if (!(ring.elevation_deg > -90.0 && ring.elevation_deg < 90.0)) throw ConfigError("scene: elevation out of range");
  for (const auto& b : bounds) {
    if (!(b.hi > b.lo)) throw ConfigError("scene: empty bounds");
  }
  double corner = 0.0;
  for (const auto& b : bounds) corner += std::max(b.lo * b.lo, b.hi * b.hi);
  if (!(ring.radius > std::sqrt(corner))) throw ConfigError("scene: camera ring must lie outside the scene box");
  for (double c : background) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("scene: background outside [0,1]");
  }
  if (blobs.empty() && random_blobs <= 0) throw ConfigError("scene: no blobs");
  for (size_t i = 0; i < blobs.size(); ++i) {
    const auto& b = blobs[i];
    const std::string where = "scene: blob " + std::to_string(i);
    if (!(b.peak_density > 0.0)) throw ConfigError(where + " density must be positive");
    if (!(b.radius > 0.0)) throw ConfigError(where + " radius must be positive");
    for (double a : b.albedo) {
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError(where + " albedo outside [0,1]");
    }
    for (int k = 0; k <= 200; ++k) {
      const auto p = eval_cubic(b.trajectory, k / 200.0);
      for (int a = 0; a < 3; ++a) {
        if (!(p[a] >= bounds[a].lo && p[a] <= bounds[a].hi)) {
          throw ConfigError(where + " trajectory leaves the scene bounds at t=" + std::to_string(k / 200.0));
        }
      }
    }
  }
}

SyntheticSceneSpec SyntheticSceneSpec::default_spec() {
  SyntheticSceneSpec s;
  BlobSpec a;
  a.trajectory = {{{-0.35, -0.1, 0.05}, {0.45, 0.1, 0.1}, {0.0, 0.0, -0.15}, {0.0, 0.0, 0.0}}};
  a.radius = 0.28;
  a.peak_density = 12.0;
  a.albedo = {0.85, 0.25, 0.2};
  a.latent_signature = {1, 0, 0, 0, 0, 0, 0, 0};
  BlobSpec b;
  b.trajectory = {{{0.3, 0.25, -0.1}, {-0.1, -0.5, 0.1}, {0.0, 0.25, 0.0}, {0.0, 0.0, 0.1}}};
  b.radius = 0.22;
  b.peak_density = 12.0;
  b.albedo = {0.2, 0.5, 0.85};
  b.latent_signature = {0, 1, 0, 0, 0, 0, 0, 0};
  s.blobs = {a, b};
  return s;
}

json SyntheticSceneSpec::to_json() const {
  json jb = json::array();
  for (const auto& b : blobs) {
    jb.push_back({{"trajectory", b.trajectory},
                  {"radius", b.radius},
                  {"peak_density", b.peak_density},
                  {"albedo", b.albedo},
                  {"latent_signature", b.latent_signature}});
  }
  json bj = json::array();
  for (const auto& b : bounds) bj.push_back({b.lo, b.hi});
  return {{"blobs", jb},
          {"bounds", bj},
          {"ring",
           {{"count", ring.count},
            {"radius", ring.radius},
            {"elevation_deg", ring.elevation_deg},
            {"azimuth_offset_deg", ring.azimuth_offset_deg},
            {"focal", ring.focal},
            {"width", ring.width},
            {"height", ring.height}}},
          {"num_frames", num_frames},
          {"background", background},
          {"seed", seed},
          {"random_blobs", random_blobs}};
}

SyntheticSceneSpec SyntheticSceneSpec::from_json(const json& j) {
  using namespace jsonu;
  require_keys_subset(j, {"blobs", "bounds", "ring", "num_frames", "background", "seed", "random_blobs"}, "scene");
  SyntheticSceneSpec s;
  s.blobs.clear();
  if (j.contains("blobs")) {
    if (!j["blobs"].is_array()) throw ConfigError("scene.blobs: expected an array");
    for (const auto& jb : j["blobs"]) {
      require_keys_subset(jb, {"trajectory", "radius", "peak_density", "albedo", "latent_signature"}, "scene.blobs[]");
      BlobSpec b;
      read(jb, "trajectory", b.trajectory, "scene.blobs[]");
      read(jb, "radius", b.radius, "scene.blobs[]");
      read(jb, "peak_density", b.peak_density, "scene.blobs[]");
      read_array(jb, "albedo", b.albedo, "scene.blobs[]");
      read(jb, "latent_signature", b.latent_signature, "scene.blobs[]");
      s.blobs.push_back(b);
    }
  } else {
    s.blobs = default_spec().blobs;
  }
  if (j.contains("bounds")) {
    const auto& jb = j["bounds"];
    if (!jb.is_array() || jb.size() != 3) throw ConfigError("scene.bounds: expected 3 [lo, hi] pairs");
    for (size_t a = 0; a < 3; ++a) {
      if (!jb[a].is_array() || jb[a].size() != 2) throw ConfigError("scene.bounds: expected 3 [lo, hi] pairs");
      s.bounds[a] = {jb[a][0].get<double>(), jb[a][1].get<double>()};
    }
  }
  if (j.contains("ring")) {
    const auto& r = j["ring"];
    require_keys_subset(r, {"count", "radius", "elevation_deg", "azimuth_offset_deg", "focal", "width", "height"},
                        "scene.ring");
    read(r, "count", s.ring.count, "scene.ring");
    read(r, "radius", s.ring.radius, "scene.ring");
    read(r, "elevation_deg", s.ring.elevation_deg, "scene.ring");
    read(r, "azimuth_offset_deg", s.ring.azimuth_offset_deg, "scene.ring");
    read(r, "focal", s.ring.focal, "scene.ring");
    read(r, "width", s.ring.width, "scene.ring");
    read(r, "height", s.ring.height, "scene.ring");
  }
  read(j, "num_frames", s.num_frames, "scene");
  read_array(j, "background", s.background, "scene");
  read(j, "seed", s.seed, "scene");
  read(j, "random_blobs", s.random_blobs, "scene");
  return s;
}

// ---------------------------------------------------------------------------
// Analytic oracle

SyntheticScene::SyntheticScene(SyntheticSceneSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  blobs_ = spec_.blobs;
  if (blobs_.empty()) {
    uint64_t state = hash_keys({spec_.seed, 0xb10bULL});
    for (int i = 0; i < spec_.random_blobs; ++i) {
      BlobSpec b;
      b.radius = 0.15 + 0.15 * unit_draw(state);
      b.peak_density = 8.0 + 8.0 * unit_draw(state);
      for (auto& a : b.albedo) a = 0.1 + 0.8 * unit_draw(state);
      // Start well inside the box; the bounded velocity keeps the path inside it.
      for (int a = 0; a < 3; ++a) {
        const auto& bd = spec_.bounds[a];
        const double span = bd.hi - bd.lo;
        b.trajectory[0][a] = bd.lo + span * (0.3 + 0.4 * unit_draw(state));
        b.trajectory[1][a] = span * 0.2 * (unit_draw(state) - 0.5);
      }
      b.latent_signature.assign(8, 0.0);
      b.latent_signature[static_cast<size_t>(i) % 8] = 1.0;
      blobs_.push_back(b);
    }
    auto copy = spec_;
    copy.blobs = blobs_;
    copy.validate();
  }
}

std::vector<CameraModel> SyntheticScene::cameras() const {
  std::vector<CameraModel> cams;
  for (int i = 0; i < spec_.ring.count; ++i) {
    cams.push_back(ring_camera(spec_.ring.azimuth_offset_deg + 360.0 * i / spec_.ring.count, spec_.ring.width,
                               spec_.ring.height));
  }
  return cams;
}

CameraModel SyntheticScene::ring_camera(double azimuth_deg, int width, int height) const {
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double el = spec_.ring.elevation_deg * std::numbers::pi / 180.0;
  const double r = spec_.ring.radius;
  const Vec3 eye{r * std::cos(el) * std::cos(az), r * std::cos(el) * std::sin(az), r * std::sin(el)};
  const double scale = static_cast<double>(width) / spec_.ring.width;
  return CameraModel::look_at(eye, {0, 0, 0}, {0, 0, 1}, spec_.ring.focal * scale, width, height);
}

std::array<double, 3> SyntheticScene::blob_center(size_t blob, double t) const {
  return eval_cubic(blobs_.at(blob).trajectory, t);
}

double SyntheticScene::density(const std::array<double, 3>& p, double t) const {
  double s = 0.0;
  for (size_t k = 0; k < blobs_.size(); ++k) {
    const auto d = sub(p, blob_center(k, t));
    const double r = blobs_[k].radius;
    s += blobs_[k].peak_density * std::exp(-dot(d, d) / (2.0 * r * r));
  }
  return s;
}

double SyntheticScene::line_alpha(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                                  double t) const {
  const double n = std::sqrt(dot(dir, dir));
  const Vec3 d{dir[0] / n, dir[1] / n, dir[2] / n};
  double tau = 0.0;
  for (size_t k = 0; k < blobs_.size(); ++k) {
    const auto oc = sub(blob_center(k, t), origin);
    const double s = dot(oc, d);
    const double b2 = std::max(0.0, dot(oc, oc) - s * s);
    const double r = blobs_[k].radius;
    tau += blobs_[k].peak_density * std::sqrt(2.0 * std::numbers::pi) * r * std::exp(-b2 / (2.0 * r * r));
  }
  return 1.0 - std::exp(-tau);
}

SyntheticScene::RayResult SyntheticScene::integrate_ray(const std::array<double, 3>& origin,
                                                       const std::array<double, 3>& dir, double t) const {
  const double n = std::sqrt(dot(dir, dir));
  const Vec3 d{dir[0] / n, dir[1] / n, dir[2] / n};
  struct Term {
    double s, amp, r;
    Vec3 albedo;
  };
  std::vector<Term> terms;
  for (size_t k = 0; k < blobs_.size(); ++k) {
    const auto oc = sub(blob_center(k, t), origin);
    const double s = dot(oc, d);
    const double b2 = std::max(0.0, dot(oc, oc) - s * s);
    const double r = blobs_[k].radius;
    if (b2 > 36.0 * r * r) continue;
    terms.push_back({s, blobs_[k].peak_density * std::exp(-b2 / (2.0 * r * r)), r, blobs_[k].albedo});
  }
  RayResult out;
  if (terms.empty()) {
    out.rgb = spec_.background;
    return out;
  }
  // Optical depth accumulated from the ray origin, in closed form.
  auto optical_depth = [&](double x) {
    double tau = 0.0;
    for (const auto& tm : terms) {
      const double c = tm.r * std::sqrt(2.0);
      tau += tm.amp * tm.r * std::sqrt(std::numbers::pi / 2.0) * (std::erf((x - tm.s) / c) + std::erf(tm.s / c));
    }
    return tau;
  };
  double total_w = 0.0, depth = 0.0;
  Vec3 rgb{};
  constexpr int kSteps = 512;
  for (const auto& tm : terms) {
    const double lo = std::max(0.0, tm.s - 6.0 * tm.r), hi = std::max(0.0, tm.s + 6.0 * tm.r);
    const double h = (hi - lo) / kSteps;
    for (int i = 0; i < kSteps; ++i) {
      const double x = lo + (i + 0.5) * h;
      const double dx = (x - tm.s) / tm.r;
      const double w = std::exp(-optical_depth(x)) * tm.amp * std::exp(-0.5 * dx * dx) * h;
      total_w += w;
      depth += w * x;
      for (int c = 0; c < 3; ++c) rgb[c] += w * tm.albedo[c];
    }
  }
  out.alpha = line_alpha(origin, dir, t);
  out.depth = total_w > 1e-12 ? depth / total_w : 0.0;
  for (int c = 0; c < 3; ++c) out.rgb[c] = rgb[c] + (1.0 - out.alpha) * spec_.background[c];
  return out;
}

SyntheticScene::View SyntheticScene::render(const CameraModel& cam, double t) const {
  cam.validate();
  const int h = cam.height, w = cam.width;
  View v;
  v.rgb = torch::empty({3, h, w}, torch::kDouble);
  v.alpha = torch::empty({h, w}, torch::kDouble);
  v.depth = torch::empty({h, w}, torch::kDouble);
  auto rgb = v.rgb.accessor<double, 3>();
  auto al = v.alpha.accessor<double, 2>();
  auto dp = v.depth.accessor<double, 2>();
  const auto o = cam.center();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 dc{(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0};
      const double len = std::sqrt(dot(dc, dc));
      Vec3 dw{};
      for (int a = 0; a < 3; ++a) dw[a] = (cam.R[0 + a] * dc[0] + cam.R[3 + a] * dc[1] + cam.R[6 + a] * dc[2]) / len;
      const auto r = integrate_ray(o, dw, t);
      for (int c = 0; c < 3; ++c) rgb[c][y][x] = r.rgb[c];
      al[y][x] = r.alpha;
      dp[y][x] = r.alpha > 1e-6 ? r.depth / len : 0.0;
    }
  }
  v.rgb = v.rgb.to(torch::kFloat);
  v.alpha = v.alpha.to(torch::kFloat);
  v.depth = v.depth.to(torch::kFloat);
  return v;
}

Dataset SyntheticScene::write(const fs::path& root) const {
  fs::create_directories(root);
  const auto cams = cameras();
  write_cameras(root / "cams.json", cams);
  {
    auto spec = spec_;
    spec.blobs = blobs_;
    std::ofstream out(root / "scene.json");
    out << spec.to_json().dump(2) << "\n";
  }
  for (int f = 0; f < spec_.num_frames; ++f) {
    const double t = static_cast<double>(f) / (spec_.num_frames - 1);
    for (size_t c = 0; c < cams.size(); ++c) {
      const auto view = render(cams[c], t);
      const auto cam = std::to_string(c);
      write_png(root / "frames" / cam / frame_filename(f), view.rgb);
      write_gray_png(root / "masks" / cam / frame_filename(f), (view.alpha > 0.05f).to(torch::kFloat));
    }
  }
  return load_dataset(root);
}

// ---------------------------------------------------------------------------
// Metrics

double psnr(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask) {
  TORCH_CHECK(a.sizes() == b.sizes(), "psnr: shape mismatch");
  auto d = (a.detach().to(torch::kDouble) - b.detach().to(torch::kDouble)).pow(2);
  double mse;
  if (mask.defined()) {
    auto m = mask.detach().to(torch::kDouble);
    auto mb = (d.dim() > m.dim() ? m.unsqueeze(-3) : m).expand_as(d);
    const double denom = mb.sum().item<double>();
    if (denom <= 0.0) return kPsnrSentinel;
    mse = (d * mb).sum().item<double>() / denom;
  } else {
    mse = d.mean().item<double>();
  }
  if (mse <= 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, -10.0 * std::log10(mse));
}

double consecutive_rms(const torch::Tensor& video, const torch::Tensor& mask) {
  TORCH_CHECK(video.dim() == 4, "consecutive_rms: expects [T,C,H,W]");
  const int64_t frames = video.size(0);
  if (frames < 2) return 0.0;
  auto v = video.detach().to(torch::kDouble);
  torch::Tensor m;
  if (mask.defined()) {
    m = mask.detach().to(torch::kDouble) > 0.5;
    if (m.dim() == 2) m = m.unsqueeze(0).expand({frames, m.size(0), m.size(1)});
  }
  double total = 0.0;
  for (int64_t i = 0; i + 1 < frames; ++i) {
    auto d2 = (v[i + 1] - v[i]).pow(2).mean(0);
    double ms;
    if (m.defined()) {
      auto pm = (m[i] | m[i + 1]).to(torch::kDouble);
      const double n = pm.sum().item<double>();
      ms = n > 0 ? (d2 * pm).sum().item<double>() / n : 0.0;
    } else {
      ms = d2.mean().item<double>();
    }
    total += std::sqrt(ms);
  }
  return total / static_cast<double>(frames - 1);
}

double temporal_flicker(const torch::Tensor& video, const torch::Tensor& gt, const torch::Tensor& mask) {
  TORCH_CHECK(video.sizes() == gt.sizes(), "temporal_flicker: video and ground truth differ in shape");
  return consecutive_rms(video, mask) - consecutive_rms(gt, mask);
}

double laplacian_variance(const torch::Tensor& images, const torch::Tensor& mask) {
  auto x = images.detach().to(torch::kDouble);
  if (x.dim() == 3) x = x.unsqueeze(0);
  TORCH_CHECK(x.dim() == 4 && x.size(1) == 3, "laplacian_variance: expects [3,H,W] or [T,3,H,W]");
  const int64_t frames = x.size(0), h = x.size(2), w = x.size(3);
  TORCH_CHECK(h >= 3 && w >= 3, "laplacian_variance: image too small");
  auto grey = x.select(1, 0) * 0.299 + x.select(1, 1) * 0.587 + x.select(1, 2) * 0.114;
  auto c = grey.slice(1, 1, h - 1).slice(2, 1, w - 1);
  auto lap = grey.slice(1, 0, h - 2).slice(2, 1, w - 1) + grey.slice(1, 2, h).slice(2, 1, w - 1) +
             grey.slice(1, 1, h - 1).slice(2, 0, w - 2) + grey.slice(1, 1, h - 1).slice(2, 2, w) - 4.0 * c;
  torch::Tensor inner;
  if (mask.defined()) {
    auto m = mask.detach().to(torch::kDouble) > 0.5;
    if (m.dim() == 2) m = m.unsqueeze(0).expand({frames, h, w});
    inner = m.slice(1, 1, h - 1).slice(2, 1, w - 1) & m.slice(1, 0, h - 2).slice(2, 1, w - 1) &
            m.slice(1, 2, h).slice(2, 1, w - 1) & m.slice(1, 1, h - 1).slice(2, 0, w - 2) &
            m.slice(1, 1, h - 1).slice(2, 2, w);
  }
  double total = 0.0;
  for (int64_t f = 0; f < frames; ++f) {
    auto l = lap[f];
    if (inner.defined()) l = l.masked_select(inner[f]);
    total += l.numel() > 1 ? l.var(/*unbiased=*/false).item<double>() : 0.0;
  }
  return total / static_cast<double>(frames);
}

VideoMetrics evaluate_videos(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask) {
  if (pred.dim() != 5 || pred.sizes() != gt.sizes()) {
    throw UsageError("evaluate: prediction and ground truth differ in frame count, camera count or resolution");
  }
  if (mask.defined() && (mask.dim() != 4 || mask.size(0) != gt.size(0) || mask.size(1) != gt.size(1))) {
    throw UsageError("evaluate: mask shape does not match the videos");
  }
  VideoMetrics m;
  m.num_frames = static_cast<int>(pred.size(0));
  m.num_cameras = static_cast<int>(pred.size(1));
  m.psnr = psnr(pred, gt);
  for (int c = 0; c < m.num_cameras; ++c) {
    const auto mc = mask.defined() ? mask.select(1, c) : torch::Tensor();
    m.flicker += temporal_flicker(pred.select(1, c), gt.select(1, c), mc);
    m.sharpness += laplacian_variance(pred.select(1, c), mc);
  }
  m.flicker /= m.num_cameras;
  m.sharpness /= m.num_cameras;
  return m;
}

torch::Tensor load_frame_tree(const fs::path& dir) {
  const auto base = fs::is_directory(dir / "frames") ? dir / "frames" : dir;
  if (!fs::is_directory(base / "0")) throw SchemaError("no camera directory 0 under " + base.string());
  int cams = 0;
  while (fs::is_directory(base / std::to_string(cams))) ++cams;
  int frames = 0;
  while (fs::exists(base / "0" / frame_filename(frames))) ++frames;
  if (frames == 0) throw SchemaError("no frames under " + (base / "0").string());
  std::vector<torch::Tensor> all;
  for (int f = 0; f < frames; ++f) {
    std::vector<torch::Tensor> views;
    for (int c = 0; c < cams; ++c) {
      const auto p = base / std::to_string(c) / frame_filename(f);
      if (!fs::exists(p)) throw SchemaError("missing frame " + p.string());
      views.push_back(read_png(p));
    }
    try {
      all.push_back(torch::stack(views));
    } catch (const c10::Error&) {
      throw SchemaError("frames under " + base.string() + " differ in resolution");
    }
  }
  return torch::stack(all);
}

}  // namespace c4d

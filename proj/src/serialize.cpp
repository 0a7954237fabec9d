#include "ibpica/serialize.hpp"

#include <map>
#include <vector>

#include "ibpica/binary_io.hpp"

namespace ibpica {

namespace {

constexpr std::string_view kMagic{"IBPICA1\0", 8};

using Array = std::vector<double>;

// Row-major flattening regardless of Eigen's storage order.
Array flatten(const Matrix& m) {
  Array out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

Array flatten(const Vector& v) { return Array(v.data(), v.data() + v.size()); }

Matrix unflatten(const Array& a, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = a[static_cast<std::size_t>(r * cols + c)];
  return m;
}

Vector to_vector(const Array& a) { return Eigen::Map<const Vector>(a.data(), static_cast<Eigen::Index>(a.size())); }

}  // namespace

std::string serialize_model(const ModelState& s) {
  const std::size_t N = s.samples(), K = s.features(), J = s.components();
  std::vector<std::pair<std::string, Array>> arrays;
  const auto& hp = s.hp;
  arrays.emplace_back("hyper", Array{hp.a, hp.b, hp.c, hp.f, hp.gamma1, hp.gamma2, hp.eta1, hp.eta2});
  arrays.emplace_back("xi", hp.xi);
  arrays.emplace_back("mode", Array{s.mode == UpdateMode::Exact ? 0.0 : 1.0});
  arrays.emplace_back("activity", flatten(s.loadings.activity));
  arrays.emplace_back("slab_mean", flatten(s.loadings.mean));
  arrays.emplace_back("slab_precision", flatten(s.loadings.precision));
  arrays.emplace_back("source_mean", flatten(s.sources.mean));
  arrays.emplace_back("source_variance", flatten(s.sources.variance));
  Array resp;
  resp.reserve(N * K * J);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < J; ++j)
        resp.push_back(s.sources.responsibilities[j](static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)));
  arrays.emplace_back("responsibilities", std::move(resp));
  arrays.emplace_back("mixture_weights", flatten(s.sources.mixture_weights));
  arrays.emplace_back("scale_shape", flatten(s.sources.scale_shape));
  arrays.emplace_back("scale_rate", flatten(s.sources.scale_rate));
  arrays.emplace_back("tau_tilde", flatten(s.sticks.tau_tilde));
  arrays.emplace_back("tau_hat", flatten(s.sticks.tau_hat));
  arrays.emplace_back("q_weights", flatten(s.sticks.q_weights));
  arrays.emplace_back("alpha", Array{s.sticks.alpha_shape, s.sticks.alpha_rate});
  Array lam_shape, lam_rate;
  for (const auto& l : s.precisions.lambda) {
    lam_shape.push_back(l.shape);
    lam_rate.push_back(l.rate);
  }
  arrays.emplace_back("lambda_shape", std::move(lam_shape));
  arrays.emplace_back("lambda_rate", std::move(lam_rate));
  arrays.emplace_back("phi", Array{s.precisions.phi.shape, s.precisions.phi.rate});

  ByteWriter w;
  w.magic(kMagic);
  w.u32(static_cast<std::uint32_t>(s.dims()));
  w.u32(static_cast<std::uint32_t>(K));
  w.u32(static_cast<std::uint32_t>(J));
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, data] : arrays) {
    w.str(name);
    w.u64(data.size());
    for (double v : data) w.f64(v);
  }
  return w.take();
}

ModelState deserialize_model(std::string_view bytes) {
  ByteReader r(bytes, "model container");
  r.expect_magic(kMagic);
  const std::size_t D = r.u32(), K = r.u32(), J = r.u32();
  const std::uint32_t count = r.u32();
  if (D == 0 || K == 0 || J == 0) r.fail("dimensions must be positive");
  std::map<std::string, Array> arrays;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / 8) r.fail("array '" + name + "' overruns the container");
    Array data(static_cast<std::size_t>(n));
    for (auto& v : data) v = r.f64();
    if (!arrays.emplace(std::move(name), std::move(data)).second) r.fail("duplicate array");
  }
  if (!r.done()) r.fail("trailing bytes after last array");

  const auto get = [&](const std::string& name, std::size_t expected) -> const Array& {
    auto it = arrays.find(name);
    if (it == arrays.end()) r.fail("missing array '" + name + "'");
    if (it->second.size() != expected)
      r.fail("array '" + name + "' has " + std::to_string(it->second.size()) + " values, expected " +
             std::to_string(expected));
    return it->second;
  };
  auto sm = arrays.find("source_mean");
  if (sm == arrays.end()) r.fail("missing array 'source_mean'");
  if (sm->second.size() % K != 0) r.fail("source_mean length is not a multiple of K");
  const std::size_t N = sm->second.size() / K;
  const auto Di = static_cast<Eigen::Index>(D), Ki = static_cast<Eigen::Index>(K), Ji = static_cast<Eigen::Index>(J),
             Ni = static_cast<Eigen::Index>(N);

  ModelState s;
  const Array& hyper = get("hyper", 8);
  s.hp.a = hyper[0];
  s.hp.b = hyper[1];
  s.hp.c = hyper[2];
  s.hp.f = hyper[3];
  s.hp.gamma1 = hyper[4];
  s.hp.gamma2 = hyper[5];
  s.hp.eta1 = hyper[6];
  s.hp.eta2 = hyper[7];
  s.hp.xi = get("xi", J);
  const double mode = get("mode", 1)[0];
  if (mode == 0.0) {
    s.mode = UpdateMode::Exact;
  } else if (mode == 1.0) {
    s.mode = UpdateMode::AsPrinted;
  } else {
    r.fail("unknown update mode");
  }
  s.loadings.activity = unflatten(get("activity", D * K), Di, Ki);
  s.loadings.mean = unflatten(get("slab_mean", D * K), Di, Ki);
  s.loadings.precision = to_vector(get("slab_precision", K));
  s.sources.mean = unflatten(get("source_mean", N * K), Ni, Ki);
  s.sources.variance = unflatten(get("source_variance", N * K), Ni, Ki);
  const Array& resp = get("responsibilities", N * K * J);
  s.sources.responsibilities.assign(J, Matrix(Ni, Ki));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < J; ++j)
        s.sources.responsibilities[j](static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) =
            resp[(n * K + k) * J + j];
  s.sources.mixture_weights = unflatten(get("mixture_weights", K * J), Ki, Ji);
  s.sources.scale_shape = unflatten(get("scale_shape", K * J), Ki, Ji);
  s.sources.scale_rate = unflatten(get("scale_rate", K * J), Ki, Ji);
  s.sticks.tau_tilde = to_vector(get("tau_tilde", K));
  s.sticks.tau_hat = to_vector(get("tau_hat", K));
  s.sticks.q_weights = to_vector(get("q_weights", K));
  const Array& alpha = get("alpha", 2);
  s.sticks.alpha_shape = alpha[0];
  s.sticks.alpha_rate = alpha[1];
  const Array& ls = get("lambda_shape", K);
  const Array& lr = get("lambda_rate", K);
  for (std::size_t k = 0; k < K; ++k) s.precisions.lambda.push_back({ls[k], lr[k]});
  const Array& phi = get("phi", 2);
  s.precisions.phi = {phi[0], phi[1]};

  try {
    s.hp.validate();
    s.check_invariants();
  } catch (const Error& e) {
    r.fail(std::string("invalid model: ") + e.what());
  }
  return s;
}

void save_model(const ModelState& state, const std::string& path) { write_file(path, serialize_model(state)); }

ModelState load_model(const std::string& path) { return deserialize_model(read_file(path)); }

}  // namespace ibpica

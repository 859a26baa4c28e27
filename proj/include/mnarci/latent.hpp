#pragma once

// Latent representation estimation: probabilistic PCA scores and a small
// conditional VAE with hand-written gradients. Both finish with the density
// projection of the normalized latent second moment.

#include "mnarci/core.hpp"
#include "mnarci/io.hpp"

#include <sstream>

namespace mnarci {

enum class LatentMethod { linear, cvae };

inline const char* latent_method_name(LatentMethod m) { return m == LatentMethod::linear ? "linear" : "cvae"; }

struct LatentFit {
  Matrix z_hat;  // n x d posterior means
  LatentMethod method = LatentMethod::linear;
  double recon_rmse = 0;
  double constraint_residual = 0;
};

/// Rescales z so that z'z / tr(z'z) equals its density projection; returns
/// the Frobenius residual left after the transform.
inline double apply_latent_constraint(Matrix& z) {
  const Matrix m_raw = z.transpose() * z;
  const double tr = m_raw.trace();
  if (!(tr > 0)) throw Error(Errc::RankDeficient, "latent scores are identically zero");
  const Matrix m = m_raw / tr;
  const DensityMatrix target = project_to_density_matrix(0.5 * (m + m.transpose()));
  const SortedEigen em = sorted_eigen(0.5 * (m + m.transpose()));
  const SortedEigen et = sorted_eigen(target.entries());
  const double floor = 1e-14;
  Vector inv_sqrt(em.values.size()), sqrt_t(et.values.size());
  for (Eigen::Index j = 0; j < em.values.size(); ++j) {
    inv_sqrt[j] = em.values[j] > floor ? 1.0 / std::sqrt(em.values[j]) : 0.0;
    sqrt_t[j] = std::sqrt(std::max(et.values[j], 0.0));
  }
  const Matrix t = em.vectors * inv_sqrt.asDiagonal() * em.vectors.transpose() * et.vectors * sqrt_t.asDiagonal() *
                   et.vectors.transpose();
  z = z * t;
  const Matrix after_raw = z.transpose() * z;
  const Matrix after = after_raw / after_raw.trace();
  const DensityMatrix reproj = project_to_density_matrix(0.5 * (after + after.transpose()));
  return (after - reproj.entries()).norm();
}

// ---------------------------------------------------------------------------
// Linear fallback

struct PcaBasis {
  Vector mean;      // length p
  Vector values;    // top-d covariance eigenvalues, descending
  Matrix vectors;   // p x d
  double sigma2 = 0;
};

/// Top-d principal axes of the (n-1)-normalized sample covariance. Uses the
/// n x n Gram matrix when p > n.
inline PcaBasis principal_axes(const Matrix& x, int d) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (d < 1 || d > std::min(n, p)) throw Error(Errc::Precondition, "latent dimension must lie in [1, min(n,p)]");
  if (n < 2) throw Error(Errc::Precondition, "need at least two units");
  PcaBasis out;
  out.mean = x.colwise().mean().transpose();
  const Matrix xc = x.rowwise() - out.mean.transpose();
  const double denom = static_cast<double>(n - 1);
  double total = 0;
  if (p > n) {
    const Matrix gram = xc * xc.transpose() / denom;
    total = gram.trace();
    const SortedEigen eg = sorted_eigen(gram);
    out.values = eg.values.head(d);
    out.vectors.resize(p, d);
    for (int j = 0; j < d; ++j) {
      if (!(out.values[j] > 1e-12 * std::max(1.0, std::abs(eg.values[0]))))
        throw Error(Errc::RankDeficient, "fewer than d positive eigenvalues");
      Vector v = xc.transpose() * eg.vectors.col(j) / std::sqrt(denom * out.values[j]);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v[arg] < 0) v = -v;
      out.vectors.col(j) = v;
    }
  } else {
    const Matrix cov = xc.transpose() * xc / denom;
    total = cov.trace();
    const SortedEigen ec = sorted_eigen(cov);
    out.values = ec.values.head(d);
    for (int j = 0; j < d; ++j)
      if (!(out.values[j] > 1e-12 * std::max(1.0, std::abs(ec.values[0]))))
        throw Error(Errc::RankDeficient, "fewer than d positive eigenvalues");
    out.vectors = ec.vectors.leftCols(d);
  }
  out.sigma2 = p > d ? std::max(0.0, (total - out.values.sum()) / static_cast<double>(p - d)) : 0.0;
  return out;
}

/// Probabilistic-PCA posterior means: ((lambda_j - sigma2)^{1/2} / lambda_j) * v_j'(x - mean).
inline LatentFit fit_linear_latent(const Matrix& x, int d) {
  const PcaBasis pb = principal_axes(x, d);
  const Matrix xc = x.rowwise() - pb.mean.transpose();
  const Matrix proj = xc * pb.vectors;
  Vector scale(d);
  for (int j = 0; j < d; ++j) scale[j] = std::sqrt(std::max(pb.values[j] - pb.sigma2, 0.0)) / pb.values[j];
  LatentFit fit;
  fit.method = LatentMethod::linear;
  fit.z_hat = proj * scale.asDiagonal();
  const Matrix resid = xc - proj * pb.vectors.transpose();
  fit.recon_rmse = std::sqrt(resid.squaredNorm() / static_cast<double>(x.size()));
  fit.constraint_residual = apply_latent_constraint(fit.z_hat);
  return fit;
}

inline LatentFit fit_linear_latent(const Dataset& ds, int d) { return fit_linear_latent(covariate_matrix(ds), d); }

/// Orthogonal R minimizing ||z R - target||_F.
inline Matrix procrustes_rotation(const Matrix& z, const Matrix& target) {
  if (z.rows() != target.rows() || z.cols() != target.cols())
    throw Error(Errc::DimensionMismatch, "procrustes inputs must have equal shape");
  Eigen::JacobiSVD<Matrix> svd(z.transpose() * target, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

/// Root-mean-square entrywise error after Procrustes alignment.
inline double aligned_rmse(const Matrix& z, const Matrix& target) {
  const Matrix r = procrustes_rotation(z, target);
  return std::sqrt((z * r - target).squaredNorm() / static_cast<double>(z.size()));
}

// ---------------------------------------------------------------------------
// Conditional VAE

struct CvaeParams {
  Matrix enc_w1;      // h x (p+q)
  Vector enc_b1;      // h
  Matrix enc_mu;      // d x h
  Matrix enc_logvar;  // d x h
  Matrix dec_w1;      // h x (d+q)
  Vector dec_b1;      // h
  Matrix dec_out;     // p x h
  int hidden = 0;
  int cond_dim = 0;

  int input_dim() const { return static_cast<int>(dec_out.rows()); }
  int latent_dim() const { return static_cast<int>(enc_mu.rows()); }

  static CvaeParams zeros(int p, int q, int d, int h) {
    CvaeParams c;
    c.hidden = h;
    c.cond_dim = q;
    c.enc_w1 = Matrix::Zero(h, p + q);
    c.enc_b1 = Vector::Zero(h);
    c.enc_mu = Matrix::Zero(d, h);
    c.enc_logvar = Matrix::Zero(d, h);
    c.dec_w1 = Matrix::Zero(h, d + q);
    c.dec_b1 = Vector::Zero(h);
    c.dec_out = Matrix::Zero(p, h);
    return c;
  }

  static CvaeParams random(int p, int q, int d, int h, Rng& rng) {
    CvaeParams c = zeros(p, q, d, h);
    c.enc_w1 = normal_matrix(h, p + q, 1.0 / std::sqrt(static_cast<double>(p + q)), rng);
    c.enc_mu = normal_matrix(d, h, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    c.enc_logvar = normal_matrix(d, h, 0.1 / std::sqrt(static_cast<double>(h)), rng);
    c.dec_w1 = normal_matrix(h, d + q, 1.0 / std::sqrt(static_cast<double>(d + q)), rng);
    c.dec_out = normal_matrix(p, h, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    return c;
  }

  template <class F>
  void for_each_block(F&& f) {
    f("enc_w1", enc_w1);
    f("enc_b1", enc_b1);
    f("enc_mu", enc_mu);
    f("enc_logvar", enc_logvar);
    f("dec_w1", dec_w1);
    f("dec_b1", dec_b1);
    f("dec_out", dec_out);
  }

  Eigen::Index size() const {
    return enc_w1.size() + enc_b1.size() + enc_mu.size() + enc_logvar.size() + dec_w1.size() + dec_b1.size() +
           dec_out.size();
  }

  Vector flatten() const {
    Vector v(size());
    Eigen::Index at = 0;
    auto put = [&](const auto& m) {
      v.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
      at += m.size();
    };
    put(enc_w1), put(enc_b1), put(enc_mu), put(enc_logvar), put(dec_w1), put(dec_b1), put(dec_out);
    return v;
  }

  void unflatten(const Vector& v) {
    if (v.size() != size()) throw Error(Errc::DimensionMismatch, "parameter vector has wrong length");
    Eigen::Index at = 0;
    for_each_block([&](const char*, auto& m) {
      Eigen::Map<Vector>(m.data(), m.size()) = v.segment(at, m.size());
      at += m.size();
    });
  }
};

struct ElboGrad {
  double elbo = 0;
  double kl = 0;  // mean KL term
  CvaeParams grad;
};

namespace detail {

inline Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

}  // namespace detail

/// Mean ELBO over a batch and its gradient. Columns of `x` (p x n) and `c`
/// (q x n) are units; `u` (d x n) is the reparameterization noise.
inline ElboGrad cvae_elbo_and_grad(const CvaeParams& prm, const Matrix& x, const Matrix& c, const Matrix& u) {
  const Eigen::Index n = x.cols();
  if (n == 0) throw Error(Errc::EmptyBatch, "batch is empty");
  const int p = prm.input_dim(), d = prm.latent_dim(), q = prm.cond_dim;
  if (x.rows() != p || c.rows() != q || c.cols() != n || u.rows() != d || u.cols() != n)
    throw Error(Errc::DimensionMismatch, "batch shape does not match parameters");
  const double nd = static_cast<double>(n);

  const Matrix in1 = detail::stack_rows(x, c);
  const Matrix h1 = ((prm.enc_w1 * in1).colwise() + prm.enc_b1).array().tanh().matrix();
  const Matrix mu = prm.enc_mu * h1;
  const Matrix lv_raw = prm.enc_logvar * h1;
  const Matrix lv = lv_raw.cwiseMax(-8.0).cwiseMin(8.0);
  const Matrix sd = (0.5 * lv.array()).exp().matrix();
  const Matrix z = mu + sd.cwiseProduct(u);
  const Matrix in2 = detail::stack_rows(z, c);
  const Matrix h2 = ((prm.dec_w1 * in2).colwise() + prm.dec_b1).array().tanh().matrix();
  const Matrix xhat = prm.dec_out * h2;
  if (!xhat.allFinite() || !mu.allFinite()) throw Error(Errc::NonFinite, "non-finite activation in forward pass");

  const Matrix resid = x - xhat;
  const double recon = -0.5 * resid.squaredNorm() / nd - 0.5 * p * std::log(2.0 * M_PI);
  const double kl = 0.5 * (mu.array().square() + lv.array().exp() - 1.0 - lv.array()).sum() / nd;

  ElboGrad out;
  out.elbo = recon - kl;
  out.kl = kl;
  out.grad = CvaeParams::zeros(p, q, d, prm.hidden);
  CvaeParams& g = out.grad;

  const Matrix g_xhat = resid / nd;
  g.dec_out = g_xhat * h2.transpose();
  const Matrix g_a2 = (prm.dec_out.transpose() * g_xhat).cwiseProduct((1.0 - h2.array().square()).matrix());
  g.dec_w1 = g_a2 * in2.transpose();
  g.dec_b1 = g_a2.rowwise().sum();
  const Matrix g_z = prm.dec_w1.leftCols(d).transpose() * g_a2;

  const Matrix g_mu = g_z - mu / nd;
  Matrix g_lv = (g_z.cwiseProduct(u).cwiseProduct(sd) * 0.5) - 0.5 * (lv.array().exp() - 1.0).matrix() / nd;
  for (Eigen::Index j = 0; j < g_lv.cols(); ++j)
    for (Eigen::Index i = 0; i < g_lv.rows(); ++i)
      if (lv_raw(i, j) < -8.0 || lv_raw(i, j) > 8.0) g_lv(i, j) = 0.0;

  g.enc_mu = g_mu * h1.transpose();
  g.enc_logvar = g_lv * h1.transpose();
  const Matrix g_a1 = (prm.enc_mu.transpose() * g_mu + prm.enc_logvar.transpose() * g_lv)
                          .cwiseProduct((1.0 - h1.array().square()).matrix());
  g.enc_w1 = g_a1 * in1.transpose();
  g.enc_b1 = g_a1.rowwise().sum();
  return out;
}

inline ElboGrad cvae_elbo_and_grad(const CvaeParams& prm, const Matrix& x, const Matrix& c, Rng& rng) {
  return cvae_elbo_and_grad(prm, x, c, normal_matrix(prm.latent_dim(), x.cols(), 1.0, rng));
}

/// Encoder means (d x n).
inline Matrix cvae_encode_mean(const CvaeParams& prm, const Matrix& x, const Matrix& c) {
  const Matrix in1 = detail::stack_rows(x, c);
  const Matrix h1 = ((prm.enc_w1 * in1).colwise() + prm.enc_b1).array().tanh().matrix();
  return prm.enc_mu * h1;
}

inline Matrix cvae_decode(const CvaeParams& prm, const Matrix& z, const Matrix& c) {
  const Matrix in2 = detail::stack_rows(z, c);
  const Matrix h2 = ((prm.dec_w1 * in2).colwise() + prm.dec_b1).array().tanh().matrix();
  return prm.dec_out * h2;
}

struct CvaeOptions {
  int d = 3;
  int hidden = 16;
  int epochs = 300;
  double step_size = 1e-2;
  double clip_norm = 10.0;
  int patience = 50;     // consecutive ELBO decreases tolerated
  int input_rank = 0;    // >0: encode top principal scores instead of raw X
};

struct CvaeFitResult {
  LatentFit fit;
  CvaeParams params;
  std::vector<double> elbo_trace;
};

/// Conditions are (A, i/(n-1)) per unit.
inline Matrix cvae_conditions(const Dataset& ds) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  Matrix c(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    c(0, i) = ds.units[i].a;
    c(1, i) = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
  }
  return c;
}

/// Full-batch gradient ascent on the mean ELBO. `x` is n x p (rows = units),
/// `cond` is q x n.
inline CvaeFitResult fit_cvae(const Matrix& x_rows, const Matrix& cond, const CvaeOptions& opt, Rng& rng) {
  if (opt.epochs < 1) throw Error(Errc::Precondition, "epochs must be at least 1");
  if (opt.d < 1 || opt.hidden < 1) throw Error(Errc::Precondition, "latent and hidden sizes must be positive");
  if (cond.cols() != x_rows.rows()) throw Error(Errc::DimensionMismatch, "one condition column per unit");

  Matrix input = x_rows.rowwise() - x_rows.colwise().mean();
  if (opt.input_rank > 0 && opt.input_rank < input.cols()) {
    const PcaBasis pb = principal_axes(x_rows, opt.input_rank);
    input = input * pb.vectors;
  }
  const Matrix xt = input.transpose();
  const int p = static_cast<int>(xt.rows()), q = static_cast<int>(cond.rows());

  CvaeFitResult res;
  res.params = CvaeParams::random(p, q, opt.d, opt.hidden, rng);
  int decreases = 0;
  double prev = -std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    ElboGrad eg = cvae_elbo_and_grad(res.params, xt, cond, rng);
    res.elbo_trace.push_back(eg.elbo);
    decreases = eg.elbo < prev ? decreases + 1 : 0;
    if (decreases >= opt.patience) throw Error(Errc::Diverged, "ELBO decreased for " + std::to_string(opt.patience) + " epochs");
    prev = eg.elbo;
    Vector step = eg.grad.flatten();
    const double norm = step.norm();
    if (!std::isfinite(norm)) throw Error(Errc::NonFinite, "non-finite gradient");
    if (norm > opt.clip_norm) step *= opt.clip_norm / norm;
    res.params.unflatten(res.params.flatten() + opt.step_size * step);
  }

  const Matrix mu = cvae_encode_mean(res.params, xt, cond);
  const Matrix xhat = cvae_decode(res.params, mu, cond);
  res.fit.method = LatentMethod::cvae;
  res.fit.recon_rmse = std::sqrt((xt - xhat).squaredNorm() / static_cast<double>(xt.size()));
  res.fit.z_hat = mu.transpose();
  res.fit.constraint_residual = apply_latent_constraint(res.fit.z_hat);
  return res;
}

inline CvaeFitResult fit_cvae(const Dataset& ds, const CvaeOptions& opt, Rng& rng) {
  return fit_cvae(covariate_matrix(ds), cvae_conditions(ds), opt, rng);
}

// ---------------------------------------------------------------------------
// Checkpoints: a manifest line followed by one CSV block per parameter.

inline std::string cvae_checkpoint(CvaeParams prm) {
  std::ostringstream out;
  out << "cvae_checkpoint,hidden," << prm.hidden << ",cond_dim," << prm.cond_dim << '\n';
  prm.for_each_block([&](const char* name, const auto& m) {
    out << "block," << name << ',' << m.rows() << ',' << m.cols() << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << io::fmt(m(i, j));
      out << '\n';
    }
  });
  return out.str();
}

inline CvaeParams load_cvae_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::MalformedCsv, "empty checkpoint");
  auto head = io::split(line);
  if (head.size() != 5 || head[0] != "cvae_checkpoint") throw Error(Errc::MalformedCsv, "bad checkpoint manifest");
  CvaeParams prm;
  prm.hidden = std::stoi(head[2]);
  prm.cond_dim = std::stoi(head[4]);
  int blocks = 0;
  prm.for_each_block([&](const char* name, auto& m) {
    if (!std::getline(in, line)) throw Error(Errc::MalformedCsv, "truncated checkpoint");
    auto b = io::split(line);
    if (b.size() != 4 || b[0] != "block" || b[1] != name) throw Error(Errc::MalformedCsv, "expected block " + std::string(name));
    const long rows = std::stol(b[2]), cols = std::stol(b[3]);
    m.resize(rows, cols);
    for (long i = 0; i < rows; ++i) {
      if (!std::getline(in, line)) throw Error(Errc::MalformedCsv, "truncated block " + std::string(name));
      auto f = io::split(line);
      if (static_cast<long>(f.size()) != cols) throw Error(Errc::MalformedCsv, "ragged block " + std::string(name));
      for (long j = 0; j < cols; ++j) m(i, j) = io::parse_double(f[j]);
    }
    ++blocks;
  });
  return prm;
}

}  // namespace mnarci

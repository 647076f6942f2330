#include "moelab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numbers>

#include "moelab/kernels.hpp"

namespace moelab::ops {

namespace {

void record(const char* op, std::vector<Tensor> inputs, Tensor& out,
            std::function<void()> forward, std::function<void()> backward) {
  if (Tape* tape = active_tape()) {
    out.mark_produced();
    tape->record({op, std::move(inputs), out, std::move(backward), std::move(forward)});
  }
}

bool wants_grad(const Tensor& t) { return t.requires_grad() || t.produced(); }

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || !t.is_matrix()) {
    throw DimensionError(std::string(op) + " expects a matrix, got " +
                         (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  auto fwd = [a, b, out, m, k, n]() mutable {
    kernels::matmul_nn(a.values().data(), b.values().data(), out.values_mut().data(), m, k, n);
  };
  fwd();
  auto bwd = [a, b, out, m, k, n]() mutable {
    auto g = out.grad();
    if (wants_grad(a)) {
      std::vector<float> da(static_cast<size_t>(m * k));
      kernels::matmul_nt(g.data(), b.values().data(), da.data(), m, n, k);
      accumulate_grad(a, da);
    }
    if (wants_grad(b)) {
      std::vector<float> db(static_cast<size_t>(k * n));
      kernels::matmul_tn(a.values().data(), g.data(), db.data(), m, k, n);
      accumulate_grad(b, db);
    }
  };
  record("matmul", {a, b}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor matmul_t(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_t");
  require_matrix(b, "matmul_t");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_t last dimensions differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const int64_t m = a.rows(), c = a.cols(), n = b.rows();
  Tensor out = Tensor::zeros({m, n});
  auto fwd = [a, b, out, m, c, n]() mutable {
    kernels::matmul_nt(a.values().data(), b.values().data(), out.values_mut().data(), m, c, n);
  };
  fwd();
  auto bwd = [a, b, out, m, c, n]() mutable {
    auto g = out.grad();
    if (wants_grad(a)) {
      std::vector<float> da(static_cast<size_t>(m * c));
      kernels::matmul_nn(g.data(), b.values().data(), da.data(), m, n, c);
      accumulate_grad(a, da);
    }
    if (wants_grad(b)) {
      std::vector<float> db(static_cast<size_t>(n * c));
      kernels::matmul_tn(g.data(), a.values().data(), db.data(), m, n, c);
      accumulate_grad(b, db);
    }
  };
  record("matmul_t", {a, b}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  auto fwd = [a, b, out]() mutable {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (ov.size() == 1) out.set_scalar_f64(a.item_f64() + b.item_f64());
  };
  fwd();
  auto bwd = [a, b, out]() mutable {
    accumulate_grad(a, out.grad());
    accumulate_grad(b, out.grad());
  };
  record("add", {a, b}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto fwd = [a, b, out]() mutable {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (ov.size() == 1) out.set_scalar_f64(a.item_f64() * b.item_f64());
  };
  fwd();
  auto bwd = [a, b, out]() mutable {
    auto g = out.grad();
    if (wants_grad(a)) {
      std::vector<float> da(g.size());
      auto bv = b.values();
      for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bv[i];
      accumulate_grad(a, da);
    }
    if (wants_grad(b)) {
      std::vector<float> db(g.size());
      auto av = a.values();
      for (size_t i = 0; i < g.size(); ++i) db[i] = g[i] * av[i];
      accumulate_grad(b, db);
    }
  };
  record("mul", {a, b}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor scale(const Tensor& x, float factor) {
  Tensor out = Tensor::zeros(x.shape());
  auto fwd = [x, out, factor]() mutable {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
    if (ov.size() == 1) out.set_scalar_f64(static_cast<double>(factor) * x.item_f64());
  };
  fwd();
  auto bwd = [x, out, factor]() mutable {
    auto g = out.grad();
    std::vector<float> dx(g.size());
    for (size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * factor;
    accumulate_grad(x, dx);
  };
  record("scale", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  if (!bias.is_vector() || bias.numel() != x.cols()) {
    throw DimensionError("add_bias wants bias [" + std::to_string(x.cols()) +
                         "], got " + shape_str(bias.shape()));
  }
  const int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, n});
  auto fwd = [x, bias, out, m, n]() mutable {
    auto xv = x.values();
    auto bv = bias.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < m; ++r) {
      for (int64_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] + bv[j];
    }
  };
  fwd();
  auto bwd = [x, bias, out, m, n]() mutable {
    auto g = out.grad();
    accumulate_grad(x, g);
    if (wants_grad(bias)) {
      std::vector<float> db(static_cast<size_t>(n), 0.0f);
      for (int64_t r = 0; r < m; ++r) {
        for (int64_t j = 0; j < n; ++j) db[j] += g[r * n + j];
      }
      accumulate_grad(bias, db);
    }
  };
  record("add_bias", {x, bias}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({});
  auto fwd = [x, out]() mutable {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    out.values_mut()[0] = static_cast<float>(acc);
    out.set_scalar_f64(acc);
  };
  fwd();
  auto bwd = [x, out]() mutable {
    std::vector<float> dx(x.values().size(), out.grad()[0]);
    accumulate_grad(x, dx);
  };
  record("sum", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  Tensor out = Tensor::zeros({});
  const double inv_n = 1.0 / static_cast<double>(x.numel());
  auto fwd = [x, out, inv_n]() mutable {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    acc *= inv_n;
    out.values_mut()[0] = static_cast<float>(acc);
    out.set_scalar_f64(acc);
  };
  fwd();
  auto bwd = [x, out, inv_n]() mutable {
    std::vector<float> dx(x.values().size(),
                          static_cast<float>(out.grad()[0] * inv_n));
    accumulate_grad(x, dx);
  };
  record("mean", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto fwd = [x, out]() mutable {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) {
      ov[i] = static_cast<float>(stable_sigmoid(xv[i]));
    }
  };
  fwd();
  auto bwd = [x, out]() mutable {
    auto g = out.grad();
    auto ov = out.values();
    std::vector<float> dx(g.size());
    for (size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * ov[i] * (1.0f - ov[i]);
    accumulate_grad(x, dx);
  };
  record("sigmoid", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto fwd = [x, out]() mutable {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) {
      double v = xv[i];
      ov[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
    }
  };
  fwd();
  auto bwd = [x, out]() mutable {
    auto g = out.grad();
    auto xv = x.values();
    std::vector<float> dx(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
      double v = xv[i];
      double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      dx[i] = static_cast<float>(g[i] * (cdf + v * pdf));
    }
    accumulate_grad(x, dx);
  };
  record("gelu", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor row_softmax(const Tensor& x) {
  require_matrix(x, "row_softmax");
  const int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, n});
  auto fwd = [x, out, m, n]() mutable {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < m; ++r) {
      const float* row = xv.data() + r * n;
      float* prow = ov.data() + r * n;
      float hi = *std::max_element(row, row + n);
      double denom = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double e = std::exp(static_cast<double>(row[j]) - hi);
        prow[j] = static_cast<float>(e);
        denom += e;
      }
      float inv = static_cast<float>(1.0 / denom);
      for (int64_t j = 0; j < n; ++j) prow[j] *= inv;
    }
  };
  fwd();
  auto bwd = [x, out, m, n]() mutable {
    auto g = out.grad();
    auto p = out.values();
    std::vector<float> dx(static_cast<size_t>(m * n));
    for (int64_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += static_cast<double>(g[r * n + j]) * p[r * n + j];
      for (int64_t j = 0; j < n; ++j) {
        dx[r * n + j] = p[r * n + j] * (g[r * n + j] - static_cast<float>(dot));
      }
    }
    accumulate_grad(x, dx);
  };
  record("row_softmax", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_matrix(x, "layer_norm");
  const int64_t m = x.rows(), n = x.cols();
  if (!gamma.is_vector() || gamma.numel() != n || !beta.is_vector() || beta.numel() != n) {
    throw DimensionError("layer_norm wants gamma/beta [" + std::to_string(n) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  auto fwd = [x, gamma, beta, out, m, n, eps]() mutable {
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < m; ++r) {
      const float* row = xv.data() + r * n;
      double mu = 0.0;
      for (int64_t j = 0; j < n; ++j) mu += row[j];
      mu /= n;
      double var = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double d = row[j] - mu;
        var += d * d;
      }
      var /= n;
      double w = 1.0 / std::sqrt(var + eps);
      for (int64_t j = 0; j < n; ++j) {
        double xhat = (row[j] - mu) * w;
        ov[r * n + j] = static_cast<float>(xhat * gv[j] + bv[j]);
      }
    }
  };
  fwd();
  auto bwd = [x, gamma, beta, out, m, n, eps]() mutable {
    auto g = out.grad();
    auto xv = x.values();
    auto gv = gamma.values();
    std::vector<float> dx(static_cast<size_t>(m * n), 0.0f);
    std::vector<float> dgamma(static_cast<size_t>(n), 0.0f);
    std::vector<float> dbeta(static_cast<size_t>(n), 0.0f);
    for (int64_t r = 0; r < m; ++r) {
      const float* row = xv.data() + r * n;
      const float* grow = g.data() + r * n;
      double mu = 0.0;
      for (int64_t j = 0; j < n; ++j) mu += row[j];
      mu /= n;
      double var = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double d = row[j] - mu;
        var += d * d;
      }
      var /= n;
      double w = 1.0 / std::sqrt(var + eps);
      // dxhat = g * gamma; reduce its plain and xhat-weighted row sums.
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double xhat = (row[j] - mu) * w;
        double dxhat = static_cast<double>(grow[j]) * gv[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dgamma[j] += static_cast<float>(grow[j] * xhat);
        dbeta[j] += grow[j];
      }
      for (int64_t j = 0; j < n; ++j) {
        double xhat = (row[j] - mu) * w;
        double dxhat = static_cast<double>(grow[j]) * gv[j];
        dx[r * n + j] = static_cast<float>(
            w * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n));
      }
    }
    accumulate_grad(x, dx);
    if (wants_grad(gamma)) accumulate_grad(gamma, dgamma);
    if (wants_grad(beta)) accumulate_grad(beta, dbeta);
  };
  record("layer_norm", {x, gamma, beta}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids) {
  require_matrix(table, "embedding");
  const int64_t v = table.rows(), d = table.cols();
  for (int64_t id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding id " + std::to_string(id) + " outside table of " +
                       std::to_string(v) + " rows");
    }
  }
  const int64_t t = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({t, d});
  auto fwd = [table, ids, out, t, d]() mutable {
    auto tv = table.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < t; ++r) {
      std::memcpy(ov.data() + r * d, tv.data() + ids[r] * d, sizeof(float) * d);
    }
  };
  fwd();
  auto bwd = [table, ids, out, t, d]() mutable {
    if (!wants_grad(table)) return;
    auto g = out.grad();
    auto dt = table.grad_mut();
    for (int64_t r = 0; r < t; ++r) {
      float* dst = dt.data() + ids[r] * d;
      const float* src = g.data() + r * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  record("embedding", {table}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor gather_rows(const Tensor& x, std::vector<int64_t> rows) {
  require_matrix(x, "gather_rows");
  const int64_t m = x.rows(), d = x.cols();
  for (int64_t r : rows) {
    if (r < 0 || r >= m) {
      throw IndexError("gather_rows index " + std::to_string(r) + " outside " +
                       std::to_string(m) + " rows");
    }
  }
  const int64_t t = static_cast<int64_t>(rows.size());
  Tensor out = Tensor::zeros({t, d});
  auto fwd = [x, rows, out, t, d]() mutable {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < t; ++r) {
      std::memcpy(ov.data() + r * d, xv.data() + rows[r] * d, sizeof(float) * d);
    }
  };
  fwd();
  auto bwd = [x, rows, out, t, d]() mutable {
    if (!wants_grad(x)) return;
    auto g = out.grad();
    auto dx = x.grad_mut();
    for (int64_t r = 0; r < t; ++r) {
      float* dst = dx.data() + rows[r] * d;
      const float* src = g.data() + r * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  record("gather_rows", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor assemble_rows(int64_t total_rows, const std::vector<Tensor>& parts,
                     const std::vector<std::vector<int64_t>>& row_indices) {
  if (parts.empty() || parts.size() != row_indices.size()) {
    throw ContractError("assemble_rows wants matching non-empty parts and index lists");
  }
  const int64_t d = parts[0].cols();
  std::vector<int64_t> seen(static_cast<size_t>(total_rows), 0);
  for (size_t i = 0; i < parts.size(); ++i) {
    require_matrix(parts[i], "assemble_rows");
    if (parts[i].cols() != d) {
      throw DimensionError("assemble_rows parts disagree on width: " +
                           shape_str(parts[0].shape()) + " vs " + shape_str(parts[i].shape()));
    }
    if (parts[i].rows() != static_cast<int64_t>(row_indices[i].size())) {
      throw ContractError("assemble_rows part " + std::to_string(i) +
                          " has " + std::to_string(parts[i].rows()) + " rows but " +
                          std::to_string(row_indices[i].size()) + " indices");
    }
    for (int64_t r : row_indices[i]) {
      if (r < 0 || r >= total_rows) {
        throw IndexError("assemble_rows index " + std::to_string(r) + " outside " +
                         std::to_string(total_rows) + " rows");
      }
      ++seen[static_cast<size_t>(r)];
    }
  }
  for (int64_t r = 0; r < total_rows; ++r) {
    if (seen[static_cast<size_t>(r)] != 1) {
      throw ContractError("assemble_rows row " + std::to_string(r) + " covered " +
                          std::to_string(seen[static_cast<size_t>(r)]) + " times");
    }
  }
  Tensor out = Tensor::zeros({total_rows, d});
  auto indices = row_indices;
  auto fwd = [parts, indices, out, d]() mutable {
    auto ov = out.values_mut();
    for (size_t i = 0; i < parts.size(); ++i) {
      auto pv = parts[i].values();
      for (size_t r = 0; r < indices[i].size(); ++r) {
        std::memcpy(ov.data() + indices[i][r] * d, pv.data() + static_cast<int64_t>(r) * d,
                    sizeof(float) * d);
      }
    }
  };
  fwd();
  auto bwd = [parts, indices, out, d]() mutable {
    auto g = out.grad();
    for (size_t i = 0; i < parts.size(); ++i) {
      Tensor part = parts[i];
      if (!wants_grad(part)) continue;
      auto dp = part.grad_mut();
      for (size_t r = 0; r < indices[i].size(); ++r) {
        const float* src = g.data() + indices[i][r] * d;
        float* dst = dp.data() + static_cast<int64_t>(r) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    }
  };
  record("assemble_rows", parts, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor gather_cols(const Tensor& x, std::vector<int64_t> cols) {
  require_matrix(x, "gather_cols");
  const int64_t m = x.rows(), n = x.cols();
  if (static_cast<int64_t>(cols.size()) != m) {
    throw DimensionError("gather_cols wants one column per row: " +
                         std::to_string(cols.size()) + " vs " + std::to_string(m));
  }
  for (int64_t c : cols) {
    if (c < 0 || c >= n) {
      throw IndexError("gather_cols index " + std::to_string(c) + " outside " +
                       std::to_string(n) + " columns");
    }
  }
  Tensor out = Tensor::zeros({m});
  auto fwd = [x, cols, out, m, n]() mutable {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < m; ++r) ov[r] = xv[r * n + cols[r]];
  };
  fwd();
  auto bwd = [x, cols, out, m, n]() mutable {
    if (!wants_grad(x)) return;
    auto g = out.grad();
    auto dx = x.grad_mut();
    for (int64_t r = 0; r < m; ++r) dx[r * n + cols[r]] += g[r];
  };
  record("gather_cols", {x}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& factors) {
  require_matrix(x, "scale_rows");
  if (!factors.is_vector() || factors.numel() != x.rows()) {
    throw DimensionError("scale_rows wants factors [" + std::to_string(x.rows()) +
                         "], got " + shape_str(factors.shape()));
  }
  const int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, n});
  auto fwd = [x, factors, out, m, n]() mutable {
    auto xv = x.values();
    auto fv = factors.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < m; ++r) {
      for (int64_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] * fv[r];
    }
  };
  fwd();
  auto bwd = [x, factors, out, m, n]() mutable {
    auto g = out.grad();
    if (wants_grad(x)) {
      auto fv = factors.values();
      std::vector<float> dx(static_cast<size_t>(m * n));
      for (int64_t r = 0; r < m; ++r) {
        for (int64_t j = 0; j < n; ++j) dx[r * n + j] = g[r * n + j] * fv[r];
      }
      accumulate_grad(x, dx);
    }
    if (wants_grad(factors)) {
      auto xv = x.values();
      std::vector<float> df(static_cast<size_t>(m));
      for (int64_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          acc += static_cast<double>(g[r * n + j]) * xv[r * n + j];
        }
        df[r] = static_cast<float>(acc);
      }
      accumulate_grad(factors, df);
    }
  };
  record("scale_rows", {x, factors}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             int64_t num_heads, int64_t seq_len) {
  require_matrix(q, "causal_self_attention");
  require_same_shape(q, k, "causal_self_attention");
  require_same_shape(q, v, "causal_self_attention");
  const int64_t t = q.rows(), d = q.cols();
  if (num_heads <= 0 || d % num_heads != 0) {
    throw DimensionError("causal_self_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(num_heads) + " heads");
  }
  if (seq_len <= 0 || t % seq_len != 0) {
    throw DimensionError("causal_self_attention: " + std::to_string(t) +
                         " rows not a multiple of seq_len " + std::to_string(seq_len));
  }
  const int64_t batches = t / seq_len;
  const int64_t s = seq_len;
  const int64_t hd = d / num_heads;
  const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor out = Tensor::zeros({t, d});
  // Attention probabilities, refreshed on every forward, shared with backward.
  auto probs =
      std::make_shared<std::vector<float>>(static_cast<size_t>(batches * num_heads * s * s));
  auto fwd = [q, k, v, out, probs, batches, s, d, num_heads, hd, inv_sqrt]() mutable {
    auto qv_all = q.values();
    auto kv_all = k.values();
    auto vv_all = v.values();
    auto ov_all = out.values_mut();
    std::vector<float> row(static_cast<size_t>(s));
    for (int64_t b = 0; b < batches; ++b) {
      const float* qv = qv_all.data() + b * s * d;
      const float* kv = kv_all.data() + b * s * d;
      const float* vv = vv_all.data() + b * s * d;
      float* ov = ov_all.data() + b * s * d;
      for (int64_t h = 0; h < num_heads; ++h) {
        const int64_t off = h * hd;
        float* p_head = probs->data() + (b * num_heads + h) * s * s;
        for (int64_t i = 0; i < s; ++i) {
          for (int64_t j = 0; j <= i; ++j) {
            float dot = 0.0f;
            for (int64_t c = 0; c < hd; ++c) {
              dot += qv[i * d + off + c] * kv[j * d + off + c];
            }
            row[j] = dot * inv_sqrt;
          }
          float hi = *std::max_element(row.data(), row.data() + i + 1);
          double denom = 0.0;
          for (int64_t j = 0; j <= i; ++j) {
            double e = std::exp(static_cast<double>(row[j]) - hi);
            row[j] = static_cast<float>(e);
            denom += e;
          }
          float inv = static_cast<float>(1.0 / denom);
          for (int64_t j = 0; j < s; ++j) {
            p_head[i * s + j] = j <= i ? row[j] * inv : 0.0f;
          }
          for (int64_t c = 0; c < hd; ++c) {
            float acc = 0.0f;
            for (int64_t j = 0; j <= i; ++j) {
              acc += p_head[i * s + j] * vv[j * d + off + c];
            }
            ov[i * d + off + c] = acc;
          }
        }
      }
    }
  };
  fwd();
  auto bwd = [q, k, v, out, probs, batches, s, d, num_heads, hd, inv_sqrt]() mutable {
    auto g_all = out.grad();
    auto qv_all = q.values();
    auto kv_all = k.values();
    auto vv_all = v.values();
    const int64_t t_rows = batches * s;
    std::vector<float> dq(static_cast<size_t>(t_rows * d), 0.0f);
    std::vector<float> dk(static_cast<size_t>(t_rows * d), 0.0f);
    std::vector<float> dv(static_cast<size_t>(t_rows * d), 0.0f);
    std::vector<float> dp(static_cast<size_t>(s));
    for (int64_t b = 0; b < batches; ++b) {
      const float* g = g_all.data() + b * s * d;
      const float* qv = qv_all.data() + b * s * d;
      const float* kv = kv_all.data() + b * s * d;
      const float* vv = vv_all.data() + b * s * d;
      float* dqb = dq.data() + b * s * d;
      float* dkb = dk.data() + b * s * d;
      float* dvb = dv.data() + b * s * d;
      for (int64_t h = 0; h < num_heads; ++h) {
        const int64_t off = h * hd;
        const float* p_head = probs->data() + (b * num_heads + h) * s * s;
        for (int64_t i = 0; i < s; ++i) {
          const float* p_row = p_head + i * s;
          for (int64_t j = 0; j <= i; ++j) {
            float dot = 0.0f;
            for (int64_t c = 0; c < hd; ++c) {
              dot += g[i * d + off + c] * vv[j * d + off + c];
            }
            dp[j] = dot;
            for (int64_t c = 0; c < hd; ++c) {
              dvb[j * d + off + c] += p_row[j] * g[i * d + off + c];
            }
          }
          double mix = 0.0;
          for (int64_t j = 0; j <= i; ++j) mix += static_cast<double>(p_row[j]) * dp[j];
          for (int64_t j = 0; j <= i; ++j) {
            float ds = p_row[j] * (dp[j] - static_cast<float>(mix)) * inv_sqrt;
            for (int64_t c = 0; c < hd; ++c) {
              dqb[i * d + off + c] += ds * kv[j * d + off + c];
              dkb[j * d + off + c] += ds * qv[i * d + off + c];
            }
          }
        }
      }
    }
    if (wants_grad(q)) accumulate_grad(q, dq);
    if (wants_grad(k)) accumulate_grad(k, dk);
    if (wants_grad(v)) accumulate_grad(v, dv);
  };
  record("causal_self_attention", {q, k, v}, out, std::move(fwd), std::move(bwd));
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::vector<int64_t> targets,
                     Reduction reduction, const char* trace_label) {
  require_matrix(logits, "cross_entropy");
  const int64_t t = logits.rows(), v = logits.cols();
  if (static_cast<int64_t>(targets.size()) != t) {
    throw DimensionError("cross_entropy wants " + std::to_string(t) + " targets, got " +
                         std::to_string(targets.size()));
  }
  for (int64_t y : targets) {
    if (y < 0 || y >= v) {
      throw IndexError("cross_entropy target " + std::to_string(y) + " outside " +
                       std::to_string(v) + " classes");
    }
  }
  Tensor out = Tensor::zeros({});
  const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(t) : 1.0;
  auto fwd = [logits, targets, out, t, v, norm]() mutable {
    auto lv = logits.values();
    double total = 0.0;
    for (int64_t r = 0; r < t; ++r) {
      const float* row = lv.data() + r * v;
      float hi = *std::max_element(row, row + v);
      double denom = 0.0;
      for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - hi);
      total += std::log(denom) + hi - row[targets[static_cast<size_t>(r)]];
    }
    total *= norm;
    out.values_mut()[0] = static_cast<float>(total);
    out.set_scalar_f64(total);
  };
  fwd();
  auto bwd = [logits, targets, out, t, v, norm]() mutable {
    if (!wants_grad(logits)) return;
    auto lv = logits.values();
    const float coef = static_cast<float>(out.grad()[0] * norm);
    std::vector<float> dl(static_cast<size_t>(t * v));
    for (int64_t r = 0; r < t; ++r) {
      const float* row = lv.data() + r * v;
      float* drow = dl.data() + r * v;
      float hi = *std::max_element(row, row + v);
      double denom = 0.0;
      for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - hi);
      for (int64_t j = 0; j < v; ++j) {
        float p = static_cast<float>(std::exp(static_cast<double>(row[j]) - hi) / denom);
        drow[j] = coef * p;
      }
      drow[targets[static_cast<size_t>(r)]] -= coef;
    }
    accumulate_grad(logits, dl);
  };
  record(trace_label, {logits}, out, std::move(fwd), std::move(bwd));
  return out;
}

namespace {

// Softmax of one score row in double precision.
void softmax_row(const float* row, int64_t n, std::vector<double>& p) {
  float hi = *std::max_element(row, row + n);
  double denom = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    p[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - hi);
    denom += p[static_cast<size_t>(j)];
  }
  for (int64_t j = 0; j < n; ++j) p[static_cast<size_t>(j)] /= denom;
}

}  // namespace

Tensor balance_loss(const Tensor& scores, const std::vector<int64_t>& assignment,
                    double alpha, BalanceGate gate) {
  require_matrix(scores, "balance_loss");
  const int64_t t = scores.rows(), n = scores.cols();
  if (n < 1) throw ContractError("balance_loss needs at least one expert");
  if (t < 1) throw ContractError("balance_loss needs at least one token");
  if (static_cast<int64_t>(assignment.size()) != t) {
    throw DimensionError("balance_loss wants " + std::to_string(t) + " assignments, got " +
                         std::to_string(assignment.size()));
  }
  std::vector<int64_t> counts(static_cast<size_t>(n), 0);
  for (int64_t a : assignment) {
    if (a < 0 || a >= n) {
      throw IndexError("balance_loss assignment " + std::to_string(a) + " outside " +
                       std::to_string(n) + " experts");
    }
    ++counts[static_cast<size_t>(a)];
  }
  // Per-expert overload ratio against the even share t/n, fixed for backward.
  const double share = static_cast<double>(t) / static_cast<double>(n);
  std::vector<double> coeff(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    coeff[static_cast<size_t>(i)] = (static_cast<double>(counts[static_cast<size_t>(i)]) - share) / share;
  }
  Tensor out = Tensor::zeros({});
  auto fwd = [scores, assignment, out, coeff, alpha, gate, t, n]() mutable {
    auto sv = scores.values();
    std::vector<double> p(static_cast<size_t>(n));
    double total = 0.0;
    for (int64_t r = 0; r < t; ++r) {
      const int64_t a = assignment[static_cast<size_t>(r)];
      double factor;
      if (gate == BalanceGate::Sigmoid) {
        factor = stable_sigmoid(sv[r * n + a]);
      } else {
        softmax_row(sv.data() + r * n, n, p);
        factor = p[static_cast<size_t>(a)];
      }
      total += coeff[static_cast<size_t>(a)] * factor;
    }
    total *= alpha;
    out.values_mut()[0] = static_cast<float>(total);
    out.set_scalar_f64(total);
  };
  fwd();
  auto bwd = [scores, assignment, out, coeff, alpha, gate, t, n]() mutable {
    if (!wants_grad(scores)) return;
    auto sv = scores.values();
    const float g0 = out.grad()[0];
    std::vector<float> ds(static_cast<size_t>(t * n), 0.0f);
    std::vector<double> p(static_cast<size_t>(n));
    for (int64_t r = 0; r < t; ++r) {
      const int64_t a = assignment[static_cast<size_t>(r)];
      const double lead = g0 * alpha * coeff[static_cast<size_t>(a)];
      if (gate == BalanceGate::Sigmoid) {
        double sig = stable_sigmoid(sv[r * n + a]);
        ds[r * n + a] = static_cast<float>(lead * sig * (1.0 - sig));
      } else {
        softmax_row(sv.data() + r * n, n, p);
        const double pa = p[static_cast<size_t>(a)];
        for (int64_t j = 0; j < n; ++j) {
          double dpj = pa * ((j == a ? 1.0 : 0.0) - p[static_cast<size_t>(j)]);
          ds[r * n + j] = static_cast<float>(lead * dpj);
        }
      }
    }
    accumulate_grad(scores, ds);
  };
  record("balance_loss", {scores}, out, std::move(fwd), std::move(bwd));
  return out;
}

}  // namespace moelab::ops

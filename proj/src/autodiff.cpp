#include "storydiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace storydiff {

namespace {

thread_local bool g_grad_enabled = true;
bool g_finite_checks = false;

bool any_requires_grad(std::initializer_list<const Var*> vars) {
  if (!g_grad_enabled) return false;
  return std::any_of(vars.begin(), vars.end(),
                     [](const Var* v) { return v->defined() && v->requires_grad(); });
}

/// Wraps a freshly computed value; records parents and backward only when
/// some input requires a gradient.
Var make_result(Tensor value, std::initializer_list<const Var*> inputs,
                std::function<void(Node&)> backward_fn, const char* op) {
  if (g_finite_checks && !value.all_finite()) {
    throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
  const bool rg = any_requires_grad(inputs);
  Var out(std::move(value), rg);
  if (rg) {
    for (const Var* in : inputs) {
      if (in->defined()) out.node()->parents.push_back(in->shared());
    }
    out.node()->backward = std::move(backward_fn);
  }
  return out;
}

bool wants(const Var& v) { return v.defined() && v.requires_grad(); }

RowMatrixXd to_double(const ConstMatrixMap& m) { return m.cast<double>(); }

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0f);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  const RowMatrixXd prod = to_double(av.matrix()) * to_double(bv.matrix());
  Tensor out({av.rows(), bv.cols()});
  out.matrix() = prod.cast<float>();
  return make_result(
      std::move(out), {&a, &b},
      [a, b](Node& self) {
        const RowMatrixXd g = to_double(std::as_const(self.grad).matrix());
        if (wants(a)) {
          a.node()->grad_buffer().matrix() +=
              (g * to_double(b.value().matrix()).transpose()).cast<float>();
        }
        if (wants(b)) {
          b.node()->grad_buffer().matrix() +=
              (to_double(a.value().matrix()).transpose() * g).cast<float>();
        }
      },
      "matmul");
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.matrix() += b.value().matrix();
  return make_result(
      std::move(out), {&a, &b},
      [a, b](Node& self) {
        if (wants(a)) a.node()->grad_buffer().matrix() += self.grad.matrix();
        if (wants(b)) b.node()->grad_buffer().matrix() += self.grad.matrix();
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.matrix() -= b.value().matrix();
  return make_result(
      std::move(out), {&a, &b},
      [a, b](Node& self) {
        if (wants(a)) a.node()->grad_buffer().matrix() += self.grad.matrix();
        if (wants(b)) b.node()->grad_buffer().matrix() -= self.grad.matrix();
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  out.matrix().array() *= b.value().matrix().array();
  return make_result(
      std::move(out), {&a, &b},
      [a, b](Node& self) {
        if (wants(a)) {
          a.node()->grad_buffer().matrix().array() +=
              self.grad.matrix().array() * b.value().matrix().array();
        }
        if (wants(b)) {
          b.node()->grad_buffer().matrix().array() +=
              self.grad.matrix().array() * a.value().matrix().array();
        }
      },
      "mul");
}

Var scale(const Var& x, float s) {
  Tensor out = x.value();
  out.matrix() *= s;
  return make_result(
      std::move(out), {&x},
      [x, s](Node& self) { x.node()->grad_buffer().matrix() += s * self.grad.matrix(); }, "scale");
}

Var add_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  if (bias.value().size() != static_cast<std::size_t>(xv.cols())) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match last dim of " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const auto brow = Eigen::Map<const Eigen::RowVectorXf>(bias.value().data().data(), xv.cols());
  out.matrix().rowwise() += brow;
  return make_result(
      std::move(out), {&x, &bias},
      [x, bias](Node& self) {
        if (wants(x)) x.node()->grad_buffer().matrix() += self.grad.matrix();
        if (wants(bias)) {
          const Eigen::RowVectorXd colsum = to_double(std::as_const(self.grad).matrix()).colwise().sum();
          auto gb = Eigen::Map<Eigen::RowVectorXf>(bias.node()->grad_buffer().data().data(), colsum.size());
          gb += colsum.cast<float>();
        }
      },
      "add_bias");
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Var y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

Var softmax(const Var& x, int axis) {
  const Tensor& xv = x.value();
  if (axis < 0) axis += xv.rank();
  if (axis < 0 || axis >= xv.rank()) throw DimensionError("softmax: bad axis for " + shape_string(xv.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(xv.dim(i));
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= static_cast<std::size_t>(xv.dim(i));
  const auto n = static_cast<std::size_t>(xv.dim(axis));

  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(xv[base + j * inner]));
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(xv[base + j * inner]) - mx);
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * inner] =
            static_cast<float>(std::exp(static_cast<double>(xv[base + j * inner]) - mx) / total);
      }
    }
  }
  return make_result(
      out, {&x},
      [x, out, outer, inner, n](Node& self) {
        Tensor& gx = x.node()->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dot += static_cast<double>(self.grad[base + j * inner]) * out[base + j * inner];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              gx[idx] += static_cast<float>(out[idx] * (self.grad[idx] - dot));
            }
          }
        }
      },
      "softmax");
}

Var layernorm(const Var& x, const Var& gain, const Var& bias, float eps) {
  const Tensor& xv = x.value();
  const int c = xv.cols();
  if (gain.value().size() != static_cast<std::size_t>(c) || bias.value().size() != static_cast<std::size_t>(c)) {
    throw DimensionError("layernorm: gain/bias must match last dim of " + shape_string(xv.shape()));
  }
  const int r = xv.rows();
  Tensor normalized(xv.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(r));
  Tensor out(xv.shape());
  const float* g = gain.value().data().data();
  const float* b = bias.value().data().data();
  for (int i = 0; i < r; ++i) {
    const float* row = xv.data().data() + static_cast<std::size_t>(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += row[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * c + j;
      const double nh = (row[j] - m) * is;
      normalized[idx] = static_cast<float>(nh);
      out[idx] = static_cast<float>(nh * g[j] + b[j]);
    }
  }
  return make_result(
      std::move(out), {&x, &gain, &bias},
      [x, gain, bias, normalized, inv_std, r, c](Node& self) {
        const float* gv = gain.value().data().data();
        float* gg = wants(gain) ? gain.node()->grad_buffer().data().data() : nullptr;
        float* gb = wants(bias) ? bias.node()->grad_buffer().data().data() : nullptr;
        float* gx = wants(x) ? x.node()->grad_buffer().data().data() : nullptr;
        std::vector<double> dn(static_cast<std::size_t>(c));
        for (int i = 0; i < r; ++i) {
          const std::size_t base = static_cast<std::size_t>(i) * c;
          double sum_dn = 0.0, sum_dn_n = 0.0;
          for (int j = 0; j < c; ++j) {
            const double go = self.grad[base + j];
            if (gg) gg[j] += static_cast<float>(go * normalized[base + j]);
            if (gb) gb[j] += static_cast<float>(go);
            dn[static_cast<std::size_t>(j)] = go * gv[j];
            sum_dn += dn[static_cast<std::size_t>(j)];
            sum_dn_n += dn[static_cast<std::size_t>(j)] * normalized[base + j];
          }
          if (!gx) continue;
          const double is = inv_std[static_cast<std::size_t>(i)];
          for (int j = 0; j < c; ++j) {
            gx[base + j] += static_cast<float>(
                is * (dn[static_cast<std::size_t>(j)] - sum_dn / c - normalized[base + j] * sum_dn_n / c));
          }
        }
      },
      "layernorm");
}

Var gelu(const Var& x) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))));
  }
  return make_result(
      std::move(out), {&x},
      [x](Node& self) {
        const Tensor& xv = x.value();
        Tensor& gx = x.node()->grad_buffer();
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const double v = xv[i];
          const double u = k * (v + 0.044715 * v * v * v);
          const double th = std::tanh(u);
          const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
          const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
          gx[i] += static_cast<float>(self.grad[i] * d);
        }
      },
      "gelu");
}

Var silu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<float>(v / (1.0 + std::exp(-v)));
  }
  return make_result(
      std::move(out), {&x},
      [x](Node& self) {
        const Tensor& xv = x.value();
        Tensor& gx = x.node()->grad_buffer();
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const double v = xv[i];
          const double s = 1.0 / (1.0 + std::exp(-v));
          gx[i] += static_cast<float>(self.grad[i] * (s * (1.0 + v * (1.0 - s))));
        }
      },
      "silu");
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(
      std::move(out), {&x},
      [x](Node& self) {
        Tensor& gx = x.node()->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
      },
      "reshape");
}

Var sum(const Var& x) {
  double total = 0.0;
  for (float v : x.value().data()) total += v;
  return make_result(
      Tensor::scalar(static_cast<float>(total)), {&x},
      [x](Node& self) {
        const float g = self.grad[0];
        for (float& v : x.node()->grad_buffer().data()) v += g;
      },
      "sum");
}

Var mean(const Var& x) {
  double total = 0.0;
  for (float v : x.value().data()) total += v;
  const auto n = static_cast<double>(x.value().size());
  return make_result(
      Tensor::scalar(static_cast<float>(total / n)), {&x},
      [x, n](Node& self) {
        const auto g = static_cast<float>(self.grad[0] / n);
        for (float& v : x.node()->grad_buffer().data()) v += g;
      },
      "mean");
}

Var mse_loss(const Var& prediction, const Tensor& target) {
  require_same_shape(prediction.value(), target, "mse_loss");
  const Tensor& p = prediction.value();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - target[i];
    total += d * d;
  }
  const auto n = static_cast<double>(p.size());
  return make_result(
      Tensor::scalar(static_cast<float>(total / n)), {&prediction},
      [prediction, target, n](Node& self) {
        const Tensor& p = prediction.value();
        Tensor& g = prediction.node()->grad_buffer();
        const double s = 2.0 * self.grad[0] / n;
        for (std::size_t i = 0; i < p.size(); ++i) {
          g[i] += static_cast<float>(s * (static_cast<double>(p[i]) - target[i]));
        }
      },
      "mse_loss");
}

Var gather_rows(const Var& x, std::vector<int> rows) {
  const Tensor& xv = x.value();
  const int c = xv.cols();
  for (int r : rows) {
    if (r < 0 || r >= xv.rows()) throw DimensionError("gather_rows: row index out of range");
  }
  if (rows.empty()) throw ContractError("gather_rows: empty row list");
  Tensor out({static_cast<int>(rows.size()), c});
  auto om = out.matrix();
  const auto xm = xv.matrix();
  for (std::size_t i = 0; i < rows.size(); ++i) om.row(static_cast<Eigen::Index>(i)) = xm.row(rows[i]);
  return make_result(
      std::move(out), {&x},
      [x, rows = std::move(rows)](Node& self) {
        auto gx = x.node()->grad_buffer().matrix();
        const auto g = std::as_const(self.grad).matrix();
        for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
      },
      "gather_rows");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const int c = parts.front().cols();
  int total = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    total += p.rows();
  }
  Tensor out({total, c});
  int at = 0;
  for (const Var& p : parts) {
    out.matrix().middleRows(at, p.rows()) = p.value().matrix();
    at += p.rows();
  }
  const bool rg = g_grad_enabled && std::any_of(parts.begin(), parts.end(), wants);
  Var result(std::move(out), rg);
  if (g_finite_checks && !result.value().all_finite()) throw std::runtime_error("non-finite value produced by concat_rows");
  if (rg) {
    std::vector<Var> kept(parts.begin(), parts.end());
    for (const Var& p : kept) result.node()->parents.push_back(p.shared());
    result.node()->backward = [kept](Node& self) {
      int at = 0;
      for (const Var& p : kept) {
        if (wants(p)) p.node()->grad_buffer().matrix() += std::as_const(self.grad).matrix().middleRows(at, p.rows());
        at += p.rows();
      }
    };
  }
  return result;
}

namespace {

struct AttentionLayout {
  std::vector<int> q_off;
  std::vector<int> kv_off;
};

AttentionLayout check_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const int> ql,
                                std::span<const int> kl, int heads) {
  if (ql.size() != kl.size() || ql.empty()) throw ContractError("multihead_attention: group count mismatch");
  if (heads <= 0 || q.cols() % heads != 0) {
    throw DimensionError("multihead_attention: " + std::to_string(q.cols()) + " channels not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (k.cols() != q.cols() || v.cols() != q.cols() || k.rows() != v.rows()) {
    throw DimensionError("multihead_attention: shape mismatch q " + shape_string(q.shape()) + " k " +
                         shape_string(k.shape()) + " v " + shape_string(v.shape()));
  }
  AttentionLayout lay;
  int qa = 0, ka = 0;
  for (std::size_t g = 0; g < ql.size(); ++g) {
    if (kl[g] <= 0) throw ContractError("multihead_attention: empty key set");
    if (ql[g] < 0) throw ContractError("multihead_attention: negative group length");
    lay.q_off.push_back(qa);
    lay.kv_off.push_back(ka);
    qa += ql[g];
    ka += kl[g];
  }
  if (qa != q.rows() || ka != k.rows()) throw DimensionError("multihead_attention: group lengths do not cover rows");
  return lay;
}

}  // namespace

Var multihead_attention(const Var& q, const Var& k, const Var& v, std::span<const int> q_lengths,
                        std::span<const int> kv_lengths, int heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const AttentionLayout lay = check_attention(qv, kv, vv, q_lengths, kv_lengths, heads);
  const int c = qv.cols();
  const int d = c / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t groups = q_lengths.size();

  // probabilities per (group, head), kept for backward
  std::vector<RowMatrixXf> probs(groups * static_cast<std::size_t>(heads));
  Tensor out({qv.rows(), c});
  const auto qm = qv.matrix();
  const auto km = kv.matrix();
  const auto vm = vv.matrix();
  auto om = out.matrix();
  for (std::size_t g = 0; g < groups; ++g) {
    const int nq = q_lengths[g];
    const int nk = kv_lengths[g];
    if (nq == 0) continue;
    for (int h = 0; h < heads; ++h) {
      const RowMatrixXd qh = qm.block(lay.q_off[g], h * d, nq, d).cast<double>();
      const RowMatrixXd kh = km.block(lay.kv_off[g], h * d, nk, d).cast<double>();
      const RowMatrixXd vh = vm.block(lay.kv_off[g], h * d, nk, d).cast<double>();
      RowMatrixXd s = (qh * kh.transpose()) * inv_sqrt_d;
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      om.block(lay.q_off[g], h * d, nq, d) = (s * vh).cast<float>();
      probs[g * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = s.cast<float>();
    }
  }

  std::vector<int> ql(q_lengths.begin(), q_lengths.end());
  std::vector<int> kl(kv_lengths.begin(), kv_lengths.end());
  return make_result(
      std::move(out), {&q, &k, &v},
      [q, k, v, ql, kl, lay, heads, d, inv_sqrt_d, probs = std::move(probs)](Node& self) {
        const auto qm = q.value().matrix();
        const auto km = k.value().matrix();
        const auto vm = v.value().matrix();
        const auto gm = std::as_const(self.grad).matrix();
        Tensor* gq = wants(q) ? &q.node()->grad_buffer() : nullptr;
        Tensor* gk = wants(k) ? &k.node()->grad_buffer() : nullptr;
        Tensor* gv = wants(v) ? &v.node()->grad_buffer() : nullptr;
        for (std::size_t g = 0; g < ql.size(); ++g) {
          const int nq = ql[g];
          const int nk = kl[g];
          if (nq == 0) continue;
          for (int h = 0; h < heads; ++h) {
            const RowMatrixXd p = probs[g * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)].cast<double>();
            const RowMatrixXd go = gm.block(lay.q_off[g], h * d, nq, d).cast<double>();
            const RowMatrixXd vh = vm.block(lay.kv_off[g], h * d, nk, d).cast<double>();
            if (gv) gv->matrix().block(lay.kv_off[g], h * d, nk, d) += (p.transpose() * go).cast<float>();
            const RowMatrixXd dp = go * vh.transpose();
            RowMatrixXd ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
            ds *= inv_sqrt_d;
            if (gq) {
              const RowMatrixXd kh = km.block(lay.kv_off[g], h * d, nk, d).cast<double>();
              gq->matrix().block(lay.q_off[g], h * d, nq, d) += (ds * kh).cast<float>();
            }
            if (gk) {
              const RowMatrixXd qh = qm.block(lay.q_off[g], h * d, nq, d).cast<double>();
              gk->matrix().block(lay.kv_off[g], h * d, nk, d) += (ds.transpose() * qh).cast<float>();
            }
          }
        }
      },
      "multihead_attention");
}

Var average_into_rows(std::span<const Var> parts, std::span<const int> targets, int out_rows) {
  if (parts.empty()) throw ContractError("average_into_rows: no inputs");
  const int c = parts.front().cols();
  int total = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw DimensionError("average_into_rows: column mismatch");
    total += p.rows();
  }
  if (static_cast<int>(targets.size()) != total) throw DimensionError("average_into_rows: target count mismatch");
  RowMatrixXd acc = RowMatrixXd::Zero(out_rows, c);
  std::vector<double> count(static_cast<std::size_t>(out_rows), 0.0);
  std::size_t j = 0;
  for (const Var& p : parts) {
    const auto pm = p.value().matrix();
    for (int r = 0; r < p.rows(); ++r, ++j) {
      const int t = targets[j];
      if (t < 0 || t >= out_rows) throw DimensionError("average_into_rows: target out of range");
      acc.row(t) += pm.row(r).cast<double>();
      count[static_cast<std::size_t>(t)] += 1.0;
    }
  }
  for (int r = 0; r < out_rows; ++r) {
    if (count[static_cast<std::size_t>(r)] > 0) acc.row(r) /= count[static_cast<std::size_t>(r)];
  }
  Tensor out({out_rows, c});
  out.matrix() = acc.cast<float>();

  const bool rg = g_grad_enabled && std::any_of(parts.begin(), parts.end(), wants);
  Var result(std::move(out), rg);
  if (rg) {
    std::vector<Var> kept(parts.begin(), parts.end());
    std::vector<int> tg(targets.begin(), targets.end());
    for (const Var& p : kept) result.node()->parents.push_back(p.shared());
    result.node()->backward = [kept, tg, count](Node& self) {
      const auto gm = std::as_const(self.grad).matrix();
      std::size_t j = 0;
      for (const Var& p : kept) {
        if (!wants(p)) {
          j += static_cast<std::size_t>(p.rows());
          continue;
        }
        auto pg = p.node()->grad_buffer().matrix();
        for (int r = 0; r < p.rows(); ++r, ++j) {
          pg.row(r) += gm.row(tg[j]) / static_cast<float>(count[static_cast<std::size_t>(tg[j])]);
        }
      }
    };
  }
  return result;
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad = Tensor();
    }
  }
}

Parameter::Parameter(std::string name_, Tensor init, bool trainable_)
    : name(std::move(name_)), var(std::move(init), trainable_), trainable(trainable_) {}

void Parameter::freeze() {
  trainable = false;
  var.node()->requires_grad = false;
  var.zero_grad();
}

void zero_grads(const ParameterRefs& params) {
  for (Parameter* p : params) p->var.zero_grad();
}

void Adam::step(const ParameterRefs& params) {
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.emplace_back(p->value().shape(), 0.0f);
      v_.emplace_back(p->value().shape(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed between steps");
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable || !p.var.has_grad()) continue;
    Tensor& w = p.var.mutable_value();
    const Tensor& g = p.var.grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mh = m[j] / c1;
      const double vh = v[j] / c2;
      w[j] = static_cast<float>(w[j] - options_.lr * mh / (std::sqrt(vh) + options_.eps));
    }
    p.var.zero_grad();
  }
}

}  // namespace storydiff

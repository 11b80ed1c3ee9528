#include "usm/gradcheck.hpp"

#include <cctype>
#include <cmath>
#include <map>

#include "usm/autograd.hpp"
#include "usm/ops.hpp"

namespace usm {

std::string grad_group_name(const std::string& tensor_name) {
  std::string out;
  std::size_t i = 0;
  while (i < tensor_name.size()) {
    const bool at_field = i == 0 || tensor_name[i - 1] == '.';
    if (at_field && std::isdigit(static_cast<unsigned char>(tensor_name[i]))) {
      while (i < tensor_name.size() && std::isdigit(static_cast<unsigned char>(tensor_name[i]))) ++i;
      out += '*';
    } else {
      out += tensor_name[i++];
    }
  }
  return out;
}

GradcheckReport model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opts) {
  Rng rng(seed);
  UsmParams p = init_params(cfg, rng);
  for (auto& nt : p.named())
    for (double& v : nt.tensor.mutable_data()) v += opts.jitter * rng.normal();
  const Tensor z = rng.normal_tensor({1, cfg.channels, cfg.height, cfg.width});
  const Tensor probe = rng.normal_tensor(z.shape());
  const std::vector<double> t = {0.37};
  std::vector<std::int64_t> labels = {0};
  auto loss = [&]() {
    Tensor ctx;
    if (cfg.use_text) ctx = cfg.num_classes > 0 ? class_context(p, labels) : Tensor();
    return sum(mul(usm_forward(z, t, ctx, p, cfg), probe));
  };
  if (cfg.use_text && cfg.num_classes == 0) {
    throw std::invalid_argument("model_gradcheck: text conditioning needs num_classes > 0 for a context table");
  }

  auto named = p.named();
  for (auto& nt : named) nt.tensor.zero_grad();
  {
    GradTape tape;
    tape.backward(loss());
  }

  std::map<std::string, std::vector<const NamedTensor*>> groups;
  std::vector<std::string> order;
  for (const auto& nt : named) {
    const std::string g = grad_group_name(nt.name);
    if (!groups.count(g)) order.push_back(g);
    groups[g].push_back(&nt);
  }

  GradcheckReport rep;
  for (const auto& gname : order) {
    const auto& members = groups[gname];
    GradGroup g;
    g.name = gname;
    for (const auto* m : members) g.elements += m->tensor.numel();
    // (member, coordinate) pairs: exhaustive for small groups, otherwise a
    // uniform draw over the group's elements without replacement.
    std::vector<std::pair<std::size_t, std::int64_t>> picks;
    if (g.elements <= opts.coords_per_group) {
      for (std::size_t mi = 0; mi < members.size(); ++mi)
        for (std::int64_t c = 0; c < members[mi]->tensor.numel(); ++c) picks.emplace_back(mi, c);
    } else {
      std::vector<std::int64_t> flat(static_cast<std::size_t>(g.elements));
      for (std::int64_t i = 0; i < g.elements; ++i) flat[i] = i;
      for (std::int64_t i = 0; i < opts.coords_per_group; ++i) {
        std::swap(flat[i], flat[i + rng.below(g.elements - i)]);
        std::int64_t idx = flat[i];
        std::size_t mi = 0;
        while (idx >= members[mi]->tensor.numel()) idx -= members[mi++]->tensor.numel();
        picks.emplace_back(mi, idx);
      }
    }
    for (std::size_t mi = 0; mi < members.size(); ++mi) {
      std::vector<std::int64_t> coords;
      for (const auto& [m, c] : picks)
        if (m == mi) coords.push_back(c);
      if (coords.empty()) continue;
      const Tensor& tsr = members[mi]->tensor;
      const auto num = finite_diff_grad_at([&]() { return loss().item(); }, tsr, coords, opts.eps);
      for (std::size_t k = 0; k < coords.size(); ++k) {
        const double an = tsr.has_grad() ? tsr.grad()[coords[k]] : 0.0;
        const double diff = std::abs(an - num[k]);
        const double den = std::max(std::abs(an), std::abs(num[k]));
        const double rel = den > 0.0 ? diff / den : 0.0;
        ++g.checked;
        g.worst_abs = std::max(g.worst_abs, diff);
        if (diff <= opts.abs_floor) continue;
        g.worst_rel = std::max(g.worst_rel, rel);
        if (rel >= opts.rel_tol) ++g.failures;
      }
    }
    rep.checked += g.checked;
    rep.failures += g.failures;
    rep.groups.push_back(g);
  }
  rep.passed = true;
  for (const auto& g : rep.groups) {
    if (static_cast<double>(g.checked - g.failures) < opts.min_pass_fraction * static_cast<double>(g.checked)) {
      rep.passed = false;
    }
  }
  return rep;
}

}  // namespace usm

#include "equichk/catalog.hpp"

namespace equichk {

const std::vector<CatalogEntry>& catalog_entries() {
  static const std::vector<CatalogEntry> table = {
      {"model", "linear_probe", "§4.2 (m=1)", "f(θ) = ⟨θ, x⟩"},
      {"model", "homogeneous_relu_mlp", "§4.2", "bias-free ReLU network, homogeneous of degree = depth"},
      {"model", "deep_linear", "§4.1 item 2", "f(x) = W_L ⋯ W_1 x"},
      {"model", "factored_last_layer", "§5.3", "f = W h(θ'), h = tanh(V2 tanh(V1 x))"},
      {"model", "parity_pair", "§6.1", "f = x0 θ0² + x1 θ1 + θ0² θ1, even in θ0"},
      {"loss", "square", "§5.1", "½‖y − t‖²"},
      {"loss", "exponential", "§5.1", "exp(−y ŷ)"},
      {"loss", "logistic", "§4.2", "log(1 + exp(−y ŷ))"},
      {"loss", "softmax_ce", "§5.3", "log Σ exp(y) − y_k"},
      {"transform", "homogeneity_scaling", "§4.2", "(e^λ θ, e^{mλ} y)"},
      {"transform", "layer_rescaling", "§4.1 item 1", "(e^λ W_k, e^{−λ} W_{k+1}), G = Id"},
      {"transform", "linear_reparam", "§4.1 item 2", "(e^{λA} W_1, W_2 e^{−λA}), G = Id"},
      {"transform", "last_layer_left_action", "§5.3", "((I + Λ) W, θ'), G = (I + Λ) y"},
      {"transform", "mirror", "§6.1", "discrete P = I − 2 O Oᵀ"},
      {"transform", "sign_flip", "§3.2", "discrete diagonal ±1 action"},
      {"transform", "permutation", "§3.2", "discrete coordinate permutation"},
      {"transform", "hidden_unit_swap", "§3.2", "swap two hidden units"},
      {"transform", "hidden_unit_flip", "§3.2", "negate hidden units of an odd activation"},
      {"check", "first_order", "Thm 1 (i)", "∇L∘X = ∇ℓ∘Y"},
      {"check", "second_action", "Thm 1 (ii)", "∇²L∘X against the five-term expansion"},
      {"check", "second_quadratic", "Thm 1 (iii)", "∇²L∘X∘₂X against the five-term expansion"},
      {"check", "homogeneity_action", "§5.1 Eq. (6)", "∇²Lθ = (myℓ''/ℓ' + m − 1)∇L"},
      {"check", "homogeneity_quadratic", "§5.1 Eq. (7)", "⟨θ, ∇²Lθ⟩ = ℓ''m²y² + ℓ'm(m − 1)y"},
      {"check", "degenerate_branch", "Appendix A.2", "∇²Lθ at ℓ'(y) = 0"},
      {"check", "eigen_alignment", "Cor. 1", "⟨g, u_k⟩ = λ_k α ⟨θ, u_k⟩"},
      {"check", "sharpness_bound", "§5.1", "λ_max ≥ (m/‖θ‖²)(ℓ''my² + ℓ'(m − 1)y)"},
      {"check", "discrete_first", "Thm 2 Eq. (i'), Eq. (12)", "Pᵀ∇L = ∇L on Fix(H)"},
      {"check", "discrete_second", "Thm 2 Eq. (ii'), Eq. (13)", "Pᵀ∇²LP = ∇²L − ∇L∘∇²_θH on Fix(H)"},
      {"check", "mirror", "Cor. 4", "Oᵀ∇L = 0 and block structure of ∇²L"},
      {"check", "last_layer_alignment", "Cor. 3 Eq. (11)", "⟨vec V, ∇²_W L vec V⟩ = ⟨Vh, ∇²ℓ Vh⟩"},
      {"check", "stationary_null_space", "§5.4", "∇²L∘X ≈ 0 at stationary points"},
      {"check", "equivariance_certificate", "Def. 1", "f(H(θ, λ)) = G(f(θ), λ)"},
      {"check", "derivative_certificate", "Def. 1", "analytic H, G derivatives against finite differences"},
      {"check", "charge_conservation", "§5.2 Eq. (8)", "C(θ(t)) constant under gradient flow"},
      {"check", "gd_orthogonality", "§4.1 Eq. (5)", "⟨Δθ, X⟩ = 0 per gradient-descent step"},
      {"check", "norm_growth", "§4.2", "½ d‖θ‖²/dt = −mℓ'(y)y"},
      {"check", "noether_drift", "Cor. 2", "mean charge drift under stochastic gradient flow"},
  };
  return table;
}

std::vector<std::string> related_checks(std::string_view transform) {
  static const std::vector<std::string> continuous = {"first_order", "second_action", "second_quadratic",
                                                      "equivariance_certificate", "derivative_certificate"};
  static const std::vector<std::string> discrete = {"discrete_first", "discrete_second", "equivariance_certificate",
                                                    "derivative_certificate"};
  if (transform == "mirror") {
    auto out = discrete;
    out.push_back("mirror");
    return out;
  }
  if (transform == "sign_flip" || transform == "permutation" || transform == "hidden_unit_swap" ||
      transform == "hidden_unit_flip") {
    return discrete;
  }
  auto out = continuous;
  if (transform == "homogeneity_scaling") {
    out.insert(out.end(), {"homogeneity_action", "homogeneity_quadratic", "degenerate_branch", "eigen_alignment",
                           "sharpness_bound", "norm_growth"});
  } else if (transform == "layer_rescaling" || transform == "linear_reparam") {
    out.insert(out.end(), {"stationary_null_space", "charge_conservation", "gd_orthogonality", "noether_drift"});
  } else if (transform == "last_layer_left_action") {
    out.push_back("last_layer_alignment");
  } else {
    return {};
  }
  return out;
}

std::string paper_anchor(std::string_view name) {
  for (const auto& e : catalog_entries()) {
    if (e.name == name) return std::string(e.paper_anchor);
  }
  return {};
}

}  // namespace equichk

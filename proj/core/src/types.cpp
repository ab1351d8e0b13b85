#include "xfrn/types.hpp"

#include "xfrn/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace xfrn {

std::string_view to_string(CaptureKind kind) {
  switch (kind) {
    case CaptureKind::hidden_state: return "hidden_state";
    case CaptureKind::pre_mlp: return "pre_mlp";
    case CaptureKind::attention_out: return "attention_out";
    case CaptureKind::mlp_activation: return "mlp_activation";
  }
  return "?";
}

CaptureKind parse_capture_kind(std::string_view name) {
  if (name == "hidden_state") return CaptureKind::hidden_state;
  if (name == "pre_mlp") return CaptureKind::pre_mlp;
  if (name == "attention_out") return CaptureKind::attention_out;
  if (name == "mlp_activation") return CaptureKind::mlp_activation;
  throw DataError("unknown capture kind '" + std::string(name) +
                  "' (expected hidden_state, pre_mlp, attention_out or mlp_activation)");
}

std::string_view to_string(TransferType type) {
  return type == TransferType::type1 ? "type1" : "type2";
}

TransferType parse_transfer_type(std::string_view name) {
  if (name == "type1") return TransferType::type1;
  if (name == "type2") return TransferType::type2;
  throw ConfigError("unknown neuron type '" + std::string(name) + "' (expected type1 or type2)");
}

int type_boundary(int num_layers) {
  return static_cast<int>(std::lround(0.625 * num_layers));
}

double cosine(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return kUndefined;
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

std::string format_number(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace xfrn

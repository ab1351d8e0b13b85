#pragma once

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>

namespace xfrn {

// Captured tensors are f32; analytics run in double.
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class CaptureKind { hidden_state, pre_mlp, attention_out, mlp_activation };

std::string_view to_string(CaptureKind kind);
CaptureKind parse_capture_kind(std::string_view name);

enum class TransferType { type1, type2 };

std::string_view to_string(TransferType type);
TransferType parse_transfer_type(std::string_view name);

// Layers are 1-based throughout (layer 1 is the first decoder block);
// neuron indices are 0-based within a layer.
struct NeuronId {
  int layer = 0;
  int index = 0;

  auto operator<=>(const NeuronId&) const = default;
};

// Last layer of the Type-1 candidate range. round(0.625 * L), so that a
// 32-layer model splits into 1..20 and 21..32.
int type_boundary(int num_layers);

// Undefined entries in curves and scores are NaN, never a silent 0.
inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();
inline bool is_defined(double v) { return v == v; }

// Shortest text that parses back to the same double; NaN and infinities
// become the empty string.
std::string format_number(double v);

// Cosine similarity in double. Returns NaN when either vector is zero.
double cosine(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b);

}  // namespace xfrn

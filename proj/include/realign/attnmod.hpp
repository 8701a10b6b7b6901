#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "realign/backbone.hpp"
#include "realign/dense_caption.hpp"
#include "realign/tensor.hpp"

namespace realign {

struct AttentionLogits {
    std::vector<double> B;  // n_q x n_k row-major, B = Q K^T
    int n_q = 0;
    int n_k = 0;
    int d = 1;  // key/query feature length for the 1/sqrt(d) scale
};

// token index -> owning object index, -1 for unowned
struct TokenOwnership {
    std::vector<int> owner;

    std::vector<uint8_t> activation() const {  // boolean vector R
        std::vector<uint8_t> r(owner.size());
        for (size_t i = 0; i < owner.size(); ++i) r[i] = owner[i] >= 0 ? 1 : 0;
        return r;
    }
};

// Object i owns the prompt tokens that occur in its local caption; first claim
// wins so each token has at most one owner.
TokenOwnership build_token_ownership(const std::string& prompt,
                                     const std::vector<ObjectAnnotation>& annotations,
                                     int max_tokens = 16);

struct ScoreMatrix {
    std::vector<double> S;  // n_q x n_k, entries in {0, 0.5, 1, 2}
    int n_q = 0;
    int n_k = 0;
};

// S[p,j] = s_i where the flattened mask of object i covers query p and object i
// owns token j; 1 everywhere else. Overlaps resolve by per-cell maximum.
ScoreMatrix build_score_matrix(const std::vector<ObjectAnnotation>& annotations,
                               const TokenOwnership& ownership, int n_q, int n_k);

enum class BNormMode { MinMax, Raw };
enum class ExtremaMode { Global, PerRow };

struct ModulationConfig {
    double lambda_0 = 1.0;
    int T = 50;                              // lambda_t = lambda_0 * t / T
    BNormMode b_norm = BNormMode::MinMax;
    ExtremaMode extrema = ExtremaMode::Global;

    double lambda_t(int t) const { return lambda_0 * static_cast<double>(t) / T; }
};

// M_pos = max(B) - B, M_neg = B - min(B) (global extrema by default)
void pos_neg_maps(const AttentionLogits& B, ExtremaMode mode, std::vector<double>& m_pos,
                  std::vector<double>& m_neg);

// Additive logit term S .* M applied before the softmax.
std::vector<double> modulation_delta(const AttentionLogits& B, const ScoreMatrix& S,
                                     const std::vector<uint8_t>& R, int t,
                                     const ModulationConfig& cfg);

// Full modulated attention A' = softmax((B + S .* M) / sqrt(d)), row-wise.
std::vector<double> modulate(const AttentionLogits& B, const ScoreMatrix& S,
                             const std::vector<uint8_t>& R, int t, const ModulationConfig& cfg);

// Row softmax of B/sqrt(d), the unmodulated baseline.
std::vector<double> baseline_attention(const AttentionLogits& B);

// Nearest-neighbor resample of a binary mask; any covered source pixel marks
// the target cell inside.
Mask resample_mask(const Mask& m, int target_h, int target_w);

// Hook wiring modulate() into every cross-attention evaluation of a sampling
// run. `before` collects pre-modulation attention per step.
struct ModulationHook {
    AttnHook fn;
    std::shared_ptr<std::vector<AttnTrace>> before;
};

ModulationHook make_modulation_hook(const std::vector<ObjectAnnotation>& annotations,
                                    const std::string& prompt, int image_h, int image_w,
                                    const ModulationConfig& cfg);

}  // namespace realign

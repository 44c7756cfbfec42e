#pragma once

// The PTIE network: a ViT-style encoder plus transformer decoder in which
// four experts (two patch resolutions x two ground-truth orders) share every
// parameter except their input linear layers, embeddings, and positional
// tables. All expert streams run in one packed forward; streams are separate
// attention groups, so no attention edge crosses them.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ptie/ops.hpp"
#include "ptie/optim.hpp"
#include "ptie/patching.hpp"
#include "ptie/vocab.hpp"

namespace ptie {

enum class PeMode { vanilla, untied };
enum class ExpertLayout { diverse, identical, single };

inline std::string to_string(PeMode m) { return m == PeMode::vanilla ? "vanilla" : "untied"; }
inline std::string to_string(ExpertLayout e) {
  switch (e) {
    case ExpertLayout::diverse: return "diverse";
    case ExpertLayout::identical: return "identical";
    default: return "single";
  }
}

struct ExpertId {
  int i = 0;  // patch resolution index
  int j = 0;  // ground-truth order
};

struct ModelConfig {
  int dim = 512;
  int heads = 16;
  int ff_dim = 2048;
  int enc_layers = 6;
  int dec_layers = 6;
  double dropout = 0.1;
  int img_h = 32;
  int img_w = 128;
  int len_text = 32;  // max decode 30 + START + END
  int cls = 100;
  PeMode pe_mode = PeMode::untied;
  ExpertLayout experts = ExpertLayout::diverse;
  int single_i = 0;
  int single_j = 0;
  std::vector<PatchResolution> resolutions{{4, 8}, {8, 4}};
  double init_scale = 0.15;   // linear init: U(+-init_scale/sqrt(fan_in))
  double pos_init_std = 0.02; // positional tables: N(0, std)
  float pix_mean = 0.5f;
  float pix_std = 0.5f;

  int patch_size() const { return resolutions.at(0).size(); }
  int len_img() const { return img_h * img_w / patch_size(); }

  void validate() const {
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("model: dim must be divisible by heads");
    if (resolutions.empty()) throw ConfigError("model: no patch resolutions");
    for (const auto& r : resolutions) {
      if (r.h < 1 || r.w < 1 || img_h % r.h != 0 || img_w % r.w != 0)
        throw ConfigError("model: image not divisible by patch resolution");
      if (r.size() != patch_size())
        throw ConfigError("model: patch resolutions must share one patch size");
    }
    if (experts == ExpertLayout::diverse && resolutions.size() != 2)
      throw ConfigError("model: diverse experts need exactly two resolutions");
    if (single_i < 0 || single_i >= static_cast<int>(resolutions.size()))
      throw ConfigError("model: single_i out of range");
    if (single_j != 0 && single_j != 1) throw ConfigError("model: single_j must be 0/1");
    if (len_text < 3) throw ConfigError("model: len_text must be >= 3");
    if (cls < 4) throw ConfigError("model: cls must hold charset plus specials");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout out of range");
    if (ff_dim < 1 || enc_layers < 1 || dec_layers < 1)
      throw ConfigError("model: layer sizes must be positive");
  }
};

struct ImageStreamSpec {
  int res_idx = 0;
  int linear_idx = 0;
  int pos_enc_idx = 0;
};

struct ExpertStreamSpec {
  int img_stream = 0;
  int embed_idx = 0;
  int pos_dec_idx = 0;
  int order = 0;
  ExpertId id;
};

template <class S>
struct AttentionParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class S>
struct EncLayerParams {
  AttentionParams<S> self;
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor<S> ln2_g, ln2_b;
};

template <class S>
struct DecLayerParams {
  AttentionParams<S> self;
  Tensor<S> ln1_g, ln1_b;
  AttentionParams<S> cross;
  Tensor<S> ln2_g, ln2_b;
  Tensor<S> ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor<S> ln3_g, ln3_b;
};

// Model inputs for one packed step: patch matrices per image stream plus
// teacher-forcing token rows per expert stream.
template <class S>
struct PackedBatch {
  int64_t batch = 0;
  std::vector<Tensor<S>> patches;             // per image stream: [B*len_img, size]
  std::vector<std::vector<int64_t>> tokens;   // per expert: [B*(len_text-1)]
  std::vector<std::vector<int64_t>> targets;  // per expert: [B*(len_text-1)]
};

template <class S>
class PtieModel {
 public:
  PtieModel() = default;

  static PtieModel build(const ModelConfig& cfg, const Charset& charset, uint64_t seed) {
    cfg.validate();
    if (cfg.cls != charset.cls())
      throw ConfigError("model: config cls " + std::to_string(cfg.cls) +
                        " does not match charset cls " + std::to_string(charset.cls()));
    PtieModel m;
    m.cfg_ = cfg;
    m.charset_ = charset;
    m.seed_ = seed;
    m.build_streams();
    m.init_params();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const Charset& charset() const { return charset_; }
  uint64_t seed() const { return seed_; }
  int n_experts() const { return static_cast<int>(experts_.size()); }
  int n_img_streams() const { return static_cast<int>(img_streams_.size()); }
  const std::vector<ExpertStreamSpec>& experts() const { return experts_; }
  const std::vector<ImageStreamSpec>& img_streams() const { return img_streams_; }

  ParamRegistry<S>& params() { return params_; }
  const ParamRegistry<S>& params() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // ------------------------- accounting -------------------------

  struct Accounting {
    int64_t total = 0;
    int64_t shared = 0;
    std::vector<int64_t> expert_heads;      // per expert stream
    std::vector<double> shared_fraction;    // shared / (shared + heads_e)
  };

  Accounting accounting() const {
    Accounting acc;
    for (const auto& p : params_) {
      acc.total += p.tensor.numel();
      if (!is_head_param(p.name)) acc.shared += p.tensor.numel();
    }
    for (const auto& e : experts_) {
      const auto& is = img_streams_[e.img_stream];
      int64_t heads = lin_w_[is.linear_idx].numel() + lin_b_[is.linear_idx].numel() +
                      pos_enc_[is.pos_enc_idx].numel() + embed_[e.embed_idx].numel() +
                      pos_dec_[e.pos_dec_idx].numel();
      acc.expert_heads.push_back(heads);
      acc.shared_fraction.push_back(static_cast<double>(acc.shared) /
                                    static_cast<double>(acc.shared + heads));
    }
    return acc;
  }

  // ------------------------- batch construction -------------------------

  // Images must already be img_h x img_w in [0,1]; texts are raw labels.
  PackedBatch<S> make_batch(const std::vector<ImageTensor>& images,
                            const std::vector<std::string>& texts) const {
    if (images.size() != texts.size()) throw DataError("make_batch: image/text count mismatch");
    const int64_t B = static_cast<int64_t>(images.size());
    const int64_t L = cfg_.len_img();
    const int64_t size = cfg_.patch_size();
    for (const ImageTensor& img : images)
      if (img.h != cfg_.img_h || img.w != cfg_.img_w)
        throw DataError("make_batch: image is not the configured input size");
    PackedBatch<S> batch;
    batch.batch = B;
    batch.patches.reserve(img_streams_.size());
    for (const auto& is : img_streams_) {
      (void)is;
      Tensor<S> x = Tensor<S>::zeros({B * L, size});
      batch.patches.push_back(x);
    }
    parallel_for(B, [&](int64_t b) {
      const ImageTensor& img = images[b];
      const ImageTensor std_img = standardize(img, cfg_.pix_mean, cfg_.pix_std);
      for (size_t s = 0; s < img_streams_.size(); ++s) {
        const PatchSeq seq = patchify(std_img, cfg_.resolutions[img_streams_[s].res_idx]);
        S* dst = batch.patches[s].ptr() + b * L * size;
        for (int64_t i = 0; i < L * size; ++i) dst[i] = static_cast<S>(seq.values[i]);
      }
    });
    const int64_t Ldec = cfg_.len_text - 1;
    for (const auto& e : experts_) {
      std::vector<int64_t> in(B * Ldec), tgt(B * Ldec);
      for (int64_t b = 0; b < B; ++b) {
        const TokenSeq seq = encode(charset_, texts[b], e.order, cfg_.len_text);
        for (int64_t t = 0; t < Ldec; ++t) {
          in[b * Ldec + t] = seq.ids[t];
          tgt[b * Ldec + t] = seq.ids[t + 1];
        }
      }
      batch.tokens.push_back(std::move(in));
      batch.targets.push_back(std::move(tgt));
    }
    return batch;
  }

  // ------------------------- packed forward -------------------------

  // Logits for every expert stream: [(E*B*(len_text-1)), cls], expert-major.
  Tensor<S> teacher_forced_logits(const PackedBatch<S>& batch, Rng* drng = nullptr) const {
    validate_batch(batch);
    const int64_t B = batch.batch;
    const Tensor<S> enc = encode_packed(batch.patches, B, drng);
    return decode_packed(enc, batch.tokens, B, drng);
  }

  // Mean cross-entropy over streams and non-pad positions.
  Tensor<S> forward_teacher_forced(const PackedBatch<S>& batch, Rng* drng = nullptr) const {
    Tensor<S> logits = teacher_forced_logits(batch, drng);
    std::vector<int64_t> targets;
    targets.reserve(logits.dim(0));
    for (const auto& t : batch.targets) targets.insert(targets.end(), t.begin(), t.end());
    return cross_entropy(logits, targets, static_cast<int64_t>(charset_.pad_id()));
  }

  // Encoder over all image streams: [(n_img*B*len_img), dim].
  Tensor<S> encode_packed(const std::vector<Tensor<S>>& patches, int64_t B,
                          Rng* drng = nullptr) const {
    if (patches.size() != img_streams_.size())
      throw ShapeError("encode: missing image stream input");
    const int64_t L = cfg_.len_img();
    std::vector<Tensor<S>> xs;
    xs.reserve(img_streams_.size());
    for (size_t s = 0; s < img_streams_.size(); ++s) {
      const auto& is = img_streams_[s];
      if (patches[s].dim(0) != B * L || patches[s].dim(1) != cfg_.patch_size())
        throw ShapeError("encode: patch matrix shape mismatch");
      Tensor<S> x = linear(patches[s], lin_w_[is.linear_idx], lin_b_[is.linear_idx]);
      if (cfg_.pe_mode == PeMode::vanilla)
        x = add_position_rows(x, pos_enc_[is.pos_enc_idx], L);
      xs.push_back(x);
    }
    Tensor<S> x = dropout(concat_rows(xs), cfg_.dropout, drng);

    std::optional<Tensor<S>> alpha;
    if (cfg_.pe_mode == PeMode::untied) alpha = encoder_positional_attention();

    const int64_t G = static_cast<int64_t>(img_streams_.size()) * B;
    for (const auto& layer : enc_) {
      Tensor<S> att = self_attention(x, G, L, layer.self, false,
                                     alpha ? &*alpha : nullptr, B, drng);
      x = layer_norm(add(x, dropout(att, cfg_.dropout, drng)), layer.ln1_g, layer.ln1_b);
      Tensor<S> ff = linear(relu(linear(x, layer.ff_w1, layer.ff_b1)), layer.ff_w2, layer.ff_b2);
      x = layer_norm(add(x, dropout(ff, cfg_.dropout, drng)), layer.ln2_g, layer.ln2_b);
    }
    return x;
  }

  // Positional attention maps (untied mode), shared by all layers of the
  // respective stack.
  Tensor<S> encoder_positional_attention() const {
    std::vector<Tensor<S>> per_stream;
    per_stream.reserve(img_streams_.size());
    for (const auto& is : img_streams_)
      per_stream.push_back(
          positional_attention(pos_enc_[is.pos_enc_idx], pos_enc_[is.pos_enc_idx],
                               untied_enc_q_, untied_enc_k_));
    return concat_rows(per_stream);  // [(n_img*H), L, L]
  }

  Tensor<S> decoder_positional_attention() const {
    const int64_t Ldec = cfg_.len_text - 1;
    std::vector<Tensor<S>> per_expert;
    per_expert.reserve(experts_.size());
    for (const auto& e : experts_) {
      Tensor<S> p = slice_rows(pos_dec_[e.pos_dec_idx], 0, Ldec);
      per_expert.push_back(positional_attention(p, p, untied_dec_q_, untied_dec_k_));
    }
    return concat_rows(per_expert);  // [(E*H), Ldec, Ldec]
  }

  Tensor<S> cross_positional_attention() const {
    const int64_t Ldec = cfg_.len_text - 1;
    std::vector<Tensor<S>> per_expert;
    per_expert.reserve(experts_.size());
    for (const auto& e : experts_) {
      const auto& is = img_streams_[e.img_stream];
      Tensor<S> pq = slice_rows(pos_dec_[e.pos_dec_idx], 0, Ldec);
      per_expert.push_back(
          positional_attention(pq, pos_enc_[is.pos_enc_idx], untied_cross_q_, untied_cross_k_));
    }
    return concat_rows(per_expert);  // [(E*H), Ldec, len_img]
  }

  // Per-head scaled product of projected positional tables: [H, Lq, Lk].
  Tensor<S> positional_attention(const Tensor<S>& pq, const Tensor<S>& pk,
                                 const Tensor<S>& wq, const Tensor<S>& wk) const {
    const int64_t H = cfg_.heads, D = cfg_.dim, hd = D / H;
    const int64_t Lq = pq.dim(0), Lk = pk.dim(0);
    Tensor<S> q = split_heads(matmul(pq, wq).reshaped({1, Lq, D}), H);
    Tensor<S> k = split_heads(matmul(pk, wk).reshaped({1, Lk, D}), H);
    return scale(matmul(q, k, true), static_cast<S>(1.0 / std::sqrt(2.0 * hd)));
  }

  // Decoder over all expert streams given packed encoder output.
  Tensor<S> decode_packed(const Tensor<S>& enc, const std::vector<std::vector<int64_t>>& tokens,
                          int64_t B, Rng* drng = nullptr) const {
    const int64_t E = n_experts();
    if (static_cast<int64_t>(tokens.size()) != E)
      throw ShapeError("decode: missing expert stream input");
    const int64_t Ldec = cfg_.len_text - 1;
    const int64_t L = cfg_.len_img();

    std::vector<Tensor<S>> ys;
    ys.reserve(E);
    for (int64_t e = 0; e < E; ++e) {
      if (static_cast<int64_t>(tokens[e].size()) != B * Ldec)
        throw ShapeError("decode: token rows must be B*(len_text-1)");
      Tensor<S> y = embedding(embed_[experts_[e].embed_idx], tokens[e]);
      if (cfg_.pe_mode == PeMode::vanilla)
        y = add_position_rows(y, pos_dec_[experts_[e].pos_dec_idx], Ldec);
      ys.push_back(y);
    }
    Tensor<S> y = dropout(concat_rows(ys), cfg_.dropout, drng);

    std::optional<Tensor<S>> alpha_dec, alpha_cross;
    if (cfg_.pe_mode == PeMode::untied) {
      alpha_dec = decoder_positional_attention();
      alpha_cross = cross_positional_attention();
    }

    std::vector<int> stream_of(E);
    for (int64_t e = 0; e < E; ++e) stream_of[e] = experts_[e].img_stream;

    const int64_t G = E * B;
    for (const auto& layer : dec_) {
      Tensor<S> att = self_attention(y, G, Ldec, layer.self, true,
                                     alpha_dec ? &*alpha_dec : nullptr, B, drng);
      y = layer_norm(add(y, dropout(att, cfg_.dropout, drng)), layer.ln1_g, layer.ln1_b);

      Tensor<S> catt = cross_attention(y, G, Ldec, enc, stream_of, B, L, layer.cross,
                                       alpha_cross ? &*alpha_cross : nullptr, drng);
      y = layer_norm(add(y, dropout(catt, cfg_.dropout, drng)), layer.ln2_g, layer.ln2_b);

      Tensor<S> ff = linear(relu(linear(y, layer.ff_w1, layer.ff_b1)), layer.ff_w2, layer.ff_b2);
      y = layer_norm(add(y, dropout(ff, cfg_.dropout, drng)), layer.ln3_g, layer.ln3_b);
    }
    return linear(y, cls_w_, cls_b_);
  }

  // ------------------------- incremental decoding -------------------------
  // Evaluation path: encoder output and cross K/V are computed once, decoder
  // self K/V grow one position per step. Matches teacher forcing層 by layer.

  struct DecodeState {
    int64_t batch = 0;
    int64_t step = 0;  // next position to fill
    std::vector<std::vector<S>> self_k, self_v;    // per layer: [E*B*H, Ldec, hd]
    std::vector<std::vector<S>> cross_k, cross_v;  // per layer: [E*B*H, L, hd]
    std::vector<S> alpha_dec;    // [E*H, Ldec, Ldec] (untied)
    std::vector<S> alpha_cross;  // [E*H, Ldec, L] (untied)
  };

  DecodeState begin_decode(const std::vector<ImageTensor>& images) const {
    NoGradGuard ng;
    const int64_t B = static_cast<int64_t>(images.size());
    std::vector<std::string> dummy(images.size());
    // Build patch matrices only; token fields are not used here.
    PackedBatch<S> batch;
    batch.batch = B;
    {
      PackedBatch<S> full = make_batch(images, dummy);
      batch.patches = std::move(full.patches);
    }
    const Tensor<S> enc = encode_packed(batch.patches, B, nullptr);

    const int64_t E = n_experts();
    const int64_t L = cfg_.len_img();
    const int64_t Ldec = cfg_.len_text - 1;
    const int64_t H = cfg_.heads, hd = cfg_.dim / H;

    std::vector<int> stream_of(E);
    for (int64_t e = 0; e < E; ++e) stream_of[e] = experts_[e].img_stream;

    DecodeState st;
    st.batch = B;
    st.self_k.resize(dec_.size());
    st.self_v.resize(dec_.size());
    st.cross_k.resize(dec_.size());
    st.cross_v.resize(dec_.size());
    for (size_t l = 0; l < dec_.size(); ++l) {
      st.self_k[l].assign(static_cast<size_t>(E * B * H) * Ldec * hd, S(0));
      st.self_v[l].assign(static_cast<size_t>(E * B * H) * Ldec * hd, S(0));
      Tensor<S> k = select_stream_rows(linear(enc, dec_[l].cross.wk, dec_[l].cross.bk),
                                       stream_of, B, L);
      Tensor<S> v = select_stream_rows(linear(enc, dec_[l].cross.wv, dec_[l].cross.bv),
                                       stream_of, B, L);
      Tensor<S> kh = split_heads(k.reshaped({E * B, L, cfg_.dim}), H);
      Tensor<S> vh = split_heads(v.reshaped({E * B, L, cfg_.dim}), H);
      st.cross_k[l] = *kh.data;
      st.cross_v[l] = *vh.data;
    }
    if (cfg_.pe_mode == PeMode::untied) {
      st.alpha_dec = *decoder_positional_attention().data;
      st.alpha_cross = *cross_positional_attention().data;
    }
    return st;
  }

  // One decoding step. tokens: [E*B] expert-major token ids consumed at the
  // current position; returns logits [E*B, cls] row-major.
  std::vector<S> decode_step(DecodeState& st, const std::vector<int64_t>& tokens) const {
    NoGradGuard ng;
    const int64_t E = n_experts(), B = st.batch;
    const int64_t N = E * B;
    const int64_t D = cfg_.dim, H = cfg_.heads, hd = D / H;
    const int64_t Ldec = cfg_.len_text - 1;
    const int64_t L = cfg_.len_img();
    const int64_t t = st.step;
    if (t >= Ldec)
      throw DataError("decode_step: prefix longer than len_text-1 positions");
    if (static_cast<int64_t>(tokens.size()) != N)
      throw ShapeError("decode_step: need one token per expert stream per sample");

    // Token embedding (+ vanilla positional row).
    std::vector<S> x(static_cast<size_t>(N) * D);
    for (int64_t n = 0; n < N; ++n) {
      const int64_t e = n / B;
      const auto& es = experts_[e];
      const int64_t id = tokens[n];
      if (id < 0 || id >= cfg_.cls) throw VocabError("decode_step: token id out of range");
      const S* row = embed_[es.embed_idx].ptr() + id * D;
      S* dst = x.data() + n * D;
      std::copy(row, row + D, dst);
      if (cfg_.pe_mode == PeMode::vanilla) {
        const S* pos = pos_dec_[es.pos_dec_idx].ptr() + t * D;
        for (int64_t c = 0; c < D; ++c) dst[c] += pos[c];
      }
    }

    std::vector<S> q(static_cast<size_t>(N) * D), k(q.size()), v(q.size()),
        ctx(static_cast<size_t>(N) * D), tmp(q.size());
    std::vector<S> ff(static_cast<size_t>(N) * cfg_.ff_dim);
    const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    for (size_t l = 0; l < dec_.size(); ++l) {
      const auto& layer = dec_[l];
      // ---- masked self-attention (causality is implicit: keys 0..t) ----
      eval_linear(x.data(), N, D, layer.self.wq, layer.self.bq, q.data());
      eval_linear(x.data(), N, D, layer.self.wk, layer.self.bk, k.data());
      eval_linear(x.data(), N, D, layer.self.wv, layer.self.bv, v.data());
      S* kc = st.self_k[l].data();
      S* vc = st.self_v[l].data();
      parallel_for(N * H, [&](int64_t nh) {
        const int64_t n = nh / H, h = nh % H;
        const S* krow = k.data() + n * D + h * hd;
        const S* vrow = v.data() + n * D + h * hd;
        std::copy(krow, krow + hd, kc + (nh * Ldec + t) * hd);
        std::copy(vrow, vrow + hd, vc + (nh * Ldec + t) * hd);
      });
      parallel_for(N * H, [&](int64_t nh) {
        const int64_t n = nh / H, h = nh % H;
        const int64_t e = n / B;
        const S* qrow = q.data() + n * D + h * hd;
        const S* keys = kc + nh * Ldec * hd;
        S scores[64 + 2];  // Ldec is small; fall back to heap if ever larger
        std::vector<S> heap;
        S* sc = scores;
        if (t + 1 > 64) {
          heap.resize(t + 1);
          sc = heap.data();
        }
        const S* al = st.alpha_dec.empty()
                          ? nullptr
                          : st.alpha_dec.data() + ((e * H + h) * Ldec + t) * Ldec;
        for (int64_t tau = 0; tau <= t; ++tau) {
          S dot = 0;
          const S* kr = keys + tau * hd;
          for (int64_t c = 0; c < hd; ++c) dot += qrow[c] * kr[c];
          sc[tau] = dot * inv_sqrt_hd + (al ? al[tau] : S(0));
        }
        softmax_inplace(sc, t + 1);
        const S* vals = vc + nh * Ldec * hd;
        S* out = ctx.data() + n * D + h * hd;
        std::fill(out, out + hd, S(0));
        for (int64_t tau = 0; tau <= t; ++tau) {
          const S p = sc[tau];
          const S* vr = vals + tau * hd;
          for (int64_t c = 0; c < hd; ++c) out[c] += p * vr[c];
        }
      });
      eval_linear(ctx.data(), N, D, layer.self.wo, layer.self.bo, tmp.data());
      eval_residual_norm(x.data(), tmp.data(), N, D, layer.ln1_g, layer.ln1_b);

      // ---- cross-attention over cached encoder K/V ----
      eval_linear(x.data(), N, D, layer.cross.wq, layer.cross.bq, q.data());
      const S* ck = st.cross_k[l].data();
      const S* cv = st.cross_v[l].data();
      parallel_for(N * H, [&](int64_t nh) {
        const int64_t n = nh / H, h = nh % H;
        const int64_t e = n / B;
        const S* qrow = q.data() + n * D + h * hd;
        const S* keys = ck + nh * L * hd;
        std::vector<S> sc(L);
        const S* al = st.alpha_cross.empty()
                          ? nullptr
                          : st.alpha_cross.data() + ((e * H + h) * Ldec + t) * L;
        for (int64_t tau = 0; tau < L; ++tau) {
          S dot = 0;
          const S* kr = keys + tau * hd;
          for (int64_t c = 0; c < hd; ++c) dot += qrow[c] * kr[c];
          sc[tau] = dot * inv_sqrt_hd + (al ? al[tau] : S(0));
        }
        softmax_inplace(sc.data(), L);
        const S* vals = cv + nh * L * hd;
        S* out = ctx.data() + n * D + h * hd;
        std::fill(out, out + hd, S(0));
        for (int64_t tau = 0; tau < L; ++tau) {
          const S p = sc[tau];
          const S* vr = vals + tau * hd;
          for (int64_t c = 0; c < hd; ++c) out[c] += p * vr[c];
        }
      });
      eval_linear(ctx.data(), N, D, layer.cross.wo, layer.cross.bo, tmp.data());
      eval_residual_norm(x.data(), tmp.data(), N, D, layer.ln2_g, layer.ln2_b);

      // ---- feed forward ----
      eval_linear(x.data(), N, D, layer.ff_w1, layer.ff_b1, ff.data());
      for (S& fv : ff) fv = fv > S(0) ? fv : S(0);
      eval_linear(ff.data(), N, cfg_.ff_dim, layer.ff_w2, layer.ff_b2, tmp.data());
      eval_residual_norm(x.data(), tmp.data(), N, D, layer.ln3_g, layer.ln3_b);
    }

    std::vector<S> logits(static_cast<size_t>(N) * cfg_.cls);
    eval_linear(x.data(), N, D, cls_w_, cls_b_, logits.data());
    ++st.step;
    return logits;
  }

  // ------------------------- weight access -------------------------

  const Tensor<S>& pos_enc_table(int idx) const { return pos_enc_[idx]; }
  const Tensor<S>& pos_dec_table(int idx) const { return pos_dec_[idx]; }
  const Tensor<S>& untied_enc_q() const { return untied_enc_q_; }
  const Tensor<S>& untied_enc_k() const { return untied_enc_k_; }

  // Copies the shared stack plus one expert's heads into a single-expert
  // model with identical behavior on that stream.
  static PtieModel extract_single_expert(const PtieModel& src, int expert_index) {
    const auto& es = src.experts_.at(expert_index);
    const auto& is = src.img_streams_[es.img_stream];
    ModelConfig cfg = src.cfg_;
    cfg.experts = ExpertLayout::single;
    cfg.single_i = is.res_idx;
    cfg.single_j = es.order;
    PtieModel dst = build(cfg, src.charset_, src.seed_);
    auto copy = [](Tensor<S>& to, const Tensor<S>& from) { *to.data = *from.data; };
    for (int l = 0; l < cfg.enc_layers; ++l) {
      copy_attention(dst.enc_[l].self, src.enc_[l].self);
      copy(dst.enc_[l].ln1_g, src.enc_[l].ln1_g);
      copy(dst.enc_[l].ln1_b, src.enc_[l].ln1_b);
      copy(dst.enc_[l].ff_w1, src.enc_[l].ff_w1);
      copy(dst.enc_[l].ff_b1, src.enc_[l].ff_b1);
      copy(dst.enc_[l].ff_w2, src.enc_[l].ff_w2);
      copy(dst.enc_[l].ff_b2, src.enc_[l].ff_b2);
      copy(dst.enc_[l].ln2_g, src.enc_[l].ln2_g);
      copy(dst.enc_[l].ln2_b, src.enc_[l].ln2_b);
    }
    for (int l = 0; l < cfg.dec_layers; ++l) {
      copy_attention(dst.dec_[l].self, src.dec_[l].self);
      copy_attention(dst.dec_[l].cross, src.dec_[l].cross);
      copy(dst.dec_[l].ln1_g, src.dec_[l].ln1_g);
      copy(dst.dec_[l].ln1_b, src.dec_[l].ln1_b);
      copy(dst.dec_[l].ln2_g, src.dec_[l].ln2_g);
      copy(dst.dec_[l].ln2_b, src.dec_[l].ln2_b);
      copy(dst.dec_[l].ff_w1, src.dec_[l].ff_w1);
      copy(dst.dec_[l].ff_b1, src.dec_[l].ff_b1);
      copy(dst.dec_[l].ff_w2, src.dec_[l].ff_w2);
      copy(dst.dec_[l].ff_b2, src.dec_[l].ff_b2);
      copy(dst.dec_[l].ln3_g, src.dec_[l].ln3_g);
      copy(dst.dec_[l].ln3_b, src.dec_[l].ln3_b);
    }
    copy(dst.cls_w_, src.cls_w_);
    copy(dst.cls_b_, src.cls_b_);
    if (cfg.pe_mode == PeMode::untied) {
      copy(dst.untied_enc_q_, src.untied_enc_q_);
      copy(dst.untied_enc_k_, src.untied_enc_k_);
      copy(dst.untied_dec_q_, src.untied_dec_q_);
      copy(dst.untied_dec_k_, src.untied_dec_k_);
      copy(dst.untied_cross_q_, src.untied_cross_q_);
      copy(dst.untied_cross_k_, src.untied_cross_k_);
    }
    copy(dst.lin_w_[0], src.lin_w_[is.linear_idx]);
    copy(dst.lin_b_[0], src.lin_b_[is.linear_idx]);
    copy(dst.pos_enc_[0], src.pos_enc_[is.pos_enc_idx]);
    copy(dst.embed_[0], src.embed_[es.embed_idx]);
    copy(dst.pos_dec_[0], src.pos_dec_[es.pos_dec_idx]);
    return dst;
  }

 private:
  // ------------------------- attention blocks -------------------------

  Tensor<S> self_attention(const Tensor<S>& x, int64_t G, int64_t L,
                           const AttentionParams<S>& ap, bool causal, const Tensor<S>* alpha,
                           int64_t B, Rng* drng) const {
    const int64_t H = cfg_.heads, D = cfg_.dim, hd = D / H;
    Tensor<S> q = split_heads(linear(x, ap.wq, ap.bq).reshaped({G, L, D}), H);
    Tensor<S> k = split_heads(linear(x, ap.wk, ap.bk).reshaped({G, L, D}), H);
    Tensor<S> v = split_heads(linear(x, ap.wv, ap.bv).reshaped({G, L, D}), H);
    Tensor<S> scores =
        scale(matmul(q, k, true), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
    if (alpha) scores = add_positional_scores(scores, *alpha, B, H);
    if (causal) scores = add_causal_mask(scores);
    Tensor<S> probs = dropout(softmax_lastdim(scores), cfg_.dropout, drng);
    Tensor<S> ctx = merge_heads(matmul(probs, v), H).reshaped({G * L, D});
    return linear(ctx, ap.wo, ap.bo);
  }

  Tensor<S> cross_attention(const Tensor<S>& y, int64_t G, int64_t Lq, const Tensor<S>& enc,
                            const std::vector<int>& stream_of, int64_t B, int64_t Lk,
                            const AttentionParams<S>& ap, const Tensor<S>* alpha,
                            Rng* drng) const {
    const int64_t H = cfg_.heads, D = cfg_.dim, hd = D / H;
    Tensor<S> q = split_heads(linear(y, ap.wq, ap.bq).reshaped({G, Lq, D}), H);
    // K/V are computed once over the packed encoder rows, then routed to the
    // experts that read each stream.
    Tensor<S> k = select_stream_rows(linear(enc, ap.wk, ap.bk), stream_of, B, Lk);
    Tensor<S> v = select_stream_rows(linear(enc, ap.wv, ap.bv), stream_of, B, Lk);
    Tensor<S> kh = split_heads(k.reshaped({G, Lk, D}), H);
    Tensor<S> vh = split_heads(v.reshaped({G, Lk, D}), H);
    Tensor<S> scores =
        scale(matmul(q, kh, true), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
    if (alpha) scores = add_positional_scores(scores, *alpha, B, H);
    Tensor<S> probs = dropout(softmax_lastdim(scores), cfg_.dropout, drng);
    Tensor<S> ctx = merge_heads(matmul(probs, vh), H).reshaped({G * Lq, D});
    return linear(ctx, ap.wo, ap.bo);
  }

  // ------------------------- eval kernels -------------------------

  void eval_linear(const S* x, int64_t n, int64_t in_dim, const Tensor<S>& w,
                   const Tensor<S>& b, S* out) const {
    detail::gemm_rows_parallel<S>(x, n, in_dim, w.ptr(), w.dim(1), false, out);
    const S* bias = b.ptr();
    const int64_t od = w.dim(1);
    for (int64_t r = 0; r < n; ++r) {
      S* row = out + r * od;
      for (int64_t c = 0; c < od; ++c) row[c] += bias[c];
    }
  }

  static void softmax_inplace(S* x, int64_t n) {
    S m = x[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    S sum = 0;
    for (int64_t i = 0; i < n; ++i) {
      x[i] = std::exp(x[i] - m);
      sum += x[i];
    }
    const S inv = S(1) / sum;
    for (int64_t i = 0; i < n; ++i) x[i] *= inv;
  }

  void eval_residual_norm(S* x, const S* branch, int64_t n, int64_t d, const Tensor<S>& gain,
                          const Tensor<S>& bias) const {
    const S* g = gain.ptr();
    const S* b = bias.ptr();
    parallel_for(n, [&](int64_t r) {
      S* row = x + r * d;
      const S* br = branch + r * d;
      S mean = 0;
      for (int64_t c = 0; c < d; ++c) {
        row[c] += br[c];
        mean += row[c];
      }
      mean /= S(d);
      S var = 0;
      for (int64_t c = 0; c < d; ++c) {
        const S t2 = row[c] - mean;
        var += t2 * t2;
      }
      var /= S(d);
      const S istd = S(1) / std::sqrt(var + S(1e-5));
      for (int64_t c = 0; c < d; ++c) row[c] = g[c] * (row[c] - mean) * istd + b[c];
    }, 8);
  }

  // ------------------------- construction -------------------------

  void build_streams() {
    img_streams_.clear();
    experts_.clear();
    switch (cfg_.experts) {
      case ExpertLayout::diverse:
        img_streams_ = {{0, 0, 0}, {1, 1, 1}};
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) experts_.push_back({i, j, j, j, {i, j}});
        break;
      case ExpertLayout::identical: {
        // Mirrors the ablation: four experts over one input type (8x4 patches
        // with original order), separately initialized heads.
        const int res = static_cast<int>(cfg_.resolutions.size()) - 1;
        for (int e = 0; e < 4; ++e) {
          img_streams_.push_back({res, e, e});
          experts_.push_back({e, e, e, 0, {res, 0}});
        }
        break;
      }
      case ExpertLayout::single:
        img_streams_ = {{cfg_.single_i, 0, 0}};
        experts_.push_back({0, 0, 0, cfg_.single_j, {cfg_.single_i, cfg_.single_j}});
        break;
    }
  }

  static void copy_attention(AttentionParams<S>& to, const AttentionParams<S>& from) {
    *to.wq.data = *from.wq.data;
    *to.bq.data = *from.bq.data;
    *to.wk.data = *from.wk.data;
    *to.bk.data = *from.bk.data;
    *to.wv.data = *from.wv.data;
    *to.bv.data = *from.bv.data;
    *to.wo.data = *from.wo.data;
    *to.bo.data = *from.bo.data;
  }

  static bool is_head_param(const std::string& name) {
    return name.rfind("img_linear.", 0) == 0 || name.rfind("embed.", 0) == 0 ||
           name.rfind("pos_enc.", 0) == 0 || name.rfind("pos_dec.", 0) == 0;
  }

  Tensor<S> init_linear(Rng& rng, int64_t in_dim, int64_t out_dim) {
    Tensor<S> t = Tensor<S>::zeros({in_dim, out_dim}, true);
    const double bound = cfg_.init_scale / std::sqrt(static_cast<double>(in_dim));
    for (int64_t i = 0; i < t.numel(); ++i)
      (*t.data)[i] = static_cast<S>(rng.uniform(-bound, bound));
    return t;
  }

  Tensor<S> init_bias(int64_t n) { return Tensor<S>::zeros({n}, true); }

  Tensor<S> init_table(Rng& rng, int64_t rows, int64_t cols) {
    Tensor<S> t = Tensor<S>::zeros({rows, cols}, true);
    for (int64_t i = 0; i < t.numel(); ++i)
      (*t.data)[i] = static_cast<S>(rng.normal(0.0, cfg_.pos_init_std));
    return t;
  }

  Tensor<S> init_ones(int64_t n) {
    Tensor<S> t = Tensor<S>::zeros({n}, true);
    std::fill(t.data->begin(), t.data->end(), S(1));
    return t;
  }

  AttentionParams<S> init_attention(Rng& rng) {
    AttentionParams<S> ap;
    ap.wq = init_linear(rng, cfg_.dim, cfg_.dim);
    ap.bq = init_bias(cfg_.dim);
    ap.wk = init_linear(rng, cfg_.dim, cfg_.dim);
    ap.bk = init_bias(cfg_.dim);
    ap.wv = init_linear(rng, cfg_.dim, cfg_.dim);
    ap.bv = init_bias(cfg_.dim);
    ap.wo = init_linear(rng, cfg_.dim, cfg_.dim);
    ap.bo = init_bias(cfg_.dim);
    return ap;
  }

  void register_attention(const std::string& prefix, AttentionParams<S>& ap) {
    params_.push_back({prefix + ".wq", ap.wq});
    params_.push_back({prefix + ".bq", ap.bq});
    params_.push_back({prefix + ".wk", ap.wk});
    params_.push_back({prefix + ".bk", ap.bk});
    params_.push_back({prefix + ".wv", ap.wv});
    params_.push_back({prefix + ".bv", ap.bv});
    params_.push_back({prefix + ".wo", ap.wo});
    params_.push_back({prefix + ".bo", ap.bo});
  }

  void init_params() {
    Rng rng(derive_seed(seed_, 0));
    const int64_t D = cfg_.dim;

    int n_lin = 0, n_pos_enc = 0, n_embed = 0, n_pos_dec = 0;
    for (const auto& is : img_streams_) {
      n_lin = std::max(n_lin, is.linear_idx + 1);
      n_pos_enc = std::max(n_pos_enc, is.pos_enc_idx + 1);
    }
    for (const auto& e : experts_) {
      n_embed = std::max(n_embed, e.embed_idx + 1);
      n_pos_dec = std::max(n_pos_dec, e.pos_dec_idx + 1);
    }

    enc_.resize(cfg_.enc_layers);
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      enc_[l].self = init_attention(rng);
      enc_[l].ln1_g = init_ones(D);
      enc_[l].ln1_b = init_bias(D);
      enc_[l].ff_w1 = init_linear(rng, D, cfg_.ff_dim);
      enc_[l].ff_b1 = init_bias(cfg_.ff_dim);
      enc_[l].ff_w2 = init_linear(rng, cfg_.ff_dim, D);
      enc_[l].ff_b2 = init_bias(D);
      enc_[l].ln2_g = init_ones(D);
      enc_[l].ln2_b = init_bias(D);
    }
    dec_.resize(cfg_.dec_layers);
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      dec_[l].self = init_attention(rng);
      dec_[l].ln1_g = init_ones(D);
      dec_[l].ln1_b = init_bias(D);
      dec_[l].cross = init_attention(rng);
      dec_[l].ln2_g = init_ones(D);
      dec_[l].ln2_b = init_bias(D);
      dec_[l].ff_w1 = init_linear(rng, D, cfg_.ff_dim);
      dec_[l].ff_b1 = init_bias(cfg_.ff_dim);
      dec_[l].ff_w2 = init_linear(rng, cfg_.ff_dim, D);
      dec_[l].ff_b2 = init_bias(D);
      dec_[l].ln3_g = init_ones(D);
      dec_[l].ln3_b = init_bias(D);
    }
    cls_w_ = init_linear(rng, D, cfg_.cls);
    cls_b_ = init_bias(cfg_.cls);
    if (cfg_.pe_mode == PeMode::untied) {
      untied_enc_q_ = init_linear(rng, D, D);
      untied_enc_k_ = init_linear(rng, D, D);
      untied_dec_q_ = init_linear(rng, D, D);
      untied_dec_k_ = init_linear(rng, D, D);
      untied_cross_q_ = init_linear(rng, D, D);
      untied_cross_k_ = init_linear(rng, D, D);
    }
    for (int i = 0; i < n_lin; ++i) {
      lin_w_.push_back(init_linear(rng, cfg_.patch_size(), D));
      lin_b_.push_back(init_bias(D));
    }
    for (int i = 0; i < n_pos_enc; ++i) pos_enc_.push_back(init_table(rng, cfg_.len_img(), D));
    for (int i = 0; i < n_embed; ++i) {
      Tensor<S> t = Tensor<S>::zeros({cfg_.cls, D}, true);
      const double bound = cfg_.init_scale / std::sqrt(static_cast<double>(D));
      for (int64_t idx = 0; idx < t.numel(); ++idx)
        (*t.data)[idx] = static_cast<S>(rng.uniform(-bound, bound));
      embed_.push_back(t);
    }
    for (int i = 0; i < n_pos_dec; ++i)
      pos_dec_.push_back(init_table(rng, cfg_.len_text, D));

    // Registry in a fixed, checkpoint-stable order.
    params_.clear();
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      register_attention(p + ".self", enc_[l].self);
      params_.push_back({p + ".ln1.g", enc_[l].ln1_g});
      params_.push_back({p + ".ln1.b", enc_[l].ln1_b});
      params_.push_back({p + ".ff.w1", enc_[l].ff_w1});
      params_.push_back({p + ".ff.b1", enc_[l].ff_b1});
      params_.push_back({p + ".ff.w2", enc_[l].ff_w2});
      params_.push_back({p + ".ff.b2", enc_[l].ff_b2});
      params_.push_back({p + ".ln2.g", enc_[l].ln2_g});
      params_.push_back({p + ".ln2.b", enc_[l].ln2_b});
    }
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      register_attention(p + ".self", dec_[l].self);
      params_.push_back({p + ".ln1.g", dec_[l].ln1_g});
      params_.push_back({p + ".ln1.b", dec_[l].ln1_b});
      register_attention(p + ".cross", dec_[l].cross);
      params_.push_back({p + ".ln2.g", dec_[l].ln2_g});
      params_.push_back({p + ".ln2.b", dec_[l].ln2_b});
      params_.push_back({p + ".ff.w1", dec_[l].ff_w1});
      params_.push_back({p + ".ff.b1", dec_[l].ff_b1});
      params_.push_back({p + ".ff.w2", dec_[l].ff_w2});
      params_.push_back({p + ".ff.b2", dec_[l].ff_b2});
      params_.push_back({p + ".ln3.g", dec_[l].ln3_g});
      params_.push_back({p + ".ln3.b", dec_[l].ln3_b});
    }
    params_.push_back({"cls.w", cls_w_});
    params_.push_back({"cls.b", cls_b_});
    if (cfg_.pe_mode == PeMode::untied) {
      params_.push_back({"untied.enc_q", untied_enc_q_});
      params_.push_back({"untied.enc_k", untied_enc_k_});
      params_.push_back({"untied.dec_q", untied_dec_q_});
      params_.push_back({"untied.dec_k", untied_dec_k_});
      params_.push_back({"untied.cross_q", untied_cross_q_});
      params_.push_back({"untied.cross_k", untied_cross_k_});
    }
    for (size_t i = 0; i < lin_w_.size(); ++i) {
      params_.push_back({"img_linear." + std::to_string(i) + ".w", lin_w_[i]});
      params_.push_back({"img_linear." + std::to_string(i) + ".b", lin_b_[i]});
    }
    for (size_t i = 0; i < pos_enc_.size(); ++i)
      params_.push_back({"pos_enc." + std::to_string(i), pos_enc_[i]});
    for (size_t i = 0; i < embed_.size(); ++i)
      params_.push_back({"embed." + std::to_string(i), embed_[i]});
    for (size_t i = 0; i < pos_dec_.size(); ++i)
      params_.push_back({"pos_dec." + std::to_string(i), pos_dec_[i]});
  }

  void validate_batch(const PackedBatch<S>& batch) const {
    if (batch.patches.size() != img_streams_.size())
      throw ShapeError("forward: expected " + std::to_string(img_streams_.size()) +
                       " image streams, got " + std::to_string(batch.patches.size()));
    if (batch.tokens.size() != experts_.size())
      throw ShapeError("forward: expected " + std::to_string(experts_.size()) +
                       " expert token streams, got " + std::to_string(batch.tokens.size()));
  }

  ModelConfig cfg_;
  Charset charset_;
  uint64_t seed_ = 0;
  std::vector<ImageStreamSpec> img_streams_;
  std::vector<ExpertStreamSpec> experts_;

  std::vector<EncLayerParams<S>> enc_;
  std::vector<DecLayerParams<S>> dec_;
  Tensor<S> cls_w_, cls_b_;
  Tensor<S> untied_enc_q_, untied_enc_k_, untied_dec_q_, untied_dec_k_, untied_cross_q_,
      untied_cross_k_;
  std::vector<Tensor<S>> lin_w_, lin_b_;
  std::vector<Tensor<S>> pos_enc_;   // [len_img, dim]
  std::vector<Tensor<S>> embed_;     // [cls, dim]
  std::vector<Tensor<S>> pos_dec_;   // [len_text, dim]

  ParamRegistry<S> params_;
};

}  // namespace ptie

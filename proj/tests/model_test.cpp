#include "ptie/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "testutil.hpp"

using namespace ptie;
using test::random_tensor;

namespace {

template <class S>
const Tensor<S>& param(const PtieModel<S>& m, const std::string& name) {
  for (const auto& p : m.params())
    if (p.name == name) return p.tensor;
  throw std::runtime_error("missing param " + name);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.ff_dim = 32;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.img_h = 16;
  cfg.img_w = 16;  // len_img = 8
  cfg.len_text = 6;
  cfg.dropout = 0.0;
  return cfg;
}

Charset tiny_charset() { return Charset::from_symbols("abc019"); }  // cls = 9

std::vector<ImageTensor> random_images(int n, int h, int w, uint64_t seed) {
  Rng rng(seed);
  std::vector<ImageTensor> out;
  for (int i = 0; i < n; ++i) {
    ImageTensor img = make_image(h, w);
    for (float& p : img.pix) p = static_cast<float>(rng.uniform());
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace

TEST(ModelBuild, PaperParameterCounts) {
  ModelConfig cfg;  // paper defaults: dim 512, 16 heads, 6+6 layers, untied
  const Charset cs = Charset::standard100();
  auto ptie = PtieModel<float>::build(cfg, cs, 1);
  const auto acc = ptie.accounting();
  EXPECT_NEAR(static_cast<double>(acc.total), 45.9e6, 45.9e6 * 0.02);
  ASSERT_EQ(acc.shared_fraction.size(), 4u);
  for (double f : acc.shared_fraction) EXPECT_GE(f, 0.95);

  ModelConfig single = cfg;
  single.experts = ExpertLayout::single;
  single.single_i = 1;
  single.single_j = 0;
  auto base = PtieModel<float>::build(single, cs, 1);
  EXPECT_NEAR(static_cast<double>(base.accounting().total), 45.8e6, 45.8e6 * 0.02);

  // Accounting identity: total = shared + sum of distinct head tensors.
  int64_t heads_total = 0;
  for (const auto& p : ptie.params()) {
    const bool head = p.name.rfind("img_linear.", 0) == 0 || p.name.rfind("embed.", 0) == 0 ||
                      p.name.rfind("pos_enc.", 0) == 0 || p.name.rfind("pos_dec.", 0) == 0;
    if (head) heads_total += p.tensor.numel();
  }
  EXPECT_EQ(acc.total, acc.shared + heads_total);
}

TEST(ModelBuild, ExpertStreamLayouts) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();

  auto diverse = PtieModel<double>::build(cfg, cs, 3);
  EXPECT_EQ(diverse.n_experts(), 4);
  EXPECT_EQ(diverse.n_img_streams(), 2);
  // Tie-break order (i,j) = (0,0),(0,1),(1,0),(1,1).
  EXPECT_EQ(diverse.experts()[1].id.i, 0);
  EXPECT_EQ(diverse.experts()[1].id.j, 1);
  EXPECT_EQ(diverse.experts()[2].id.i, 1);
  EXPECT_EQ(diverse.experts()[2].id.j, 0);
  // P_enc tables are independent parameters per resolution (structural check).
  EXPECT_NE(param(diverse, "pos_enc.0").data.get(), param(diverse, "pos_enc.1").data.get());

  ModelConfig icfg = cfg;
  icfg.experts = ExpertLayout::identical;
  auto identical = PtieModel<double>::build(icfg, cs, 3);
  EXPECT_EQ(identical.n_experts(), 4);
  EXPECT_EQ(identical.n_img_streams(), 4);
  for (const auto& e : identical.experts()) {
    EXPECT_EQ(e.order, 0);
    EXPECT_EQ(e.id.i, 1);  // 8x4 resolution, as in the ablation baseline
  }

  ModelConfig bad = cfg;
  bad.dim = 15;  // not divisible by heads
  EXPECT_THROW(PtieModel<double>::build(bad, cs, 1), ConfigError);
}

TEST(PositionalAttention, ZeroTablesGiveZeroMaps) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  auto m = PtieModel<double>::build(cfg, cs, 5);
  auto p = Tensor<double>::zeros({8, cfg.dim});
  Rng rng(6);
  auto wq = random_tensor<double>({cfg.dim, cfg.dim}, rng);
  auto wk = random_tensor<double>({cfg.dim, cfg.dim}, rng);
  auto alpha = m.positional_attention(p, p, wq, wk);
  EXPECT_EQ(alpha.shape, (Shape{cfg.heads, 8, 8}));
  for (int64_t i = 0; i < alpha.numel(); ++i) EXPECT_EQ((*alpha.data)[i], 0.0);
}

TEST(PositionalAttention, OrthonormalRowsGiveScaledIdentity) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  cfg.heads = 1;  // single head: orthonormal rows of P give exactly scale * I
  auto m = PtieModel<double>::build(cfg, cs, 5);
  const int64_t L = 8, D = cfg.dim;
  auto p = Tensor<double>::zeros({L, D});
  for (int64_t l = 0; l < L; ++l) (*p.data)[l * D + l] = 1.0;  // orthonormal rows
  auto eye = Tensor<double>::zeros({D, D});
  for (int64_t i = 0; i < D; ++i) (*eye.data)[i * D + i] = 1.0;
  auto alpha = m.positional_attention(p, p, eye, eye);
  const double s = 1.0 / std::sqrt(2.0 * D);
  for (int64_t r = 0; r < L; ++r)
    for (int64_t c = 0; c < L; ++c)
      EXPECT_NEAR((*alpha.data)[r * L + c], r == c ? s : 0.0, 1e-15);
}

TEST(PositionalAttention, MatchesDirectDenseOracle) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  auto m = PtieModel<double>::build(cfg, cs, 5);
  const int64_t Lq = 5, Lk = 8, D = cfg.dim, H = cfg.heads, hd = D / H;
  Rng rng(7);
  auto pq = random_tensor<double>({Lq, D}, rng);
  auto pk = random_tensor<double>({Lk, D}, rng);
  auto wq = random_tensor<double>({D, D}, rng);
  auto wk = random_tensor<double>({D, D}, rng);
  auto alpha = m.positional_attention(pq, pk, wq, wk);
  ASSERT_EQ(alpha.shape, (Shape{H, Lq, Lk}));

  // Direct dense computation: project, then per-head scaled products.
  auto at = [&](const Tensor<double>& t, int64_t r, int64_t c) {
    return (*t.data)[r * t.dim(1) + c];
  };
  const double scale = 1.0 / std::sqrt(2.0 * hd);
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t r = 0; r < Lq; ++r) {
      for (int64_t c = 0; c < Lk; ++c) {
        double dot = 0;
        for (int64_t x = 0; x < hd; ++x) {
          double qv = 0, kv = 0;
          for (int64_t z = 0; z < D; ++z) {
            qv += at(pq, r, z) * at(wq, z, h * hd + x);
            kv += at(pk, c, z) * at(wk, z, h * hd + x);
          }
          dot += qv * kv;
        }
        EXPECT_NEAR((*alpha.data)[(h * Lq + r) * Lk + c], scale * dot, 1e-10);
      }
    }
  }
}

TEST(Encoder, OutputShapeAndDeterminism) {
  const Charset cs = Charset::standard100();
  ModelConfig cfg;
  cfg.dim = 32;
  cfg.heads = 4;
  cfg.ff_dim = 64;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.len_text = 8;
  cfg.dropout = 0.0;
  auto m = PtieModel<double>::build(cfg, cs, 11);
  auto images = random_images(2, 32, 128, 21);
  auto batch = m.make_batch(images, {"ab", "c0"});
  NoGradGuard ng;
  auto enc = m.encode_packed(batch.patches, 2);
  EXPECT_EQ(enc.shape, (Shape{2 * 2 * 128, 32}));  // streams * batch * len_img

  auto enc2 = m.encode_packed(batch.patches, 2);
  for (int64_t i = 0; i < enc.numel(); ++i)
    ASSERT_EQ((*enc.data)[i], (*enc2.data)[i]);  // dropout off: bit-identical
}

// One encoder layer against a hand-rolled dense attention reference.
TEST(Encoder, SingleLayerMatchesHandRolledOracle) {
  Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  cfg.pe_mode = PeMode::vanilla;
  cfg.experts = ExpertLayout::single;
  cfg.single_i = 0;
  auto m = PtieModel<double>::build(cfg, cs, 13);
  const int64_t L = cfg.len_img(), D = cfg.dim, H = cfg.heads, hd = D / H;
  ASSERT_EQ(L, 8);

  auto images = random_images(1, cfg.img_h, cfg.img_w, 31);
  auto batch = m.make_batch(images, {"a"});
  NoGradGuard ng;
  auto got = m.encode_packed(batch.patches, 1);

  // Reference: same math, written directly over dense row vectors.
  auto vec_at = [](const Tensor<double>& t, int64_t r, int64_t c) {
    return (*t.data)[r * t.dim(1) + c];
  };
  const auto& lw = param(m, "img_linear.0.w");
  const auto& lb = param(m, "img_linear.0.b");
  const auto& pe = param(m, "pos_enc.0");
  std::vector<std::vector<double>> x(L, std::vector<double>(D));
  for (int64_t l = 0; l < L; ++l)
    for (int64_t c = 0; c < D; ++c) {
      double v = (*lb.data)[c];
      for (int64_t z = 0; z < cfg.patch_size(); ++z)
        v += (*batch.patches[0].data)[l * cfg.patch_size() + z] * vec_at(lw, z, c);
      x[l][c] = v + vec_at(pe, l, c);
    }
  auto project = [&](const std::vector<std::vector<double>>& in, const Tensor<double>& w,
                     const Tensor<double>& b) {
    std::vector<std::vector<double>> out(in.size(), std::vector<double>(w.dim(1)));
    for (size_t r = 0; r < in.size(); ++r)
      for (int64_t c = 0; c < w.dim(1); ++c) {
        double v = (*b.data)[c];
        for (int64_t z = 0; z < w.dim(0); ++z) v += in[r][z] * vec_at(w, z, c);
        out[r][c] = v;
      }
    return out;
  };
  auto lnorm = [&](std::vector<std::vector<double>>& rows, const Tensor<double>& g,
                   const Tensor<double>& b) {
    for (auto& row : rows) {
      double mean = 0;
      for (double v : row) mean += v;
      mean /= row.size();
      double var = 0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= row.size();
      const double istd = 1.0 / std::sqrt(var + 1e-5);
      for (size_t c = 0; c < row.size(); ++c)
        row[c] = (*g.data)[c] * (row[c] - mean) * istd + (*b.data)[c];
    }
  };
  auto q = project(x, param(m, "enc.0.self.wq"), param(m, "enc.0.self.bq"));
  auto k = project(x, param(m, "enc.0.self.wk"), param(m, "enc.0.self.bk"));
  auto v = project(x, param(m, "enc.0.self.wv"), param(m, "enc.0.self.bv"));
  std::vector<std::vector<double>> ctx(L, std::vector<double>(D, 0.0));
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t r = 0; r < L; ++r) {
      std::vector<double> scores(L);
      double mx = -1e300;
      for (int64_t c2 = 0; c2 < L; ++c2) {
        double dot = 0;
        for (int64_t z = 0; z < hd; ++z) dot += q[r][h * hd + z] * k[c2][h * hd + z];
        scores[c2] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, scores[c2]);
      }
      double denom = 0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      for (int64_t c2 = 0; c2 < L; ++c2)
        for (int64_t z = 0; z < hd; ++z)
          ctx[r][h * hd + z] += scores[c2] / denom * v[c2][h * hd + z];
    }
  }
  auto att = project(ctx, param(m, "enc.0.self.wo"), param(m, "enc.0.self.bo"));
  for (int64_t r = 0; r < L; ++r)
    for (int64_t c = 0; c < D; ++c) att[r][c] += x[r][c];
  lnorm(att, param(m, "enc.0.ln1.g"), param(m, "enc.0.ln1.b"));
  auto h1 = project(att, param(m, "enc.0.ff.w1"), param(m, "enc.0.ff.b1"));
  for (auto& row : h1)
    for (double& vv : row) vv = vv > 0 ? vv : 0;
  auto h2 = project(h1, param(m, "enc.0.ff.w2"), param(m, "enc.0.ff.b2"));
  for (int64_t r = 0; r < L; ++r)
    for (int64_t c = 0; c < D; ++c) h2[r][c] += att[r][c];
  lnorm(h2, param(m, "enc.0.ln2.g"), param(m, "enc.0.ln2.b"));

  for (int64_t r = 0; r < L; ++r)
    for (int64_t c = 0; c < D; ++c)
      ASSERT_NEAR((*got.data)[r * D + c], h2[r][c], 1e-8);
}

TEST(Forward, UntrainedLossNearLogCls) {
  const Charset cs = Charset::standard100();
  ModelConfig cfg;
  cfg.dim = 64;
  cfg.heads = 4;
  cfg.ff_dim = 128;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.len_text = 10;
  cfg.dropout = 0.0;
  auto m = PtieModel<double>::build(cfg, cs, 17);
  auto images = random_images(4, 32, 128, 23);
  auto batch = m.make_batch(images, {"cat", "dog1", "ab", "xyz"});
  NoGradGuard ng;
  const double loss = m.forward_teacher_forced(batch).item();
  EXPECT_NEAR(loss, std::log(100.0), 0.05);
}

TEST(Forward, LossInvariantUnderSampleShuffle) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  auto m = PtieModel<double>::build(cfg, cs, 19);
  auto images = random_images(3, cfg.img_h, cfg.img_w, 29);
  std::vector<std::string> texts = {"ab", "c0", "19"};
  NoGradGuard ng;
  const double l1 = m.forward_teacher_forced(m.make_batch(images, texts)).item();
  std::vector<ImageTensor> shuffled = {images[2], images[0], images[1]};
  std::vector<std::string> stexts = {texts[2], texts[0], texts[1]};
  const double l2 = m.forward_teacher_forced(m.make_batch(shuffled, stexts)).item();
  EXPECT_NEAR(l1, l2, 1e-10);
}

TEST(Packed, EquivalentToIndependentSingleExpertRuns) {
  const Charset cs = tiny_charset();
  for (PeMode pe : {PeMode::vanilla, PeMode::untied}) {
    ModelConfig cfg = tiny_config();
    cfg.cls = cs.cls();
    cfg.pe_mode = pe;
    auto ptie = PtieModel<double>::build(cfg, cs, 41);
    auto images = random_images(2, cfg.img_h, cfg.img_w, 43);
    std::vector<std::string> texts = {"ab", "c0"};
    NoGradGuard ng;
    auto packed = ptie.teacher_forced_logits(ptie.make_batch(images, texts));
    const int64_t B = 2, Ldec = cfg.len_text - 1, C = cs.cls();
    for (int e = 0; e < ptie.n_experts(); ++e) {
      auto single = PtieModel<double>::extract_single_expert(ptie, e);
      auto logits = single.teacher_forced_logits(single.make_batch(images, texts));
      for (int64_t r = 0; r < B * Ldec; ++r)
        for (int64_t c = 0; c < C; ++c)
          ASSERT_NEAR((*logits.data)[r * C + c],
                      (*packed.data)[(e * B * Ldec + r) * C + c], 1e-6)
              << "expert " << e << " pe " << to_string(pe);
    }
  }
}

TEST(Packed, SampleOrderPermutesOutputs) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  auto m = PtieModel<double>::build(cfg, cs, 47);
  auto images = random_images(2, cfg.img_h, cfg.img_w, 53);
  std::vector<std::string> texts = {"ab", "c0"};
  NoGradGuard ng;
  auto fwd = m.teacher_forced_logits(m.make_batch(images, texts));
  auto rev = m.teacher_forced_logits(
      m.make_batch({images[1], images[0]}, {texts[1], texts[0]}));
  const int64_t B = 2, Ldec = cfg.len_text - 1, C = cs.cls();
  for (int e = 0; e < m.n_experts(); ++e)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < Ldec * C; ++i)
        ASSERT_NEAR((*fwd.data)[((e * B + b) * Ldec) * C + i],
                    (*rev.data)[((e * B + (1 - b)) * Ldec) * C + i], 1e-9);
}

TEST(Decode, StepwiseMatchesTeacherForcing) {
  const Charset cs = tiny_charset();
  for (PeMode pe : {PeMode::vanilla, PeMode::untied}) {
    ModelConfig cfg = tiny_config();
    cfg.cls = cs.cls();
    cfg.pe_mode = pe;
    auto m = PtieModel<double>::build(cfg, cs, 59);
    auto images = random_images(2, cfg.img_h, cfg.img_w, 61);
    std::vector<std::string> texts = {"abc0", "19ab"};
    auto batch = m.make_batch(images, texts);
    NoGradGuard ng;
    auto tf = m.teacher_forced_logits(batch);

    auto st = m.begin_decode(images);
    const int64_t B = 2, E = m.n_experts(), Ldec = cfg.len_text - 1, C = cs.cls();
    for (int64_t t = 0; t < Ldec; ++t) {
      std::vector<int64_t> tokens(E * B);
      for (int64_t e = 0; e < E; ++e)
        for (int64_t b = 0; b < B; ++b) tokens[e * B + b] = batch.tokens[e][b * Ldec + t];
      auto logits = m.decode_step(st, tokens);
      for (int64_t e = 0; e < E; ++e)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c)
            ASSERT_NEAR(logits[(e * B + b) * C + c],
                        (*tf.data)[((e * B + b) * Ldec + t) * C + c], 1e-8)
                << "pe " << to_string(pe) << " t " << t;
    }
    // Exceeding len_text-1 positions is an error.
    std::vector<int64_t> tokens(E * B, cs.pad_id());
    EXPECT_THROW(m.decode_step(st, tokens), DataError);
  }
}

TEST(Model, WholeModelGradientCheck) {
  const Charset cs = tiny_charset();
  for (PeMode pe : {PeMode::untied, PeMode::vanilla}) {
    ModelConfig cfg = tiny_config();
    cfg.cls = cs.cls();
    cfg.pe_mode = pe;
    auto m = PtieModel<double>::build(cfg, cs, 67);
    auto images = random_images(2, cfg.img_h, cfg.img_w, 71);
    std::vector<std::string> texts = {"abc", "01"};
    auto batch = m.make_batch(images, texts);

    std::vector<Tensor<double>*> tensors;
    for (auto& p : m.params()) tensors.push_back(&p.tensor);
    auto res = test::grad_check<double>(
        tensors, [&] { return m.forward_teacher_forced(batch); }, 1e-4, 3, 73);
    EXPECT_LT(res.max_rel_err, 1e-4) << "pe " << to_string(pe);
    EXPECT_GT(res.checked, 100);
  }
}

TEST(Model, MissingStreamErrors) {
  const Charset cs = tiny_charset();
  ModelConfig cfg = tiny_config();
  cfg.cls = cs.cls();
  auto m = PtieModel<double>::build(cfg, cs, 79);
  auto images = random_images(1, cfg.img_h, cfg.img_w, 83);
  auto batch = m.make_batch(images, {"a"});
  batch.tokens.pop_back();
  NoGradGuard ng;
  EXPECT_THROW(m.teacher_forced_logits(batch), ShapeError);
}

//! Small pre-norm transformer over one scale's tokens.
//!
//! Each layer is full self-attention among the scale's positions, then a
//! single-head cross-attention to the prompt tokens (the map exposed for
//! attention control), then a GELU MLP. Earlier scales reach the model only
//! through the downsampled accumulated input, which is also fed straight to
//! the logits through a linear skip. The forward and backward passes are
//! written out by hand and are generic over the float type so the gradient
//! can be checked in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::linalg::{
    add_assign, add_row, col_sum_acc, gemm, matmul, matmul_nt, matmul_nt_acc, matmul_tn_acc, softmax_rows,
    softmax_rows_backward, Real, View,
};
use super::{check_input, AttentionControl, AttentionMaps, AttnMatrix, Backend, Predictor, Prediction, ProbGrid};
use crate::error::{Error, Result};
use crate::numerics::FeatureMap;
use crate::textenc::{PromptEmbedding, EMBED_DIM};

const RMS_EPS: f64 = 1e-6;
const FOURIER_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// sin/cos per frequency per axis, plus log2 height and width.
pub const POS_FEATURES: usize = FOURIER_FREQS.len() * 4 + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_prompt: usize,
    pub init_seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            feature_dim: 32,
            embed_dim: EMBED_DIM,
            width: 128,
            layers: 4,
            heads: 4,
            hidden: 256,
            max_prompt: 32,
            init_seed: 0,
        }
    }
}

impl TransformerConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.feature_dim,
            self.embed_dim,
            self.width,
            self.layers,
            self.heads,
            self.hidden,
            self.max_prompt,
        ];
        if positive.iter().any(|&v| v == 0 || v > u16::MAX as usize) {
            return Err(Error::InvalidArgument(format!("invalid transformer config {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.embed_dim != EMBED_DIM {
            return Err(Error::InvalidArgument(format!(
                "embed_dim must equal the prompt encoder width {EMBED_DIM}"
            )));
        }
        Ok(())
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [
            self.feature_dim,
            self.embed_dim,
            self.width,
            self.layers,
            self.heads,
            self.hidden,
            self.max_prompt,
        ] {
            b.extend((v as u16).to_le_bytes());
        }
        b.extend(self.init_seed.to_le_bytes());
        b
    }

    pub(crate) const BYTES: usize = 7 * 2 + 8;

    pub(crate) fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != Self::BYTES {
            return Err(Error::Malformed("transformer config block".into()));
        }
        let u = |i: usize| u16::from_le_bytes([b[2 * i], b[2 * i + 1]]) as usize;
        let cfg = TransformerConfig {
            feature_dim: u(0),
            embed_dim: u(1),
            width: u(2),
            layers: u(3),
            heads: u(4),
            hidden: u(5),
            max_prompt: u(6),
            init_seed: u64::from_le_bytes(b[14..22].try_into().expect("8 bytes")),
        };
        cfg.validate().map_err(|e| Error::Malformed(e.to_string()))?;
        Ok(cfg)
    }
}

type Span = std::ops::Range<usize>;

#[derive(Clone, Debug, PartialEq)]
struct LayerLayout {
    norm1: Span,
    wq: Span,
    wk: Span,
    wv: Span,
    wo: Span,
    norm2: Span,
    cq: Span,
    ck: Span,
    cv: Span,
    co: Span,
    norm3: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    w_in: Span,
    b_in: Span,
    w_pos: Span,
    layers: Vec<LayerLayout>,
    norm_f: Span,
    w_out: Span,
    b_out: Span,
    w_skip: Span,
    prompt_pos: Span,
    w_sos: Span,
    b_sos: Span,
    total: usize,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, n: usize) -> Span {
        let s = self.0..self.0 + n;
        self.0 += n;
        s
    }
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let (d, e, w, hid) = (c.feature_dim, c.embed_dim, c.width, c.hidden);
        let mut a = Alloc(0);
        let w_in = a.take(d * w);
        let b_in = a.take(w);
        let w_pos = a.take(POS_FEATURES * w);
        let layers = (0..c.layers)
            .map(|_| LayerLayout {
                norm1: a.take(w),
                wq: a.take(w * w),
                wk: a.take(w * w),
                wv: a.take(w * w),
                wo: a.take(w * w),
                norm2: a.take(w),
                cq: a.take(w * w),
                ck: a.take(e * w),
                cv: a.take(e * w),
                co: a.take(w * w),
                norm3: a.take(w),
                w1: a.take(w * hid),
                b1: a.take(hid),
                w2: a.take(hid * w),
                b2: a.take(w),
            })
            .collect();
        let norm_f = a.take(w);
        let w_out = a.take(w * d);
        let b_out = a.take(d);
        let w_skip = a.take(d * d);
        let prompt_pos = a.take(c.max_prompt * e);
        let w_sos = a.take(e * d);
        let b_sos = a.take(d);
        Layout {
            w_in,
            b_in,
            w_pos,
            layers,
            norm_f,
            w_out,
            b_out,
            w_skip,
            prompt_pos,
            w_sos,
            b_sos,
            total: a.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    cfg: TransformerConfig,
    layout: Layout,
    params: Vec<f32>,
}

fn init_params(cfg: &TransformerConfig, lay: &Layout) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut p = vec![0.0f32; lay.total];
    let mut uniform = |p: &mut [f32], span: &Span, fan_in: usize, gain: f64| {
        let a = gain * (3.0 / fan_in as f64).sqrt();
        for v in &mut p[span.clone()] {
            *v = rng.random_range(-a..a) as f32;
        }
    };
    let (d, e, w, hid) = (cfg.feature_dim, cfg.embed_dim, cfg.width, cfg.hidden);
    let depth = (1.0 / (2.0 * cfg.layers as f64)).sqrt();
    uniform(&mut p, &lay.w_in, d, 1.0);
    uniform(&mut p, &lay.w_pos, POS_FEATURES, 1.0);
    for l in &lay.layers {
        uniform(&mut p, &l.wq, w, 1.0);
        uniform(&mut p, &l.wk, w, 1.0);
        uniform(&mut p, &l.wv, w, 1.0);
        uniform(&mut p, &l.wo, w, depth);
        uniform(&mut p, &l.cq, w, 1.0);
        uniform(&mut p, &l.ck, e, 1.0);
        uniform(&mut p, &l.cv, e, 1.0);
        uniform(&mut p, &l.co, w, depth);
        uniform(&mut p, &l.w1, w, 1.0);
        uniform(&mut p, &l.w2, hid, depth);
        for span in [&l.norm1, &l.norm2, &l.norm3] {
            p[span.clone()].fill(1.0);
        }
    }
    p[lay.norm_f.clone()].fill(1.0);
    uniform(&mut p, &lay.w_out, w, 0.1);
    uniform(&mut p, &lay.prompt_pos, 1, 0.1);
    uniform(&mut p, &lay.w_sos, e, 0.5);
    p
}

impl TransformerModel {
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let params = init_params(&cfg, &layout);
        Ok(TransformerModel { cfg, layout, params })
    }

    pub(crate) fn from_parts(cfg: TransformerConfig, params: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Malformed(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(TransformerModel { cfg, layout, params })
    }

    pub fn config(&self) -> TransformerConfig {
        self.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn net<'a, T: Real>(&'a self, params: &'a [T]) -> Net<'a, T> {
        Net {
            cfg: &self.cfg,
            lay: &self.layout,
            p: params,
        }
    }

    fn check_prompt(&self, prompt: &PromptEmbedding) -> Result<()> {
        if prompt.len() > self.cfg.max_prompt {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} tokens; the model accepts at most {}",
                prompt.len(),
                self.cfg.max_prompt
            )));
        }
        Ok(())
    }
}

/// Fourier features of normalized `(y, x)` plus the log2 grid size, `n x POS_FEATURES`.
pub fn position_features<T: Real>(h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w * POS_FEATURES);
    let pi = std::f64::consts::PI;
    for i in 0..h {
        for j in 0..w {
            let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
            for f in FOURIER_FREQS {
                out.push(T::from_f64((pi * f * y).sin()));
                out.push(T::from_f64((pi * f * y).cos()));
                out.push(T::from_f64((pi * f * x).sin()));
                out.push(T::from_f64((pi * f * x).cos()));
            }
            out.push(T::from_f64((h as f64).log2() / 4.0));
            out.push(T::from_f64((w as f64).log2() / 4.0));
        }
    }
    out
}

/// RMS-normalized rows (before the gain) and the per-row RMS.
fn rms_norm<T: Real>(x: &[T], gain: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let w = gain.len();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    let mut rms = Vec::with_capacity(x.len() / w);
    for row in x.chunks(w) {
        let mut ss = T::zero();
        for &v in row {
            ss += v * v;
        }
        let r = (ss / T::from_f64(w as f64) + T::from_f64(RMS_EPS)).sqrt();
        rms.push(r);
        for (&v, &g) in row.iter().zip(gain) {
            let h = v / r;
            xhat.push(h);
            y.push(h * g);
        }
    }
    (xhat, rms, y)
}

/// Accumulates the input gradient into `dx` and the gain gradient into `dgain`.
fn rms_norm_backward<T: Real>(xhat: &[T], rms: &[T], gain: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let w = gain.len();
    let inv_w = T::from_f64(1.0 / w as f64);
    for (r, ((xh, g), out)) in xhat.chunks(w).zip(dy.chunks(w)).zip(dx.chunks_mut(w)).enumerate() {
        let mut dot = T::zero();
        for i in 0..w {
            dgain[i] += g[i] * xh[i];
            dot += g[i] * gain[i] * xh[i];
        }
        let mean = dot * inv_w;
        for i in 0..w {
            out[i] += (g[i] * gain[i] - xh[i] * mean) / rms[r];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::from_f64(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

pub(crate) struct LayerTape<T> {
    xhat1: Vec<T>,
    rms1: Vec<T>,
    a1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads` consecutive `n x n` softmax matrices.
    att: Vec<T>,
    o: Vec<T>,
    xhat2: Vec<T>,
    rms2: Vec<T>,
    a2: Vec<T>,
    cq: Vec<T>,
    kc: Vec<T>,
    vc: Vec<T>,
    /// `n x L` cross-attention map actually used.
    ca: Vec<T>,
    oc: Vec<T>,
    xhat3: Vec<T>,
    rms3: Vec<T>,
    a3: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

pub(crate) struct Tape<T> {
    n: usize,
    l: usize,
    x: Vec<T>,
    pf: Vec<T>,
    e: Vec<T>,
    layers: Vec<LayerTape<T>>,
    xhat_f: Vec<T>,
    rms_f: Vec<T>,
    af: Vec<T>,
}

pub(crate) struct Forward<T> {
    pub logits: Vec<T>,
    /// Per layer, row-major `n x L`.
    pub maps: Vec<Vec<T>>,
    pub tape: Option<Tape<T>>,
}

/// Input gradients of one backward pass.
pub(crate) struct InputGrads<T> {
    /// `n x d`.
    pub dx: Vec<T>,
}

/// Parameter view used by the forward and backward passes.
pub(crate) struct Net<'a, T> {
    cfg: &'a TransformerConfig,
    lay: &'a Layout,
    p: &'a [T],
}

impl<'a, T: Real> Net<'a, T> {
    fn w(&self, s: &Span) -> &'a [T] {
        &self.p[s.clone()]
    }

    /// Prompt token rows plus learned positions, `L x e`.
    fn prompt_matrix(&self, prompt: &PromptEmbedding) -> Vec<T> {
        let pos = self.w(&self.lay.prompt_pos);
        prompt
            .vectors
            .iter()
            .zip(pos)
            .map(|(&v, &p)| T::from_f64(v as f64) + p)
            .collect()
    }

    pub fn sos(&self, prompt: &PromptEmbedding) -> Vec<T> {
        let (e, d) = (self.cfg.embed_dim, self.cfg.feature_dim);
        let mean: Vec<T> = prompt.mean_vector().iter().map(|&v| T::from_f64(v as f64)).collect();
        let mut out = matmul(&mean, 1, e, self.w(&self.lay.w_sos), d);
        add_assign(&mut out, self.w(&self.lay.b_sos));
        out
    }

    /// Runs one scale. `x` is `h x w x d` row-major.
    pub fn forward(
        &self,
        x: &[T],
        h: usize,
        w: usize,
        prompt: &PromptEmbedding,
        control: Option<&dyn AttentionControl>,
        keep_tape: bool,
    ) -> Result<Forward<T>> {
        let c = self.cfg;
        let (n, d, wd, hid, l) = (h * w, c.feature_dim, c.width, c.hidden, prompt.len());
        let (heads, dh) = (c.heads, c.width / c.heads);
        let e_dim = c.embed_dim;
        let pf = position_features::<T>(h, w);
        let e = self.prompt_matrix(prompt);

        let mut hs = matmul(x, n, d, self.w(&self.lay.w_in), wd);
        add_row(&mut hs, self.w(&self.lay.b_in));
        gemm(
            View::rm(&pf, n, POS_FEATURES, POS_FEATURES),
            View::rm(self.w(&self.lay.w_pos), POS_FEATURES, wd, wd),
            T::one(),
            &mut hs,
            wd,
        );

        let mut tapes = Vec::new();
        let mut maps = Vec::with_capacity(c.layers);
        let inv_sqrt_dh = T::from_f64(1.0 / (dh as f64).sqrt());
        let inv_sqrt_w = T::from_f64(1.0 / (wd as f64).sqrt());
        for (li, ll) in self.lay.layers.iter().enumerate() {
            // Self-attention.
            let (xhat1, rms1, a1) = rms_norm(&hs, self.w(&ll.norm1));
            let q = matmul(&a1, n, wd, self.w(&ll.wq), wd);
            let k = matmul(&a1, n, wd, self.w(&ll.wk), wd);
            let v = matmul(&a1, n, wd, self.w(&ll.wv), wd);
            let mut att = vec![T::zero(); heads * n * n];
            let mut o = vec![T::zero(); n * wd];
            for hd in 0..heads {
                let off = hd * dh;
                let s = &mut att[hd * n * n..(hd + 1) * n * n];
                gemm(
                    View::rm(&q[off..], n, dh, wd),
                    View::tr(&k[off..], dh, n, wd),
                    T::zero(),
                    s,
                    n,
                );
                s.iter_mut().for_each(|v| *v *= inv_sqrt_dh);
                softmax_rows(s, n);
                gemm(View::rm(s, n, n, n), View::rm(&v[off..], n, dh, wd), T::zero(), &mut o[off..], wd);
            }
            let proj = matmul(&o, n, wd, self.w(&ll.wo), wd);
            add_assign(&mut hs, &proj);

            // Cross-attention to the prompt.
            let (xhat2, rms2, a2) = rms_norm(&hs, self.w(&ll.norm2));
            let cq = matmul(&a2, n, wd, self.w(&ll.cq), wd);
            let kc = matmul(&e, l, e_dim, self.w(&ll.ck), wd);
            let vc = matmul(&e, l, e_dim, self.w(&ll.cv), wd);
            let mut ca = matmul_nt(&cq, n, wd, &kc, l);
            ca.iter_mut().for_each(|v| *v *= inv_sqrt_w);
            softmax_rows(&mut ca, l);
            if let Some(ctrl) = control {
                let computed = AttnMatrix::new(n, l, ca.iter().map(|v| v.to_f64() as f32).collect())?;
                let used = ctrl.control(li, &computed)?;
                if used.shape() != (n, l) {
                    return Err(Error::OverrideShape {
                        layer: li,
                        expected: format!("{:?}", (n, l)),
                        actual: format!("{:?}", used.shape()),
                    });
                }
                if used != computed {
                    ca = used.data().iter().map(|&v| T::from_f64(v as f64)).collect();
                }
            }
            let oc = matmul(&ca, n, l, &vc, wd);
            let proj = matmul(&oc, n, wd, self.w(&ll.co), wd);
            add_assign(&mut hs, &proj);
            maps.push(ca.clone());

            // MLP.
            let (xhat3, rms3, a3) = rms_norm(&hs, self.w(&ll.norm3));
            let mut u = matmul(&a3, n, wd, self.w(&ll.w1), hid);
            add_row(&mut u, self.w(&ll.b1));
            let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
            let mut proj = matmul(&g, n, hid, self.w(&ll.w2), wd);
            add_row(&mut proj, self.w(&ll.b2));
            add_assign(&mut hs, &proj);

            if keep_tape {
                tapes.push(LayerTape {
                    xhat1,
                    rms1,
                    a1,
                    q,
                    k,
                    v,
                    att,
                    o,
                    xhat2,
                    rms2,
                    a2,
                    cq,
                    kc,
                    vc,
                    ca,
                    oc,
                    xhat3,
                    rms3,
                    a3,
                    u,
                    g,
                });
            }
        }

        let (xhat_f, rms_f, af) = rms_norm(&hs, self.w(&self.lay.norm_f));
        let mut logits = matmul(&af, n, wd, self.w(&self.lay.w_out), d);
        add_row(&mut logits, self.w(&self.lay.b_out));
        gemm(
            View::rm(x, n, d, d),
            View::rm(self.w(&self.lay.w_skip), d, d, d),
            T::one(),
            &mut logits,
            d,
        );
        let tape = keep_tape.then(|| Tape {
            n,
            l,
            x: x.to_vec(),
            pf,
            e,
            layers: tapes,
            xhat_f,
            rms_f,
            af,
        });
        Ok(Forward { logits, maps, tape })
    }

    /// Accumulates parameter gradients for `dlogits` into `grad`.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[T], grad: &mut [T]) -> InputGrads<T> {
        let c = self.cfg;
        let lay = self.lay;
        let (n, l, d, wd, hid) = (tape.n, tape.l, c.feature_dim, c.width, c.hidden);
        let (heads, dh, e_dim) = (c.heads, c.width / c.heads, c.embed_dim);
        let inv_sqrt_dh = T::from_f64(1.0 / (dh as f64).sqrt());
        let inv_sqrt_w = T::from_f64(1.0 / (wd as f64).sqrt());

        // Output head and skip.
        let mut dx = matmul_nt(dlogits, n, d, self.w(&lay.w_skip), d);
        matmul_tn_acc(&tape.x, n, d, dlogits, d, &mut grad[lay.w_skip.clone()]);
        matmul_tn_acc(&tape.af, n, wd, dlogits, d, &mut grad[lay.w_out.clone()]);
        col_sum_acc(dlogits, &mut grad[lay.b_out.clone()]);
        let daf = matmul_nt(dlogits, n, d, self.w(&lay.w_out), wd);
        let mut dh_res = vec![T::zero(); n * wd];
        rms_norm_backward(
            &tape.xhat_f,
            &tape.rms_f,
            self.w(&lay.norm_f),
            &daf,
            &mut dh_res,
            &mut grad[lay.norm_f.clone()],
        );

        let mut de = vec![T::zero(); l * e_dim];
        for (ll, t) in lay.layers.iter().zip(&tape.layers).rev() {
            // MLP.
            matmul_tn_acc(&t.g, n, hid, &dh_res, wd, &mut grad[ll.w2.clone()]);
            col_sum_acc(&dh_res, &mut grad[ll.b2.clone()]);
            let mut du = matmul_nt(&dh_res, n, wd, self.w(&ll.w2), hid);
            for (g, &u) in du.iter_mut().zip(&t.u) {
                *g *= gelu_grad(u);
            }
            matmul_tn_acc(&t.a3, n, wd, &du, hid, &mut grad[ll.w1.clone()]);
            col_sum_acc(&du, &mut grad[ll.b1.clone()]);
            let da3 = matmul_nt(&du, n, hid, self.w(&ll.w1), wd);
            rms_norm_backward(&t.xhat3, &t.rms3, self.w(&ll.norm3), &da3, &mut dh_res, &mut grad[ll.norm3.clone()]);

            // Cross-attention.
            matmul_tn_acc(&t.oc, n, wd, &dh_res, wd, &mut grad[ll.co.clone()]);
            let doc = matmul_nt(&dh_res, n, wd, self.w(&ll.co), wd);
            let mut dca = matmul_nt(&doc, n, wd, &t.vc, l);
            let mut dvc = vec![T::zero(); l * wd];
            matmul_tn_acc(&t.ca, n, l, &doc, wd, &mut dvc);
            softmax_rows_backward(&t.ca, &mut dca, l);
            dca.iter_mut().for_each(|v| *v *= inv_sqrt_w);
            let dcq = matmul(&dca, n, l, &t.kc, wd);
            let mut dkc = vec![T::zero(); l * wd];
            matmul_tn_acc(&dca, n, l, &t.cq, wd, &mut dkc);
            matmul_tn_acc(&t.a2, n, wd, &dcq, wd, &mut grad[ll.cq.clone()]);
            matmul_tn_acc(&tape.e, l, e_dim, &dkc, wd, &mut grad[ll.ck.clone()]);
            matmul_tn_acc(&tape.e, l, e_dim, &dvc, wd, &mut grad[ll.cv.clone()]);
            matmul_nt_acc(&dkc, l, wd, self.w(&ll.ck), e_dim, &mut de);
            matmul_nt_acc(&dvc, l, wd, self.w(&ll.cv), e_dim, &mut de);
            let da2 = matmul_nt(&dcq, n, wd, self.w(&ll.cq), wd);
            rms_norm_backward(&t.xhat2, &t.rms2, self.w(&ll.norm2), &da2, &mut dh_res, &mut grad[ll.norm2.clone()]);

            // Self-attention.
            matmul_tn_acc(&t.o, n, wd, &dh_res, wd, &mut grad[ll.wo.clone()]);
            let d_o = matmul_nt(&dh_res, n, wd, self.w(&ll.wo), wd);
            let mut dq = vec![T::zero(); n * wd];
            let mut dk = vec![T::zero(); n * wd];
            let mut dv = vec![T::zero(); n * wd];
            let mut ds = vec![T::zero(); n * n];
            for hd in 0..heads {
                let off = hd * dh;
                let a = &t.att[hd * n * n..(hd + 1) * n * n];
                // dA = dO_h · V_hᵀ
                gemm(View::rm(&d_o[off..], n, dh, wd), View::tr(&t.v[off..], dh, n, wd), T::zero(), &mut ds, n);
                // dV_h = Aᵀ · dO_h
                gemm(View::tr(a, n, n, n), View::rm(&d_o[off..], n, dh, wd), T::zero(), &mut dv[off..], wd);
                softmax_rows_backward(a, &mut ds, n);
                ds.iter_mut().for_each(|v| *v *= inv_sqrt_dh);
                // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
                gemm(View::rm(&ds, n, n, n), View::rm(&t.k[off..], n, dh, wd), T::zero(), &mut dq[off..], wd);
                gemm(View::tr(&ds, n, n, n), View::rm(&t.q[off..], n, dh, wd), T::zero(), &mut dk[off..], wd);
            }
            matmul_tn_acc(&t.a1, n, wd, &dq, wd, &mut grad[ll.wq.clone()]);
            matmul_tn_acc(&t.a1, n, wd, &dk, wd, &mut grad[ll.wk.clone()]);
            matmul_tn_acc(&t.a1, n, wd, &dv, wd, &mut grad[ll.wv.clone()]);
            let mut da1 = matmul_nt(&dq, n, wd, self.w(&ll.wq), wd);
            matmul_nt_acc(&dk, n, wd, self.w(&ll.wk), wd, &mut da1);
            matmul_nt_acc(&dv, n, wd, self.w(&ll.wv), wd, &mut da1);
            rms_norm_backward(&t.xhat1, &t.rms1, self.w(&ll.norm1), &da1, &mut dh_res, &mut grad[ll.norm1.clone()]);
        }

        // Input embedding.
        matmul_tn_acc(&tape.x, n, d, &dh_res, wd, &mut grad[lay.w_in.clone()]);
        col_sum_acc(&dh_res, &mut grad[lay.b_in.clone()]);
        matmul_tn_acc(&tape.pf, n, POS_FEATURES, &dh_res, wd, &mut grad[lay.w_pos.clone()]);
        matmul_nt_acc(&dh_res, n, wd, self.w(&lay.w_in), d, &mut dx);

        // E = token rows + learned positions; only the positions are parameters.
        add_assign(&mut grad[lay.prompt_pos.start..lay.prompt_pos.start + l * e_dim], &de);
        InputGrads { dx }
    }

    /// Accumulates the gradient of the start input into the SOS projection.
    pub fn sos_backward(&self, prompt: &PromptEmbedding, dsos: &[T], grad: &mut [T]) {
        let e = self.cfg.embed_dim;
        let mean: Vec<T> = prompt.mean_vector().iter().map(|&v| T::from_f64(v as f64)).collect();
        matmul_tn_acc(&mean, 1, e, dsos, self.cfg.feature_dim, &mut grad[self.lay.w_sos.clone()]);
        add_assign(&mut grad[self.lay.b_sos.clone()], dsos);
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Predictor for TransformerModel {
    fn predict(
        &self,
        input: &FeatureMap,
        prompt: &PromptEmbedding,
        control: Option<&dyn AttentionControl>,
    ) -> Result<Prediction> {
        check_input(input, self.cfg.feature_dim)?;
        self.check_prompt(prompt)?;
        let net = self.net::<f32>(&self.params);
        let fwd = net.forward(input.data(), input.height(), input.width(), prompt, control, false)?;
        let p_plus = fwd.logits.iter().map(|&z| sigmoid(z as f64) as f32).collect();
        let n = input.positions();
        let layers = fwd
            .maps
            .into_iter()
            .map(|m| AttnMatrix::new(n, prompt.len(), m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction {
            probs: ProbGrid::new(input.height(), input.width(), self.cfg.feature_dim, p_plus)?,
            attention: AttentionMaps { layers },
        })
    }

    fn make_sos(&self, prompt: &PromptEmbedding) -> FeatureMap {
        let sos = self.net::<f32>(&self.params).sos(prompt);
        FeatureMap::from_vec(1, 1, self.cfg.feature_dim, sos).expect("sos shape")
    }

    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn attention_layers(&self) -> usize {
        self.cfg.layers
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([Backend::Transformer as u8]);
        h.update(self.cfg.to_bytes());
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize().into()
    }
}

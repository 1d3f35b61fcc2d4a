//! Pre-norm causal attention policy: parameters, forward pass with an
//! optional recalibration hook, and exact backpropagation.

use serde::{Deserialize, Serialize};

use super::tokenize::{Token, TokenizedInput};
use crate::error::{Error, Result};
use crate::metrics::{head_average, ivar_mean};
use crate::recal::{igar_layer, AttentionTensor, RecalConfig, RowBudget, SelectionSet};
use crate::sink::{Modality, ModalityMap, SinkDetectConfig, SinkReport};
use crate::tensor::{matmul, matmul_at, matmul_bt, randn, softmax_rows, Matrix, Rng};

pub const NORM_EPS: f64 = 1e-5;

/// Architecture header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub vocab: usize,
    pub actions: usize,
    pub max_seq: usize,
    /// Label BOS as a text token instead of `Other`.
    pub bos_as_text: bool,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidInput(format!("d={} is not divisible into {} heads", self.d, self.heads)));
        }
        if self.actions < 2 || self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::InvalidInput(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: Vec<f64>,
    /// d × 2d
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// 2d × d
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Block {
    fn zeros(d: usize) -> Self {
        Self {
            norm1: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            norm2: vec![1.0; d],
            w1: Matrix::zeros(d, 2 * d),
            b1: vec![0.0; 2 * d],
            w2: Matrix::zeros(2 * d, d),
            b2: vec![0.0; d],
        }
    }
}

/// Complete policy parameters. The parameter order of [`PolicySpec::params`]
/// is the on-disk order: embed, sal, pos, then per block norm1, wq, wk, wv,
/// wo, norm2, w1, b1, w2, b2, then norm_f, unembed, unembed_b.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub arch: Arch,
    /// vocab × d feature embeddings.
    pub embed: Matrix,
    /// Saliency direction.
    pub sal: Vec<f64>,
    /// max_seq × d positional embeddings.
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub norm_f: Vec<f64>,
    /// d × actions
    pub unembed: Matrix,
    pub unembed_b: Vec<f64>,
}

impl PolicySpec {
    /// All weights zero, all norm gains one.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let d = arch.d;
        Ok(Self {
            arch,
            embed: Matrix::zeros(arch.vocab, d),
            sal: vec![0.0; d],
            pos: Matrix::zeros(arch.max_seq, d),
            blocks: (0..arch.layers).map(|_| Block::zeros(d)).collect(),
            norm_f: vec![1.0; d],
            unembed: Matrix::zeros(d, arch.actions),
            unembed_b: vec![0.0; arch.actions],
        })
    }

    /// Gaussian initialisation scaled by fan-in; gains start at one.
    pub fn random(arch: Arch, rng: &mut Rng) -> Result<Self> {
        let mut s = Self::zeros(arch)?;
        let d = arch.d;
        let w = 1.0 / (d as f64).sqrt();
        s.embed = randn(arch.vocab, d, 1.0, rng);
        s.sal = randn(1, d, 1.0, rng).into_data();
        s.pos = randn(arch.max_seq, d, 0.5, rng);
        for b in &mut s.blocks {
            b.wq = randn(d, d, w, rng);
            b.wk = randn(d, d, w, rng);
            b.wv = randn(d, d, w, rng);
            b.wo = randn(d, d, w, rng);
            b.w1 = randn(d, 2 * d, w, rng);
            b.w2 = randn(2 * d, d, w / 2f64.sqrt(), rng);
        }
        s.unembed = randn(d, arch.actions, w, rng);
        Ok(s)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.embed.data(), &self.sal, self.pos.data()];
        for b in &self.blocks {
            v.extend([
                &b.norm1[..],
                b.wq.data(),
                b.wk.data(),
                b.wv.data(),
                b.wo.data(),
                &b.norm2[..],
                b.w1.data(),
                &b.b1[..],
                b.w2.data(),
                &b.b2[..],
            ]);
        }
        v.extend([&self.norm_f[..], self.unembed.data(), &self.unembed_b[..]]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.embed.data_mut(), &mut self.sal, self.pos.data_mut()];
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1[..],
                b.wq.data_mut(),
                b.wk.data_mut(),
                b.wv.data_mut(),
                b.wo.data_mut(),
                &mut b.norm2[..],
                b.w1.data_mut(),
                &mut b.b1[..],
                b.w2.data_mut(),
                &mut b.b2[..],
            ]);
        }
        v.extend([&mut self.norm_f[..], self.unembed.data_mut(), &mut self.unembed_b[..]]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Modality labels the policy uses for an input.
    pub fn modality(&self, input: &TokenizedInput) -> ModalityMap {
        let mut m = input.modality.clone();
        if self.arch.bos_as_text && !m.is_empty() && m.label(0) == Modality::Other {
            m.relabel(0, Modality::Text);
        }
        m
    }
}

/// Recalibration applied inside the forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub sink: SinkDetectConfig,
    pub recal: RecalConfig,
}

impl Intervention {
    /// Number of layers actually intervened on for a policy of `layers`.
    pub fn effective_layers(&self, layers: usize) -> usize {
        self.recal.layers.min(layers)
    }
}

/// Diagnostics of one intervened layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub sinks: SinkReport,
    pub selection: SelectionSet,
    pub budgets: Vec<RowBudget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Residual stream entering each layer.
    pub hidden: Vec<Matrix>,
    pub final_hidden: Matrix,
    pub attn_pre: Vec<AttentionTensor>,
    pub attn_post: Vec<AttentionTensor>,
    pub reports: Vec<Option<LayerReport>>,
    pub modality: ModalityMap,
    pub logits: Vec<f64>,
    /// Argmax of the logits, lowest index on ties.
    pub action: usize,
}

impl ForwardTrace {
    /// Mean IVAR of the final layer's (post-intervention) head-averaged
    /// attention over the action-query positions.
    pub fn ivar(&self) -> Result<f64> {
        let last = self.attn_post.last().ok_or_else(|| Error::Undefined("policy has no layers".into()))?;
        ivar_mean(&head_average(last), &self.modality.action_queries(), &self.modality)
    }
}

struct LayerCache {
    x_in: Matrix,
    r1: Vec<f64>,
    u1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn_pre: AttentionTensor,
    attn_post: AttentionTensor,
    report: Option<LayerReport>,
    ctx: Matrix,
    x_mid: Matrix,
    r2: Vec<f64>,
    u2: Matrix,
    a1: Matrix,
    g1: Matrix,
}

struct Cache {
    layers: Vec<LayerCache>,
    x_final: Matrix,
    rf: f64,
    z: Vec<f64>,
    logits: Vec<f64>,
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + NORM_EPS).sqrt()
}

fn rms_norm(x: &Matrix, gain: &[f64]) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut rs = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = rms(x.row(i));
        for ((o, v), g) in out.row_mut(i).iter_mut().zip(x.row(i)).zip(gain) {
            *o = g * v / r;
        }
        rs.push(r);
    }
    (out, rs)
}

/// Gradient of `y = g ⊙ x / rms(x)` for one row; accumulates into `dx` and
/// `dg`.
fn rms_norm_back(x: &[f64], gain: &[f64], r: f64, dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    let n = x.len() as f64;
    let mut s = 0.0;
    for j in 0..x.len() {
        dg[j] += dy[j] * x[j] / r;
        s += gain[j] * dy[j] * x[j];
    }
    let c = s / (n * r * r * r);
    for j in 0..x.len() {
        dx[j] += gain[j] * dy[j] / r - x[j] * c;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for i in 0..m.rows() {
        for (v, bb) in m.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn embed(spec: &PolicySpec, tokens: &[Token]) -> Result<Matrix> {
    let a = &spec.arch;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > a.max_seq {
        return Err(Error::InvalidInput(format!("{} tokens exceed max sequence length {}", tokens.len(), a.max_seq)));
    }
    let mut x = Matrix::zeros(tokens.len(), a.d);
    for (i, t) in tokens.iter().enumerate() {
        if !t.saliency.is_finite() {
            return Err(Error::InvalidInput(format!("token {i} has non-finite saliency")));
        }
        let row = x.row_mut(i);
        for &f in &t.features {
            if f >= a.vocab {
                return Err(Error::InvalidInput(format!("feature id {f} outside vocabulary of {}", a.vocab)));
            }
            for (o, e) in row.iter_mut().zip(spec.embed.row(f)) {
                *o += e;
            }
        }
        for (o, (s, p)) in row.iter_mut().zip(spec.sal.iter().zip(spec.pos.row(i))) {
            *o += t.saliency * s + p;
        }
    }
    Ok(x)
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

fn attention(q: &Matrix, k: &Matrix, heads: usize, mask: &[bool]) -> Result<AttentionTensor> {
    let n = q.rows();
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..=i {
                let kj = &k.row(j)[cols.clone()];
                s.set(i, j, qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
            }
        }
        out.push(softmax_rows(&s, Some(mask))?);
    }
    Ok(AttentionTensor::from_softmax(out))
}

fn run(spec: &PolicySpec, tokens: &[Token], modality: &ModalityMap, intervention: Option<&Intervention>) -> Result<Cache> {
    let arch = &spec.arch;
    if modality.len() != tokens.len() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} tokens", modality.len(), tokens.len())));
    }
    let n = tokens.len();
    let dh = arch.d_head();
    let mask = causal_mask(n);
    let active = intervention.map_or(0, |iv| iv.effective_layers(arch.layers));

    let mut x = embed(spec, tokens)?;
    let mut layers = Vec::with_capacity(arch.layers);
    for (l, b) in spec.blocks.iter().enumerate() {
        let x_in = x;
        let (u1, r1) = rms_norm(&x_in, &b.norm1);
        let q = matmul(&u1, &b.wq)?;
        let k = matmul(&u1, &b.wk)?;
        let v = matmul(&u1, &b.wv)?;
        let attn_pre = attention(&q, &k, arch.heads, &mask)?;
        let (attn_post, report) = match intervention {
            Some(iv) if l < active => {
                let li = igar_layer(&attn_pre, &x_in, modality, &iv.sink, &iv.recal)?;
                let rep = LayerReport { sinks: li.sinks, selection: li.selection, budgets: li.budgets };
                (li.attention, Some(rep))
            }
            _ => (attn_pre.clone(), None),
        };
        let mut ctx = Matrix::zeros(n, arch.d);
        for h in 0..arch.heads {
            let a = attn_post.head(h);
            for i in 0..n {
                for j in 0..=i {
                    let w = a.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[h * dh..(h + 1) * dh];
                    for (c, vv) in ctx.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
            }
        }
        let mut x_mid = x_in.clone();
        x_mid.add_assign(&matmul(&ctx, &b.wo)?)?;
        let (u2, r2) = rms_norm(&x_mid, &b.norm2);
        let mut a1 = matmul(&u2, &b.w1)?;
        add_bias(&mut a1, &b.b1);
        let mut g1 = a1.clone();
        for v in g1.data_mut() {
            *v = gelu(*v);
        }
        let mut f = matmul(&g1, &b.w2)?;
        add_bias(&mut f, &b.b2);
        x = x_mid.clone();
        x.add_assign(&f)?;
        layers.push(LayerCache { x_in, r1, u1, q, k, v, attn_pre, attn_post, report, ctx, x_mid, r2, u2, a1, g1 });
    }

    let last = x.row(n - 1);
    let rf = rms(last);
    let z: Vec<f64> = last.iter().zip(&spec.norm_f).map(|(v, g)| g * v / rf).collect();
    let mut logits = spec.unembed_b.clone();
    for (zi, row) in z.iter().zip(0..arch.d) {
        if *zi == 0.0 {
            continue;
        }
        for (o, w) in logits.iter_mut().zip(spec.unembed.row(row)) {
            *o += zi * w;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    Ok(Cache { layers, x_final: x, rf, z, logits })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the policy. With an intervention, layers `0..min(L, layers)` have
/// their attention replaced by the recalibrated attention before values are
/// aggregated.
pub fn forward(
    spec: &PolicySpec,
    tokens: &[Token],
    modality: &ModalityMap,
    intervention: Option<&Intervention>,
) -> Result<ForwardTrace> {
    let c = run(spec, tokens, modality, intervention)?;
    let mut hidden = Vec::with_capacity(c.layers.len());
    let mut attn_pre = Vec::with_capacity(c.layers.len());
    let mut attn_post = Vec::with_capacity(c.layers.len());
    let mut reports = Vec::with_capacity(c.layers.len());
    for l in c.layers {
        hidden.push(l.x_in);
        attn_pre.push(l.attn_pre);
        attn_post.push(l.attn_post);
        reports.push(l.report);
    }
    Ok(ForwardTrace {
        hidden,
        final_hidden: c.x_final,
        attn_pre,
        attn_post,
        reports,
        modality: modality.clone(),
        action: argmax(&c.logits),
        logits: c.logits,
    })
}

/// Cross-entropy of `target` under softmax(logits).
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Loss and full parameter gradient for one example (no intervention).
/// The gradient has the shape of a `PolicySpec`.
pub fn loss_and_grad(spec: &PolicySpec, tokens: &[Token], target: usize) -> Result<(f64, PolicySpec)> {
    let arch = spec.arch;
    if target >= arch.actions {
        return Err(Error::InvalidInput(format!("target action {target} outside {} actions", arch.actions)));
    }
    let modality = ModalityMap::new(vec![Modality::Other; tokens.len()]);
    let c = run(spec, tokens, &modality, None)?;
    let n = tokens.len();
    let d = arch.d;
    let dh = arch.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = PolicySpec::zeros(arch)?;
    for gain in g.params_mut() {
        gain.fill(0.0);
    }

    let loss = cross_entropy(&c.logits, target);
    let m = c.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = c.logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    let mut dlogits: Vec<f64> = e.iter().map(|v| v / sum).collect();
    dlogits[target] -= 1.0;

    // head
    let mut dz = vec![0.0; d];
    for i in 0..d {
        let row = spec.unembed.row(i);
        let grow = g.unembed.row_mut(i);
        for a in 0..arch.actions {
            grow[a] += c.z[i] * dlogits[a];
            dz[i] += row[a] * dlogits[a];
        }
    }
    for (gb, dl) in g.unembed_b.iter_mut().zip(&dlogits) {
        *gb += dl;
    }
    let mut dx = Matrix::zeros(n, d);
    rms_norm_back(c.x_final.row(n - 1), &spec.norm_f, c.rf, &dz, dx.row_mut(n - 1), &mut g.norm_f);

    for (l, lc) in c.layers.iter().enumerate().rev() {
        let b = &spec.blocks[l];
        let gb = &mut g.blocks[l];

        // feed-forward
        let df = &dx;
        let dw2 = matmul_at(&lc.g1, df)?;
        gb.w2.add_assign(&dw2)?;
        for i in 0..n {
            for (acc, v) in gb.b2.iter_mut().zip(df.row(i)) {
                *acc += v;
            }
        }
        let mut da1 = matmul_bt(df, &b.w2)?;
        for (v, a) in da1.data_mut().iter_mut().zip(lc.a1.data()) {
            *v *= gelu_grad(*a);
        }
        gb.w1.add_assign(&matmul_at(&lc.u2, &da1)?)?;
        for i in 0..n {
            for (acc, v) in gb.b1.iter_mut().zip(da1.row(i)) {
                *acc += v;
            }
        }
        let du2 = matmul_bt(&da1, &b.w1)?;
        let mut dx_mid = dx.clone();
        for i in 0..n {
            rms_norm_back(lc.x_mid.row(i), &b.norm2, lc.r2[i], du2.row(i), dx_mid.row_mut(i), &mut gb.norm2);
        }

        // attention
        gb.wo.add_assign(&matmul_at(&lc.ctx, &dx_mid)?)?;
        let dctx = matmul_bt(&dx_mid, &b.wo)?;
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..arch.heads {
            let cols = h * dh..(h + 1) * dh;
            let a = lc.attn_post.head(h);
            for i in 0..n {
                let dci = &dctx.row(i)[cols.clone()];
                let mut da = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &lc.v.row(j)[cols.clone()];
                    da[j] = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let w = a.get(i, j);
                    for (acc, x) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                        *acc += w * x;
                    }
                }
                let rowdot: f64 = (0..=i).map(|j| da[j] * a.get(i, j)).sum();
                for j in 0..=i {
                    let ds = a.get(i, j) * (da[j] - rowdot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        let qv = lc.q.get(i, c);
                        let kv = lc.k.get(j, c);
                        dq.row_mut(i)[c] += ds * kv;
                        dk.row_mut(j)[c] += ds * qv;
                    }
                }
            }
        }
        gb.wq.add_assign(&matmul_at(&lc.u1, &dq)?)?;
        gb.wk.add_assign(&matmul_at(&lc.u1, &dk)?)?;
        gb.wv.add_assign(&matmul_at(&lc.u1, &dv)?)?;
        let mut du1 = matmul_bt(&dq, &b.wq)?;
        du1.add_assign(&matmul_bt(&dk, &b.wk)?)?;
        du1.add_assign(&matmul_bt(&dv, &b.wv)?)?;
        let mut dx_in = dx_mid;
        for i in 0..n {
            rms_norm_back(lc.x_in.row(i), &b.norm1, lc.r1[i], du1.row(i), dx_in.row_mut(i), &mut gb.norm1);
        }
        dx = dx_in;
    }

    for (i, t) in tokens.iter().enumerate() {
        let dxi = dx.row(i).to_vec();
        for &f in &t.features {
            for (acc, v) in g.embed.row_mut(f).iter_mut().zip(&dxi) {
                *acc += v;
            }
        }
        for (acc, v) in g.sal.iter_mut().zip(&dxi) {
            *acc += t.saliency * v;
        }
        for (acc, v) in g.pos.row_mut(i).iter_mut().zip(&dxi) {
            *acc += v;
        }
    }
    Ok((loss, g))
}

/// Relative error with a floor on the denominator, so that gradients near
/// zero are compared absolutely.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst `grad_rel_err` of the analytic gradient against central finite
/// differences with step `h`, over every parameter.
pub fn gradient_check(spec: &PolicySpec, tokens: &[Token], target: usize, h: f64) -> Result<f64> {
    let (_, g) = loss_and_grad(spec, tokens, target)?;
    let mut probe = spec.clone();
    let mut worst: f64 = 0.0;
    for (pi, block) in g.params().iter().enumerate() {
        for (j, &a) in block.iter().enumerate() {
            let w = probe.params()[pi][j];
            probe.params_mut()[pi][j] = w + h;
            let lp = loss_and_grad(&probe, tokens, target)?.0;
            probe.params_mut()[pi][j] = w - h;
            let lm = loss_and_grad(&probe, tokens, target)?.0;
            probe.params_mut()[pi][j] = w;
            worst = worst.max(grad_rel_err(a, (lp - lm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

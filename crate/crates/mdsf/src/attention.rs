//! Multi-scale dilated attention: channel groups attend over a 3×3
//! neighborhood sampled at pixel spacing d, giving branch d an effective
//! receptive field of (2d+1)×(2d+1). Keys and values outside the image are
//! zero, so border positions see zero-score padding slots.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Bound, ParamId, ParamSet, Tensor};

/// The 9 neighborhood offsets in row-major (δy, δx) order.
pub const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone)]
pub struct MsdaConfig {
    /// Branch count; channels split into n_d groups of C/n_d.
    pub n_d: usize,
    /// One dilation per branch, strictly increasing, all ≥ 1.
    pub dilations: Vec<usize>,
    pub channels: usize,
}

impl MsdaConfig {
    pub fn new(channels: usize, dilations: &[usize]) -> Result<Self> {
        let n_d = dilations.len();
        if n_d == 0 {
            return Err(Error::Config("msda needs at least one branch".into()));
        }
        if channels % n_d != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by branch count {n_d}"
            )));
        }
        if dilations[0] < 1 || dilations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "dilations must be strictly increasing and >= 1, got {dilations:?}"
            )));
        }
        Ok(MsdaConfig {
            n_d,
            dilations: dilations.to_vec(),
            channels,
        })
    }

    /// Three branches at dilations 1, 2, 3.
    pub fn default_for(channels: usize) -> Result<Self> {
        MsdaConfig::new(channels, &[1, 2, 3])
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.n_d
    }
}

/// Softmax attention of each position over its 9 dilated neighbors.
/// q, k, v: `[Ch, H, W]`; zero padding outside bounds.
pub fn dilated_attention_branch(q: &Tensor, k: &Tensor, v: &Tensor, d: usize) -> Result<Tensor> {
    if d < 1 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    let (ch, h, w) = match q.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(dim_err("dilated_attention", other, &[])),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(dim_err("dilated_attention", q.shape(), k.shape()));
    }
    let scale = 1.0 / (ch as f64).sqrt();
    let mut scores = Vec::with_capacity(9);
    let mut shifted_v = Vec::with_capacity(9);
    for (dy, dx) in OFFSETS {
        let k_o = k.shift2d(dy * d as isize, dx * d as isize);
        let s_o = q.mul(&k_o).sum_channels().scale(scale);
        scores.push(s_o.reshape(&[1, h, w])?);
        shifted_v.push(v.shift2d(dy * d as isize, dx * d as isize));
    }
    let score_refs: Vec<&Tensor> = scores.iter().collect();
    let attn = Tensor::concat(&score_refs, 0)?.softmax(0)?;
    let mut out: Option<Tensor> = None;
    for (o, v_o) in shifted_v.iter().enumerate() {
        let a_o = attn.slice(0, o, 1)?.reshape(&[h, w])?;
        let term = v_o.mul_spatial(&a_o);
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(&term),
        });
    }
    Ok(out.expect("nine offsets"))
}

/// MSDA block: pointwise Q/K/V projections, channel-group split, one dilated
/// attention branch per group. Branch outputs are returned separately for the
/// downstream per-branch fusion.
pub struct Msda {
    pub cfg: MsdaConfig,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

impl Msda {
    pub fn new(prefix: &str, cfg: MsdaConfig, set: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let w_q = set.uniform(&format!("{prefix}.w_q"), &[c, c], c, rng);
        let w_k = set.uniform(&format!("{prefix}.w_k"), &[c, c], c, rng);
        let w_v = set.uniform(&format!("{prefix}.w_v"), &[c, c], c, rng);
        Msda { cfg, w_q, w_k, w_v }
    }

    /// 1×1 projection: `[C,H,W]` mapped through `[C,C]` weights.
    fn project(&self, p: &Bound, w: ParamId, x: &Tensor, h: usize, wd: usize) -> Result<Tensor> {
        let flat = x.reshape(&[self.cfg.channels, h * wd])?;
        p[w].matmul(&flat)?.reshape(&[self.cfg.channels, h, wd])
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Vec<Tensor>> {
        let (c, h, w) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(dim_err("msda", other, &[])),
        };
        if c != self.cfg.channels {
            return Err(Error::Config(format!(
                "msda configured for {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let q = self.project(p, self.w_q, x, h, w)?;
        let k = self.project(p, self.w_k, x, h, w)?;
        let v = self.project(p, self.w_v, x, h, w)?;
        let gc = self.cfg.group_channels();
        let sizes = vec![gc; self.cfg.n_d];
        let qs = q.split(0, &sizes)?;
        let ks = k.split(0, &sizes)?;
        let vs = v.split(0, &sizes)?;
        let mut branches = Vec::with_capacity(self.cfg.n_d);
        for (i, &d) in self.cfg.dilations.iter().enumerate() {
            branches.push(dilated_attention_branch(&qs[i], &ks[i], &vs[i], d)?);
        }
        Ok(branches)
    }
}

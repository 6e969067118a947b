//! Pyramid structural blocks: the dual-branch hybrid block, contrast / edge /
//! multi-scale enhancement, and the bidirectional feature pyramid producing
//! {N3, N4, N5} at strides {8, 16, 32}.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::ssm::MambaMixer;
use crate::tensor::{Bound, ParamId, ParamSet, Tensor};

/// SE reduction ratio inside the contrast block.
pub const SE_REDUCTION: usize = 4;

/// Three feature maps with halving spatial sizes and a common channel count.
#[derive(Clone)]
pub struct PyramidSet {
    levels: [Tensor; 3],
}

impl PyramidSet {
    pub fn new(n3: Tensor, n4: Tensor, n5: Tensor) -> Result<Self> {
        let shapes: Vec<&[usize]> = vec![n3.shape(), n4.shape(), n5.shape()];
        for s in &shapes {
            if s.len() != 3 {
                return Err(dim_err("pyramid_set", s, &[]));
            }
        }
        for i in 0..2 {
            if shapes[i][1] != 2 * shapes[i + 1][1] || shapes[i][2] != 2 * shapes[i + 1][2] {
                return Err(Error::Config(format!(
                    "pyramid levels must halve spatially: {:?} vs {:?}",
                    shapes[i],
                    shapes[i + 1]
                )));
            }
            if shapes[i][0] != shapes[i + 1][0] {
                return Err(Error::Config(format!(
                    "pyramid levels must share channels: {:?} vs {:?}",
                    shapes[i],
                    shapes[i + 1]
                )));
            }
        }
        Ok(PyramidSet {
            levels: [n3, n4, n5],
        })
    }

    /// Level by pyramid index 3, 4 or 5.
    pub fn level(&self, idx: usize) -> &Tensor {
        &self.levels[idx - 3]
    }

    pub fn levels(&self) -> &[Tensor; 3] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

fn conv1x1(p: &Bound, w: ParamId, b: Option<ParamId>, x: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let flat = x.reshape(&[c, h * wd])?;
    let mut out = p[w].matmul(&flat)?;
    let c_out = out.shape()[0];
    if let Some(b) = b {
        out = out.add_channel(&p[b]);
    }
    out.reshape(&[c_out, h, wd])
}

/// Dual-branch block: parallel 3×3 and 5×5 depthwise convolutions (each with
/// pointwise mixing) beside a selective-scan mixer, merged through learnable
/// residual weights w_l and w_g.
pub struct HybridBlock {
    pub channels: usize,
    dw3: ParamId,
    pw3: ParamId,
    pb3: ParamId,
    dw5: ParamId,
    pw5: ParamId,
    pb5: ParamId,
    pub mixer: MambaMixer,
    pub w_local: ParamId,
    pub w_global: ParamId,
}

impl HybridBlock {
    pub fn new(
        prefix: &str,
        channels: usize,
        state_size: usize,
        set: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let dw3 = set.uniform(&format!("{prefix}.dw3"), &[channels, 3, 3], 9, rng);
        let pw3 = set.uniform(&format!("{prefix}.pw3"), &[channels, channels], channels, rng);
        let pb3 = set.zeros(&format!("{prefix}.pb3"), &[channels]);
        let dw5 = set.uniform(&format!("{prefix}.dw5"), &[channels, 5, 5], 25, rng);
        let pw5 = set.uniform(&format!("{prefix}.pw5"), &[channels, channels], channels, rng);
        let pb5 = set.zeros(&format!("{prefix}.pb5"), &[channels]);
        let mixer = MambaMixer::new(&format!("{prefix}.mixer"), channels, state_size, set, rng);
        let w_local = set.full(&format!("{prefix}.w_local"), &[], 0.5);
        let w_global = set.full(&format!("{prefix}.w_global"), &[], 0.5);
        HybridBlock {
            channels,
            dw3,
            pw3,
            pb3,
            dw5,
            pw5,
            pb5,
            mixer,
            w_local,
            w_global,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let local3 = conv1x1(p, self.pw3, Some(self.pb3), &x.depthwise_conv2d(&p[self.dw3], 1)?)?;
        let local5 = conv1x1(p, self.pw5, Some(self.pb5), &x.depthwise_conv2d(&p[self.dw5], 1)?)?;
        let local = local3.add(&local5);
        let global = self.mixer.forward(p, x)?;
        let blended = local
            .mul_scalar(&p[self.w_local])
            .add(&global.mul_scalar(&p[self.w_global]));
        Ok(x.add(&blended))
    }
}

/// SE-style channel attention with depthwise spatial refinement: channels are
/// reweighted by a gated MLP over the pooled map, then refined by a 3×3
/// depthwise convolution.
pub struct ContrastEnhance {
    pub channels: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    dw: ParamId,
}

impl ContrastEnhance {
    pub fn new(prefix: &str, channels: usize, set: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        ContrastEnhance {
            channels,
            w1: set.uniform(&format!("{prefix}.w1"), &[channels, hidden], channels, rng),
            b1: set.zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: set.uniform(&format!("{prefix}.w2"), &[hidden, channels], hidden, rng),
            b2: set.zeros(&format!("{prefix}.b2"), &[channels]),
            dw: set.uniform(&format!("{prefix}.dw"), &[channels, 3, 3], 9, rng),
        }
    }

    /// Channel weights sigmoid(MLP(global-avg-pool(x))) as `[C]`.
    pub fn channel_weights(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_spatial().reshape(&[1, self.channels])?;
        let hidden = pooled.matmul(&p[self.w1])?.add_row(&p[self.b1]).silu();
        let raw = hidden.matmul(&p[self.w2])?.add_row(&p[self.b2]);
        raw.sigmoid().reshape(&[self.channels])
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let weights = self.channel_weights(p, x)?;
        x.mul_channel(&weights).depthwise_conv2d(&p[self.dw], 1)
    }
}

/// Two stacked depthwise layers extract high-frequency responses; positions
/// are reweighted by a sigmoid of their aggregate edge magnitude.
pub struct EdgeAttention {
    pub channels: usize,
    dw1: ParamId,
    dw2: ParamId,
    w: ParamId,
    b: ParamId,
}

impl EdgeAttention {
    pub fn new(prefix: &str, channels: usize, set: &mut ParamSet, rng: &mut impl Rng) -> Self {
        EdgeAttention {
            channels,
            dw1: set.uniform(&format!("{prefix}.dw1"), &[channels, 3, 3], 9, rng),
            dw2: set.uniform(&format!("{prefix}.dw2"), &[channels, 3, 3], 9, rng),
            w: set.full(&format!("{prefix}.w"), &[], 1.0),
            b: set.zeros(&format!("{prefix}.b"), &[]),
        }
    }

    /// The spatial gate map m ∈ (0,1), `[H,W]`.
    pub fn gate_map(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let e = x
            .depthwise_conv2d(&p[self.dw1], 1)?
            .silu()
            .depthwise_conv2d(&p[self.dw2], 1)?;
        let magnitude = e.abs().sum_channels();
        Ok(magnitude
            .mul_scalar(&p[self.w])
            .add_scalar(&p[self.b])
            .sigmoid())
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let m = self.gate_map(p, x)?;
        Ok(x.mul_spatial(&m))
    }

    /// Overwrite the two kernels (test hook for fixed high-pass filters).
    pub fn set_kernels(&self, set: &mut ParamSet, k1: Vec<f64>, k2: Vec<f64>) {
        set.set(self.dw1, k1);
        set.set(self.dw2, k2);
    }
}

/// Parallel depthwise convolutions at dilations {1,2,3} plus a pointwise
/// branch, concatenated and projected back to C channels.
pub struct MultiScaleEnhancer {
    pub channels: usize,
    dw: [ParamId; 3],
    pw: ParamId,
    pb: ParamId,
    proj: ParamId,
    proj_b: ParamId,
}

pub const ENHANCER_DILATIONS: [usize; 3] = [1, 2, 3];

impl MultiScaleEnhancer {
    pub fn new(prefix: &str, channels: usize, set: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let dw = [
            set.uniform(&format!("{prefix}.dw_d1"), &[channels, 3, 3], 9, rng),
            set.uniform(&format!("{prefix}.dw_d2"), &[channels, 3, 3], 9, rng),
            set.uniform(&format!("{prefix}.dw_d3"), &[channels, 3, 3], 9, rng),
        ];
        MultiScaleEnhancer {
            channels,
            dw,
            pw: set.uniform(&format!("{prefix}.pw"), &[channels, channels], channels, rng),
            pb: set.zeros(&format!("{prefix}.pb"), &[channels]),
            proj: set.uniform(
                &format!("{prefix}.proj"),
                &[channels, 4 * channels],
                4 * channels,
                rng,
            ),
            proj_b: set.zeros(&format!("{prefix}.proj_b"), &[channels]),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let mut branches = Vec::with_capacity(4);
        for (i, &d) in ENHANCER_DILATIONS.iter().enumerate() {
            branches.push(x.depthwise_conv2d(&p[self.dw[i]], d)?);
        }
        branches.push(conv1x1(p, self.pw, Some(self.pb), x)?);
        let refs: Vec<&Tensor> = branches.iter().collect();
        let stacked = Tensor::concat(&refs, 0)?;
        conv1x1(p, self.proj, Some(self.proj_b), &stacked)
    }

    /// Delta-initialize every kernel (test hook): each depthwise kernel
    /// becomes a centered impulse and the pointwise branch the identity.
    pub fn delta_init(&self, set: &mut ParamSet) {
        let c = self.channels;
        let mut delta = vec![0.0; c * 9];
        for ch in 0..c {
            delta[ch * 9 + 4] = 1.0;
        }
        for id in self.dw {
            set.set(id, delta.clone());
        }
        let mut eye = vec![0.0; c * c];
        for ch in 0..c {
            eye[ch * c + ch] = 1.0;
        }
        set.set(self.pw, eye);
        set.set(self.pb, vec![0.0; c]);
    }
}

/// One enhancement cascade: contrast → edge → multi-scale.
pub struct EnhanceStack {
    pub contrast: ContrastEnhance,
    pub edge: EdgeAttention,
    pub multi_scale: MultiScaleEnhancer,
}

impl EnhanceStack {
    pub fn new(prefix: &str, channels: usize, set: &mut ParamSet, rng: &mut impl Rng) -> Self {
        EnhanceStack {
            contrast: ContrastEnhance::new(&format!("{prefix}.contrast"), channels, set, rng),
            edge: EdgeAttention::new(&format!("{prefix}.edge"), channels, set, rng),
            multi_scale: MultiScaleEnhancer::new(&format!("{prefix}.ms"), channels, set, rng),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let x = self.contrast.forward(p, x)?;
        let x = self.edge.forward(p, &x)?;
        self.multi_scale.forward(p, &x)
    }
}

/// Bidirectional enhanced pyramid: lateral 1×1 projections, per-level
/// enhancement, a top-down upsample-add pathway and a bottom-up
/// stride-2-downsample-add pathway.
pub struct Efpn {
    pub channels: usize,
    laterals: [(ParamId, ParamId); 3],
    enhance: [EnhanceStack; 3],
    down: [(ParamId, ParamId); 2],
}

impl Efpn {
    pub fn new(
        prefix: &str,
        in_channels: [usize; 3],
        channels: usize,
        set: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let mut lat = |set: &mut ParamSet, i: usize, cin: usize| {
            (
                set.uniform(&format!("{prefix}.lat{i}.w"), &[channels, cin], cin, rng),
                set.zeros(&format!("{prefix}.lat{i}.b"), &[channels]),
            )
        };
        let laterals = [
            lat(set, 3, in_channels[0]),
            lat(set, 4, in_channels[1]),
            lat(set, 5, in_channels[2]),
        ];
        let enhance = [
            EnhanceStack::new(&format!("{prefix}.enh3"), channels, set, rng),
            EnhanceStack::new(&format!("{prefix}.enh4"), channels, set, rng),
            EnhanceStack::new(&format!("{prefix}.enh5"), channels, set, rng),
        ];
        // stride-2 depthwise kernels for the bottom-up pathway
        let down = [
            (
                set.uniform(&format!("{prefix}.down4.dw"), &[channels, 3, 3], 9, rng),
                set.uniform(&format!("{prefix}.down4.pw"), &[channels, channels], channels, rng),
            ),
            (
                set.uniform(&format!("{prefix}.down5.dw"), &[channels, 3, 3], 9, rng),
                set.uniform(&format!("{prefix}.down5.pw"), &[channels, channels], channels, rng),
            ),
        ];
        Efpn {
            channels,
            laterals,
            enhance,
            down,
        }
    }

    pub fn forward(&self, p: &Bound, f3: &Tensor, f4: &Tensor, f5: &Tensor) -> Result<PyramidSet> {
        for (hi, lo) in [(f3, f4), (f4, f5)] {
            if hi.shape()[1] != 2 * lo.shape()[1] || hi.shape()[2] != 2 * lo.shape()[2] {
                return Err(Error::Config(format!(
                    "backbone maps must halve spatially: {:?} vs {:?}",
                    hi.shape(),
                    lo.shape()
                )));
            }
        }
        let mut enhanced = Vec::with_capacity(3);
        for (i, f) in [f3, f4, f5].into_iter().enumerate() {
            let (w, b) = self.laterals[i];
            let lateral = conv1x1(p, w, Some(b), f)?;
            enhanced.push(self.enhance[i].forward(p, &lateral)?);
        }
        // top-down: coarse context flows to finer levels
        let p5 = enhanced[2].clone();
        let p4 = enhanced[1].add(&p5.bilinear_resize(enhanced[1].shape()[1], enhanced[1].shape()[2]));
        let p3 = enhanced[0].add(&p4.bilinear_resize(enhanced[0].shape()[1], enhanced[0].shape()[2]));
        // bottom-up: localization flows back down with stride-2 depthwise convs
        let n3 = p3;
        let (dw4, pw4) = self.down[0];
        let n4 = p4.add(&conv1x1(p, pw4, None, &n3.depthwise_conv2d_strided(&p[dw4], 1, 2)?)?);
        let (dw5, pw5) = self.down[1];
        let n5 = p5.add(&conv1x1(p, pw5, None, &n4.depthwise_conv2d_strided(&p[dw5], 1, 2)?)?);
        PyramidSet::new(n3, n4, n5)
    }
}

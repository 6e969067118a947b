//! Cross-scale gated fusion: each dilated-attention branch is rescanned by a
//! selective SSM whose (Δ, B, C) come from spatially aligned features of the
//! neighboring pyramid levels, aggregated through a sigmoid gate and blended
//! back with a learnable scalar. Levels are refined coarsest-first so that
//! information entering at the top level reaches every finer output.

use rand::Rng;

use crate::attention::Msda;
use crate::error::{dim_err, Error, Result};
use crate::pyramid::PyramidSet;
use crate::ssm::{directional_scan_2d_t, SsmParams, ALL_DIRECTIONS};
use crate::tensor::{Bound, ParamId, ParamSet, Tensor};

pub use crate::attention::MsdaConfig;

/// Aligned auxiliary features from adjacent pyramid levels, already resized
/// to the target level and projected to the modulator width.
pub struct ModulatorFeatures {
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub msda: MsdaConfig,
    /// State size of the fusion scans.
    pub state_size: usize,
}

impl EncoderConfig {
    pub fn new(channels: usize, dilations: &[usize], state_size: usize) -> Result<Self> {
        Ok(EncoderConfig {
            msda: MsdaConfig::new(channels, dilations)?,
            state_size,
        })
    }
}

/// One selective cross-scale modulation block: per-branch scan parameters are
/// derived from the modulator, four directional scans gate the branch.
pub struct ScmBlock {
    pub branch_channels: usize,
    pub state_size: usize,
    pub w_p: ParamId,
    pub b_p: ParamId,
    a: ParamId,
    d: ParamId,
    pub alpha: ParamId,
}

impl ScmBlock {
    pub fn new(
        prefix: &str,
        modulator_channels: usize,
        branch_channels: usize,
        state_size: usize,
        set: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let heads = branch_channels + 2 * state_size;
        let init = SsmParams::stable_init(branch_channels, state_size);
        ScmBlock {
            branch_channels,
            state_size,
            w_p: set.uniform(
                &format!("{prefix}.w_p"),
                &[modulator_channels, heads],
                modulator_channels,
                rng,
            ),
            b_p: set.zeros(&format!("{prefix}.b_p"), &[heads]),
            a: set.add(&format!("{prefix}.a"), &[branch_channels, state_size], init.a),
            d: set.add(&format!("{prefix}.d"), &[branch_channels], init.d),
            alpha: set.full(&format!("{prefix}.alpha"), &[], 0.5),
        }
    }

    /// Gate g = σ(Σ_k scan_k(branch; Δ_fus, B_fus, C_fus)) with the selective
    /// inputs split per position from W_p · F_m. A and D are shared across
    /// all four directional orderings.
    pub fn fus_ssm(&self, p: &Bound, branch: &Tensor, modulator: &ModulatorFeatures) -> Result<Tensor> {
        let (c_b, h, w) = match branch.shape() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(dim_err("fus_ssm", other, &[])),
        };
        if c_b != self.branch_channels {
            return Err(dim_err("fus_ssm", &[self.branch_channels], &[c_b]));
        }
        let f_m = &modulator.features;
        if f_m.shape()[1] != h || f_m.shape()[2] != w {
            return Err(dim_err("fus_ssm", branch.shape(), f_m.shape()));
        }
        let c_m = f_m.shape()[0];
        let s = self.state_size;
        let seq = f_m.reshape(&[c_m, h * w])?.transpose();
        let raw = seq.matmul(&p[self.w_p])?.add_row(&p[self.b_p]);
        let parts = raw.split(1, &[c_b, s, s])?;
        let delta = parts[0].softplus().add_const(1e-4);
        let (b_in, c_in) = (&parts[1], &parts[2]);
        let mut total: Option<Tensor> = None;
        for dir in ALL_DIRECTIONS {
            let y = directional_scan_2d_t(branch, &delta, b_in, c_in, &p[self.a], &p[self.d], dir)?;
            total = Some(match total {
                None => y,
                Some(acc) => acc.add(&y),
            });
        }
        Ok(total.expect("four directions").sigmoid())
    }
}

/// B̃ = (1-α)·B + α·(B ⊙ g). Exact identity on the branch at α = 0.
pub fn scm_blend(branch: &Tensor, gate: &Tensor, alpha: &Tensor) -> Tensor {
    let one_minus = alpha.neg().add_const(1.0);
    branch
        .mul_scalar(&one_minus)
        .add(&branch.mul(gate).mul_scalar(alpha))
}

/// Aggregated feature refinement: concatenate the branches, add the level's
/// residual skip, then layer-normalize over channels.
pub fn afr(branches: &[Tensor], skip: &Tensor) -> Result<Tensor> {
    let total: usize = branches.iter().map(|b| b.shape()[0]).sum();
    if total != skip.shape()[0] {
        return Err(dim_err("afr", &[total], skip.shape()));
    }
    let refs: Vec<&Tensor> = branches.iter().collect();
    let stacked = Tensor::concat(&refs, 0)?;
    stacked.add(skip).layer_norm(0)
}

/// Encoder over a three-level pyramid: per level MSDA → per-branch gated
/// fusion → AFR. Levels run coarsest-first; each modulator reads the current
/// state of its neighbors, so level-5 evidence reaches E3.
pub struct DfmambaEncoder {
    pub cfg: EncoderConfig,
    msda: [Msda; 3],
    mod_proj: [(ParamId, ParamId); 3],
    scm: Vec<Vec<ScmBlock>>,
}

impl DfmambaEncoder {
    pub fn new(prefix: &str, cfg: EncoderConfig, set: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let c = cfg.msda.channels;
        let c_m = cfg.msda.group_channels();
        let msda = [
            Msda::new(&format!("{prefix}.msda3"), cfg.msda.clone(), set, rng),
            Msda::new(&format!("{prefix}.msda4"), cfg.msda.clone(), set, rng),
            Msda::new(&format!("{prefix}.msda5"), cfg.msda.clone(), set, rng),
        ];
        // neighbor channel counts: one neighbor for levels 3 and 5, two for 4
        let neighbor_c = [c, 2 * c, c];
        let mut mod_proj = Vec::with_capacity(3);
        for (i, &cin) in neighbor_c.iter().enumerate() {
            mod_proj.push((
                set.uniform(&format!("{prefix}.mod{}.w", i + 3), &[c_m, cin], cin, rng),
                set.zeros(&format!("{prefix}.mod{}.b", i + 3), &[c_m]),
            ));
        }
        let mut scm = Vec::with_capacity(3);
        for lvl in 0..3 {
            let mut blocks = Vec::with_capacity(cfg.msda.n_d);
            for b in 0..cfg.msda.n_d {
                blocks.push(ScmBlock::new(
                    &format!("{prefix}.scm{}.{b}", lvl + 3),
                    c_m,
                    c_m,
                    cfg.state_size,
                    set,
                    rng,
                ));
            }
            scm.push(blocks);
        }
        DfmambaEncoder {
            cfg,
            msda,
            mod_proj: [mod_proj[0], mod_proj[1], mod_proj[2]],
            scm,
        }
    }

    /// Resize the target's neighbors to its spatial size, concatenate along
    /// channels and project to the modulator width.
    pub fn build_modulator(
        &self,
        p: &Bound,
        levels: &[Tensor; 3],
        target_level: usize,
    ) -> Result<ModulatorFeatures> {
        if !(3..=5).contains(&target_level) {
            return Err(Error::Config(format!(
                "pyramid level must be 3, 4 or 5, got {target_level}"
            )));
        }
        let idx = target_level - 3;
        let (h, w) = (levels[idx].shape()[1], levels[idx].shape()[2]);
        let neighbors: Vec<usize> = match idx {
            0 => vec![1],
            1 => vec![0, 2],
            _ => vec![1],
        };
        let resized: Vec<Tensor> = neighbors
            .iter()
            .map(|&n| levels[n].bilinear_resize(h, w))
            .collect();
        let refs: Vec<&Tensor> = resized.iter().collect();
        let stacked = Tensor::concat(&refs, 0)?;
        let (w_id, b_id) = self.mod_proj[idx];
        let cin = stacked.shape()[0];
        let flat = stacked.reshape(&[cin, h * w])?;
        let projected = p[w_id]
            .matmul(&flat)?
            .add_channel(&p[b_id])
            .reshape(&[self.cfg.msda.group_channels(), h, w])?;
        Ok(ModulatorFeatures {
            features: projected,
        })
    }

    pub fn forward(&self, p: &Bound, levels: &PyramidSet) -> Result<PyramidSet> {
        let mut current: [Tensor; 3] = levels.levels().clone();
        for idx in (0..3).rev() {
            let n_i = current[idx].clone();
            let branches = self.msda[idx].forward(p, &n_i)?;
            let modulator = self.build_modulator(p, &current, idx + 3)?;
            let mut blended = Vec::with_capacity(branches.len());
            for (b, branch) in branches.iter().enumerate() {
                let scm = &self.scm[idx][b];
                let gate = scm.fus_ssm(p, branch, &modulator)?;
                blended.push(scm_blend(branch, &gate, &p[scm.alpha]));
            }
            current[idx] = afr(&blended, &n_i)?;
        }
        let [e3, e4, e5] = current;
        PyramidSet::new(e3, e4, e5)
    }

    /// Zero every modulator projection (ablation: gates stop depending on
    /// the neighbors).
    pub fn zero_modulator_projections(&self, set: &mut ParamSet) {
        for lvl in &self.scm {
            for block in lvl {
                let n: usize = set.get(block.w_p).len();
                set.set(block.w_p, vec![0.0; n]);
                let nb = set.get(block.b_p).len();
                set.set(block.b_p, vec![0.0; nb]);
            }
        }
    }

    /// Zero and freeze every blend scalar (ablation: fusion disabled).
    pub fn zero_alphas(&self, set: &mut ParamSet) {
        for lvl in &self.scm {
            for block in lvl {
                set.set(block.alpha, vec![0.0]);
                set.freeze(block.alpha);
            }
        }
    }

    pub fn scm_block(&self, level: usize, branch: usize) -> &ScmBlock {
        &self.scm[level - 3][branch]
    }
}

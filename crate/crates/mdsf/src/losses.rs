//! Box-regression and coherence losses for small targets. Boxes are
//! reinterpreted as 2-D Gaussians with mean (c_x, c_y) and covariance
//! diag(w²/4, h²/4); the squared 2-Wasserstein distance between two such
//! Gaussians has the closed form ‖μ_p−μ_g‖² + ¼[(w_p−w_g)² + (h_p−h_g)²].
//! The scale-adaptive loss blends the normalized Wasserstein distance with
//! CIoU by ω = exp(−a_g/τ_s), so vanishing targets are supervised by the
//! Wasserstein term, which keeps gradients alive at zero IoU.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Axis-aligned box in normalized coordinates, center/size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Domain("box fields must be finite".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Domain(format!(
                "degenerate box rejected: w = {w}, h = {h}"
            )));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Loss family configuration.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// NWD temperature, normalized units.
    pub tau_w: f64,
    /// Area temperature of the adaptive blend.
    pub tau_s: f64,
    /// Weight of the cross-scale coherence term.
    pub lambda_c: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Ablation switch: force ω = 0 (pure CIoU supervision).
    pub force_omega_zero: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_w: 1.0,
            tau_s: 0.01,
            lambda_c: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            force_omega_zero: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_w <= 0.0 || self.tau_s <= 0.0 {
            return Err(Error::Config(
                "tau_w and tau_s must be strictly positive".into(),
            ));
        }
        if self.lambda_c < 0.0 {
            return Err(Error::Config("lambda_c must be non-negative".into()));
        }
        Ok(())
    }
}

/// Area-adaptive weight ω = exp(−a_g/τ_s); strictly decreasing in a_g, ω(0) = 1.
pub fn omega(area_g: f64, cfg: &LossConfig) -> f64 {
    if cfg.force_omega_zero {
        0.0
    } else {
        (-area_g / cfg.tau_s).exp()
    }
}

/// Column view of a batch of boxes on the tape, each field shaped `[N]`.
#[derive(Clone)]
pub struct BoxColumns {
    pub cx: Tensor,
    pub cy: Tensor,
    pub w: Tensor,
    pub h: Tensor,
}

impl BoxColumns {
    /// Split a `[N,4]` tensor (cx, cy, w, h columns) into columns.
    pub fn from_tensor(boxes: &Tensor) -> Result<BoxColumns> {
        let n = boxes.shape()[0];
        let cols = boxes.split(1, &[1, 1, 1, 1])?;
        Ok(BoxColumns {
            cx: cols[0].reshape(&[n])?,
            cy: cols[1].reshape(&[n])?,
            w: cols[2].reshape(&[n])?,
            h: cols[3].reshape(&[n])?,
        })
    }

    /// Constant columns from a slice of boxes.
    pub fn constants(graph: &Graph, boxes: &[BBox]) -> BoxColumns {
        let n = boxes.len();
        BoxColumns {
            cx: graph.tensor(&[n], boxes.iter().map(|b| b.cx).collect()),
            cy: graph.tensor(&[n], boxes.iter().map(|b| b.cy).collect()),
            w: graph.tensor(&[n], boxes.iter().map(|b| b.w).collect()),
            h: graph.tensor(&[n], boxes.iter().map(|b| b.h).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.cx.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Squared 2-Wasserstein distance between the Gaussian readings of two box
/// batches, elementwise `[N]`.
pub fn wasserstein_sq_t(p: &BoxColumns, g: &BoxColumns) -> Tensor {
    let center = p.cx.sub(&g.cx).square().add(&p.cy.sub(&g.cy).square());
    let size = p.w.sub(&g.w).square().add(&p.h.sub(&g.h).square());
    center.add(&size.scale(0.25))
}

/// L_NWD = 1 − exp(−√𝒲₂²/τ_w), elementwise `[N]`, values in [0, 1).
pub fn nwd_loss_t(p: &BoxColumns, g: &BoxColumns, tau_w: f64) -> Tensor {
    wasserstein_sq_t(p, g)
        .sqrt()
        .scale(-1.0 / tau_w)
        .exp()
        .neg()
        .add_const(1.0)
}

struct IouParts {
    iou: Tensor,
    rho_sq: Tensor,
    diag_sq: Tensor,
    v: Tensor,
}

fn iou_parts(p: &BoxColumns, g: &BoxColumns) -> IouParts {
    let half = 0.5;
    let (pl, pr) = (p.cx.sub(&p.w.scale(half)), p.cx.add(&p.w.scale(half)));
    let (pt, pb) = (p.cy.sub(&p.h.scale(half)), p.cy.add(&p.h.scale(half)));
    let (gl, gr) = (g.cx.sub(&g.w.scale(half)), g.cx.add(&g.w.scale(half)));
    let (gt, gb) = (g.cy.sub(&g.h.scale(half)), g.cy.add(&g.h.scale(half)));

    let iw = pr.min_elem(&gr).sub(&pl.max_elem(&gl)).clamp_min(0.0);
    let ih = pb.min_elem(&gb).sub(&pt.max_elem(&gt)).clamp_min(0.0);
    let inter = iw.mul(&ih);
    let union = p.w.mul(&p.h).add(&g.w.mul(&g.h)).sub(&inter);
    let iou = inter.div(&union);

    let rho_sq = p.cx.sub(&g.cx).square().add(&p.cy.sub(&g.cy).square());
    let cw = pr.max_elem(&gr).sub(&pl.min_elem(&gl));
    let chh = pb.max_elem(&gb).sub(&pt.min_elem(&gt));
    let diag_sq = cw.square().add(&chh.square());

    let four_over_pi_sq = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = g
        .w
        .div(&g.h)
        .arctan()
        .sub(&p.w.div(&p.h).arctan())
        .square()
        .scale(four_over_pi_sq);
    IouParts {
        iou,
        rho_sq,
        diag_sq,
        v,
    }
}

/// 1 − IoU, elementwise `[N]`. Gradient is exactly zero for disjoint boxes.
pub fn iou_loss_t(p: &BoxColumns, g: &BoxColumns) -> Tensor {
    iou_parts(p, g).iou.neg().add_const(1.0)
}

/// CIoU with the aspect weight α supplied as a constant (the gradient path
/// used in practice: α is held fixed during differentiation).
pub fn ciou_loss_t_frozen_alpha(p: &BoxColumns, g: &BoxColumns, alpha: &[f64]) -> Tensor {
    let parts = iou_parts(p, g);
    let alpha_t = p.cx.graph().tensor(&[alpha.len()], alpha.to_vec());
    parts
        .iou
        .neg()
        .add_const(1.0)
        .add(&parts.rho_sq.div(&parts.diag_sq))
        .add(&parts.v.mul(&alpha_t))
}

/// The trade-off weight α = v / ((1 − IoU) + v) evaluated at the current
/// values (constant under differentiation, per the CIoU convention).
pub fn ciou_alpha_values(p: &BoxColumns, g: &BoxColumns) -> Vec<f64> {
    let parts = iou_parts(p, g);
    let iou = parts.iou.value();
    let v = parts.v.value();
    iou.iter()
        .zip(&v)
        .map(|(&i, &vv)| {
            let denom = (1.0 - i) + vv;
            if denom <= 1e-12 {
                0.0
            } else {
                vv / denom
            }
        })
        .collect()
}

/// CIoU loss: 1 − IoU + ρ²/c² + α·v with α treated as a constant.
pub fn ciou_loss_t(p: &BoxColumns, g: &BoxColumns) -> Tensor {
    let alpha = ciou_alpha_values(p, g);
    ciou_loss_t_frozen_alpha(p, g, &alpha)
}

/// Scale-adaptive blend with a caller-fixed CIoU aspect weight (used when a
/// finite-difference oracle must probe the same frozen-α function the
/// gradient path implements).
pub fn sa_wiou_t_frozen_alpha(
    p: &BoxColumns,
    g: &BoxColumns,
    cfg: &LossConfig,
    alpha: &[f64],
) -> Tensor {
    let graph = p.cx.graph().clone();
    let n = p.len();
    let gw = g.w.value();
    let areas = gw.iter().zip(g.h.value()).map(|(w, h)| w * h);
    let omegas: Vec<f64> = areas.map(|a| omega(a, cfg)).collect();
    let om = graph.tensor(&[n], omegas.clone());
    let om_c = graph.tensor(&[n], omegas.iter().map(|o| 1.0 - o).collect());
    let nwd = nwd_loss_t(p, g, cfg.tau_w);
    let ciou = ciou_loss_t_frozen_alpha(p, g, alpha);
    nwd.mul(&om).add(&ciou.mul(&om_c))
}

/// Scale-adaptive blend ω·L_NWD + (1−ω)·L_CIoU, elementwise `[N]`.
pub fn sa_wiou_t(p: &BoxColumns, g: &BoxColumns, cfg: &LossConfig) -> Tensor {
    let alpha = ciou_alpha_values(p, g);
    sa_wiou_t_frozen_alpha(p, g, cfg, &alpha)
}

/// Cross-scale coherence over center embeddings: one row per ground-truth
/// box at each of the three levels, `[n, C]`. Returns a scalar in [0, 2];
/// an empty batch contributes 0.
pub fn csc_loss_t(graph: &Graph, e3: &Tensor, e4: &Tensor, e5: &Tensor) -> Result<Tensor> {
    let n = e3.shape()[0];
    if e4.shape() != e3.shape() || e5.shape() != e3.shape() {
        return Err(crate::error::dim_err("csc_loss", e3.shape(), e4.shape()));
    }
    if n == 0 {
        return Ok(graph.scalar(0.0));
    }
    let c = e3.shape()[1];
    let ones = graph.tensor(&[c, 1], vec![1.0; c]);
    let row_dot = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        a.mul(b).matmul(&ones)
    };
    let norm = |a: &Tensor| -> Result<Tensor> { Ok(row_dot(a, a)?.sqrt()) };
    let cos_pair = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let dot = row_dot(a, b)?;
        let denom = norm(a)?.mul(&norm(b)?).clamp_min(1e-8);
        Ok(dot.div(&denom))
    };
    let pairs = [
        cos_pair(e3, e4)?,
        cos_pair(e4, e5)?,
        cos_pair(e3, e5)?,
    ];
    let total = pairs[0].add(&pairs[1]).add(&pairs[2]).sum_all();
    Ok(total.scale(-1.0 / (3.0 * n as f64)).add_const(1.0))
}

/// Binary focal term from logits: −α·(1−p_t)^γ·log(p_t) summed over all
/// (cell, class) entries and divided by max(1, num_pos). `targets` is a 0/1
/// mask of the same shape as `logits`.
pub fn focal_loss_t(
    logits: &Tensor,
    targets: &[f64],
    num_pos: usize,
    gamma: f64,
    alpha: f64,
) -> Result<Tensor> {
    if targets.len() != logits.numel() {
        return Err(crate::error::dim_err(
            "focal_loss",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let graph = logits.graph().clone();
    let shape = logits.shape().to_vec();
    let t = graph.tensor(&shape, targets.to_vec());
    let t_neg = graph.tensor(&shape, targets.iter().map(|v| 1.0 - v).collect());
    let p = logits.sigmoid();
    // log p = −softplus(−x), log(1−p) = −softplus(x): stable at both tails
    let pos = p
        .neg()
        .add_const(1.0)
        .pow_const(gamma)
        .mul(&logits.neg().softplus())
        .mul(&t);
    let neg = p.pow_const(gamma).mul(&logits.softplus()).mul(&t_neg);
    let total = pos.add(&neg).sum_all().scale(alpha);
    Ok(total.scale(1.0 / num_pos.max(1) as f64))
}

// ── value-level wrappers ─────────────────────────────────────────────

fn pair_eval(p: &BBox, g: &BBox, f: impl Fn(&BoxColumns, &BoxColumns) -> Tensor) -> f64 {
    let graph = Graph::new();
    let pc = BoxColumns::constants(&graph, &[*p]);
    let gc = BoxColumns::constants(&graph, &[*g]);
    f(&pc, &gc).value()[0]
}

/// Closed-form squared 2-Wasserstein distance between two boxes.
pub fn wasserstein_sq(p: &BBox, g: &BBox) -> f64 {
    pair_eval(p, g, wasserstein_sq_t)
}

/// Normalized Wasserstein distance loss; 0 iff the boxes coincide.
pub fn nwd_loss(p: &BBox, g: &BBox, tau_w: f64) -> f64 {
    pair_eval(p, g, |a, b| nwd_loss_t(a, b, tau_w))
}

pub fn ciou_loss(p: &BBox, g: &BBox) -> f64 {
    pair_eval(p, g, ciou_loss_t)
}

pub fn iou_loss(p: &BBox, g: &BBox) -> f64 {
    pair_eval(p, g, iou_loss_t)
}

pub fn sa_wiou(p: &BBox, g: &BBox, cfg: &LossConfig) -> f64 {
    pair_eval(p, g, |a, b| sa_wiou_t(a, b, cfg))
}

/// Cross-scale coherence over per-box embeddings (e3, e4, e5) of equal length.
pub fn csc_loss(embeddings: &[[Vec<f64>; 3]]) -> f64 {
    let graph = Graph::new();
    let n = embeddings.len();
    if n == 0 {
        return 0.0;
    }
    let c = embeddings[0][0].len();
    let level = |idx: usize| -> Tensor {
        let mut data = Vec::with_capacity(n * c);
        for e in embeddings {
            data.extend_from_slice(&e[idx]);
        }
        graph.tensor(&[n, c], data)
    };
    csc_loss_t(&graph, &level(0), &level(1), &level(2))
        .expect("equal shapes by construction")
        .item()
}

pub fn focal_loss(logits: &[f64], targets: &[f64], gamma: f64, alpha: f64) -> f64 {
    let graph = Graph::new();
    let n = logits.len();
    let lt = graph.tensor(&[n, 1], logits.to_vec());
    let num_pos = targets.iter().filter(|&&t| t > 0.5).count();
    focal_loss_t(&lt, targets, num_pos, gamma, alpha)
        .expect("lengths match")
        .item()
}

// ── total loss ───────────────────────────────────────────────────────

/// Per-term values and the λ_c-weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub focal: f64,
    pub sa_wiou: f64,
    pub l1: f64,
    pub csc: f64,
    pub total: f64,
}

impl LossReport {
    /// Flat key-value text record, one `name value` pair per line.
    pub fn to_text(&self) -> String {
        format!(
            "focal {:.17e}\nsa_wiou {:.17e}\nl1 {:.17e}\ncsc {:.17e}\ntotal {:.17e}\n",
            self.focal, self.sa_wiou, self.l1, self.csc, self.total
        )
    }

    pub fn from_text(text: &str) -> Result<LossReport> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let (Some(k), Some(v)) = (it.next(), it.next()) else {
                continue;
            };
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Format(format!("bad value in loss record: {line}")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing loss field {k}")))
        };
        Ok(LossReport {
            focal: get("focal")?,
            sa_wiou: get("sa_wiou")?,
            l1: get("l1")?,
            csc: get("csc")?,
            total: get("total")?,
        })
    }
}

/// Matched inputs for the total loss; the matcher itself lives upstream.
pub struct TotalLossInputs<'a> {
    /// All per-cell class logits `[N_cells, K]`.
    pub class_logits: &'a Tensor,
    /// 0/1 target mask, same layout as `class_logits`.
    pub class_targets: &'a [f64],
    /// Count of positive (cell, class) assignments.
    pub num_pos: usize,
    /// Matched predicted boxes (columns of length M; M may be 0).
    pub pred_boxes: BoxColumns,
    /// Matched ground-truth boxes, length M.
    pub gt_boxes: &'a [BBox],
    /// Per-level center embeddings `[M, C]`, in level order (E3, E4, E5).
    pub center_embeddings: Option<[&'a Tensor; 3]>,
    /// When set, the CIoU aspect weight per matched pair is held at these
    /// values instead of being recomputed (finite-difference probing).
    pub ciou_alpha: Option<Vec<f64>>,
}

/// L = L_focal + L_SA-WIoU + ℓ1 + λ_c·L_CSC over matched pairs. Returns the
/// report and the differentiable total.
pub fn total_loss_t(
    graph: &Graph,
    inputs: &TotalLossInputs<'_>,
    cfg: &LossConfig,
) -> Result<(LossReport, Tensor)> {
    cfg.validate()?;
    let m = inputs.gt_boxes.len();
    if inputs.pred_boxes.len() != m {
        return Err(crate::error::dim_err(
            "total_loss",
            &[inputs.pred_boxes.len()],
            &[m],
        ));
    }
    let focal = focal_loss_t(
        inputs.class_logits,
        inputs.class_targets,
        inputs.num_pos,
        cfg.focal_gamma,
        cfg.focal_alpha,
    )?;

    let (box_term, l1_term) = if m == 0 {
        (graph.scalar(0.0), graph.scalar(0.0))
    } else {
        let gt = BoxColumns::constants(graph, inputs.gt_boxes);
        let blended = match &inputs.ciou_alpha {
            Some(alpha) => sa_wiou_t_frozen_alpha(&inputs.pred_boxes, &gt, cfg, alpha),
            None => sa_wiou_t(&inputs.pred_boxes, &gt, cfg),
        };
        let sa = blended.sum_all().scale(1.0 / m as f64);
        let p = &inputs.pred_boxes;
        let l1 = p
            .cx
            .sub(&gt.cx)
            .abs()
            .add(&p.cy.sub(&gt.cy).abs())
            .add(&p.w.sub(&gt.w).abs())
            .add(&p.h.sub(&gt.h).abs())
            .sum_all()
            .scale(1.0 / m as f64);
        (sa, l1)
    };

    let csc = match (&inputs.center_embeddings, m) {
        (Some([e3, e4, e5]), m) if m > 0 => csc_loss_t(graph, e3, e4, e5)?,
        _ => graph.scalar(0.0),
    };

    let total = focal
        .add(&box_term)
        .add(&l1_term)
        .add(&csc.scale(cfg.lambda_c));
    let report = LossReport {
        focal: focal.item(),
        sa_wiou: box_term.item(),
        l1: l1_term.item(),
        csc: csc.item(),
        total: total.item(),
    };
    Ok((report, total))
}

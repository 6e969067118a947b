//! Toy detector assembly: stride-8 stem → two scan-mixer stages with a
//! hybrid block → bidirectional pyramid → cross-scale encoder → dense
//! per-cell head, trained end-to-end by plain gradient descent on synthetic
//! scenes. Small enough for full finite-difference verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{DfmambaEncoder, EncoderConfig};
use crate::losses::{BoxColumns, LossConfig, LossReport, TotalLossInputs};
use crate::pyramid::{Efpn, HybridBlock, PyramidSet};
use crate::ssm::MambaMixer;
use crate::synth::{SceneConfig, SyntheticScene};
use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Channel widths of the three stride-2 stem stages.
    pub stem_channels: [usize; 3],
    /// Pyramid/encoder width; must be divisible by the branch count.
    pub encoder_channels: usize,
    pub dilations: Vec<usize>,
    /// State size of the backbone mixers.
    pub mixer_state: usize,
    /// State size of the fusion scans.
    pub fusion_state: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: [4, 6, 8],
            encoder_channels: 6,
            dilations: vec![1, 2, 3],
            mixer_state: 4,
            fusion_state: 3,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny configuration for whole-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            stem_channels: [2, 2, 4],
            encoder_channels: 4,
            dilations: vec![1, 2],
            mixer_state: 2,
            fusion_state: 2,
            num_classes: 1,
        }
    }
}

/// Width/bias offset of the box head: w = softplus(t_w + BOX_SIZE_BIAS)
/// starts near typical target extents.
const BOX_SIZE_BIAS: f64 = -2.0;
/// Class logit bias at init: a low-prior start for the focal term.
const CLASS_BIAS_INIT: f64 = -2.0;

struct StemStage {
    dw: ParamId,
    pw: ParamId,
    pb: ParamId,
}

/// One prediction cell: pyramid level and its anchor center.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub anchor_x: f64,
    pub anchor_y: f64,
}

/// Dense per-cell predictions across all three levels.
pub struct Predictions {
    /// `[N_cells, K]`
    pub class_logits: Tensor,
    /// Decoded box columns over all cells.
    pub boxes: BoxColumns,
    pub cells: Vec<Cell>,
}

pub struct ToyOutputs {
    pub predictions: Predictions,
    pub encoder_levels: PyramidSet,
}

pub struct ToyDetector {
    pub cfg: ModelConfig,
    stem: [StemStage; 3],
    mixer1: MambaMixer,
    down34: (ParamId, ParamId, ParamId),
    mixer2: MambaMixer,
    pub hybrid: HybridBlock,
    down45: (ParamId, ParamId, ParamId),
    efpn: Efpn,
    pub encoder: DfmambaEncoder,
    head_w: [ParamId; 3],
    head_b: [ParamId; 3],
}

impl ToyDetector {
    pub fn new(cfg: ModelConfig, set: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        let [c1, c2, c3] = cfg.stem_channels;
        let ce = cfg.encoder_channels;
        let k = cfg.num_classes;
        fn stage(
            i: usize,
            cin: usize,
            cout: usize,
            set: &mut ParamSet,
            rng: &mut impl Rng,
        ) -> StemStage {
            StemStage {
                dw: set.uniform(&format!("stem{i}.dw"), &[cin, 3, 3], 9, rng),
                pw: set.uniform(&format!("stem{i}.pw"), &[cout, cin], cin, rng),
                pb: set.zeros(&format!("stem{i}.pb"), &[cout]),
            }
        }
        let stem = [
            stage(1, 1, c1, set, rng),
            stage(2, c1, c2, set, rng),
            stage(3, c2, c3, set, rng),
        ];
        let mixer1 = MambaMixer::new("stage1.mixer", c3, cfg.mixer_state, set, rng);
        let down34 = (
            set.uniform("down34.dw", &[c3, 3, 3], 9, rng),
            set.uniform("down34.pw", &[c3, c3], c3, rng),
            set.zeros("down34.pb", &[c3]),
        );
        let mixer2 = MambaMixer::new("stage2.mixer", c3, cfg.mixer_state, set, rng);
        let hybrid = HybridBlock::new("hybrid", c3, cfg.mixer_state, set, rng);
        let down45 = (
            set.uniform("down45.dw", &[c3, 3, 3], 9, rng),
            set.uniform("down45.pw", &[c3, c3], c3, rng),
            set.zeros("down45.pb", &[c3]),
        );
        let efpn = Efpn::new("efpn", [c3, c3, c3], ce, set, rng);
        let encoder = DfmambaEncoder::new(
            "dfmamba",
            EncoderConfig::new(ce, &cfg.dilations, cfg.fusion_state)?,
            set,
            rng,
        );
        let mut head_w = Vec::with_capacity(3);
        let mut head_b = Vec::with_capacity(3);
        for lvl in [3, 4, 5] {
            head_w.push(set.uniform(&format!("head{lvl}.w"), &[k + 4, ce], ce, rng));
            let mut bias = vec![CLASS_BIAS_INIT; k];
            bias.extend(std::iter::repeat(0.0).take(4));
            head_b.push(set.add(&format!("head{lvl}.b"), &[k + 4], bias));
        }
        Ok(ToyDetector {
            cfg,
            stem,
            mixer1,
            down34,
            mixer2,
            hybrid,
            down45,
            efpn,
            encoder,
            head_w: [head_w[0], head_w[1], head_w[2]],
            head_b: [head_b[0], head_b[1], head_b[2]],
        })
    }

    fn stem_stage(&self, p: &Bound, stage: &StemStage, x: &Tensor) -> Result<Tensor> {
        let down = x.depthwise_conv2d_strided(&p[stage.dw], 1, 2)?;
        let (c, h, w) = (down.shape()[0], down.shape()[1], down.shape()[2]);
        let mixed = p[stage.pw]
            .matmul(&down.reshape(&[c, h * w])?)?
            .add_channel(&p[stage.pb]);
        let cout = mixed.shape()[0];
        Ok(mixed.reshape(&[cout, h, w])?.silu())
    }

    fn downsample(
        &self,
        p: &Bound,
        ids: (ParamId, ParamId, ParamId),
        x: &Tensor,
    ) -> Result<Tensor> {
        let (dw, pw, pb) = ids;
        let down = x.depthwise_conv2d_strided(&p[dw], 1, 2)?;
        let (c, h, w) = (down.shape()[0], down.shape()[1], down.shape()[2]);
        let mixed = p[pw]
            .matmul(&down.reshape(&[c, h * w])?)?
            .add_channel(&p[pb]);
        Ok(mixed.reshape(&[c, h, w])?.silu())
    }

    /// Full forward pass: image `[1,H,W]` with H, W divisible by 32.
    pub fn forward(&self, p: &Bound, image: &Tensor) -> Result<ToyOutputs> {
        let (ch, h, w) = match image.shape() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(crate::error::dim_err("toy_detector", other, &[])),
        };
        if ch != 1 {
            return Err(Error::Config(format!("expected a single channel, got {ch}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be divisible by 32"
            )));
        }
        let mut x = image.clone();
        for stage in &self.stem {
            x = self.stem_stage(p, stage, &x)?;
        }
        let f3 = self.mixer1.forward(p, &x)?;
        let f4_in = self.downsample(p, self.down34, &f3)?;
        let f4 = self.hybrid.forward(p, &self.mixer2.forward(p, &f4_in)?)?;
        let f5 = self.downsample(p, self.down45, &f4)?;
        let pyramid = self.efpn.forward(p, &f3, &f4, &f5)?;
        let encoded = self.encoder.forward(p, &pyramid)?;
        let predictions = self.head(p, &encoded)?;
        Ok(ToyOutputs {
            predictions,
            encoder_levels: encoded,
        })
    }

    fn head(&self, p: &Bound, encoded: &PyramidSet) -> Result<Predictions> {
        let k = self.cfg.num_classes;
        let mut logits_parts = Vec::with_capacity(3);
        let mut col_parts: [Vec<Tensor>; 4] = Default::default();
        let mut cells = Vec::new();
        for (i, lvl) in [3usize, 4, 5].iter().enumerate() {
            let e = encoded.level(*lvl);
            let (c, hh, ww) = (e.shape()[0], e.shape()[1], e.shape()[2]);
            let raw = p[self.head_w[i]]
                .matmul(&e.reshape(&[c, hh * ww])?)?
                .add_channel(&p[self.head_b[i]]);
            let per_cell = raw.transpose(); // [HW, K+4]
            let parts = per_cell.split(1, &[k, 1, 1, 1, 1])?;
            logits_parts.push(parts[0].clone());

            let l = hh * ww;
            let mut ax = Vec::with_capacity(l);
            let mut ay = Vec::with_capacity(l);
            for y in 0..hh {
                for x in 0..ww {
                    ax.push((x as f64 + 0.5) / ww as f64);
                    ay.push((y as f64 + 0.5) / hh as f64);
                    cells.push(Cell {
                        level: *lvl,
                        y,
                        x,
                        anchor_x: (x as f64 + 0.5) / ww as f64,
                        anchor_y: (y as f64 + 0.5) / hh as f64,
                    });
                }
            }
            let graph = e.graph();
            let ax_t = graph.tensor(&[l], ax);
            let ay_t = graph.tensor(&[l], ay);
            let cx = parts[1].reshape(&[l])?.scale(1.0 / ww as f64).add(&ax_t);
            let cy = parts[2].reshape(&[l])?.scale(1.0 / hh as f64).add(&ay_t);
            let bw = parts[3].reshape(&[l])?.add_const(BOX_SIZE_BIAS).softplus();
            let bh = parts[4].reshape(&[l])?.add_const(BOX_SIZE_BIAS).softplus();
            col_parts[0].push(cx);
            col_parts[1].push(cy);
            col_parts[2].push(bw);
            col_parts[3].push(bh);
        }
        let logit_refs: Vec<&Tensor> = logits_parts.iter().collect();
        let class_logits = Tensor::concat(&logit_refs, 0)?;
        let cat = |parts: &Vec<Tensor>| -> Result<Tensor> {
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat(&refs, 0)
        };
        Ok(Predictions {
            class_logits,
            boxes: BoxColumns {
                cx: cat(&col_parts[0])?,
                cy: cat(&col_parts[1])?,
                w: cat(&col_parts[2])?,
                h: cat(&col_parts[3])?,
            },
            cells,
        })
    }
}

/// Greedy one-to-one assignment of ground-truth boxes to prediction cells by
/// anchor-center distance. Returns the matched cell index per box.
pub fn match_targets(cells: &[Cell], scene: &SyntheticScene) -> Vec<usize> {
    let mut used = vec![false; cells.len()];
    let mut matches = Vec::with_capacity(scene.boxes.len());
    for b in &scene.boxes {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, cell) in cells.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = (cell.anchor_x - b.cx).powi(2) + (cell.anchor_y - b.cy).powi(2);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let idx = best.expect("more cells than boxes");
        used[idx] = true;
        matches.push(idx);
    }
    matches
}

/// Nearest-cell row index of each box center in a level of the given size.
pub fn center_cells(boxes: &[crate::losses::BBox], hh: usize, ww: usize) -> Vec<usize> {
    boxes
        .iter()
        .map(|b| {
            let x = ((b.cx * ww as f64).floor() as usize).min(ww - 1);
            let y = ((b.cy * hh as f64).floor() as usize).min(hh - 1);
            y * ww + x
        })
        .collect()
}

/// Forward plus loss assembly for one scene.
pub fn scene_loss(
    detector: &ToyDetector,
    p: &Bound,
    graph: &Graph,
    scene: &SyntheticScene,
    cfg: &LossConfig,
) -> Result<(LossReport, Tensor)> {
    let image = graph.tensor(&[1, scene.height, scene.width], scene.image.clone());
    let out = detector.forward(p, &image)?;
    let preds = &out.predictions;
    let k = detector.cfg.num_classes;
    let n_cells = preds.cells.len();

    let matches = match_targets(&preds.cells, scene);
    let mut class_targets = vec![0.0; n_cells * k];
    for (b, &cell) in matches.iter().enumerate() {
        let class = scene.classes[b].min(k - 1);
        class_targets[cell * k + class] = 1.0;
    }

    let rows: Vec<usize> = matches.clone();
    let matched_boxes = BoxColumns {
        cx: preds.boxes.cx.reshape(&[n_cells, 1])?.gather_rows(&rows).reshape(&[rows.len()])?,
        cy: preds.boxes.cy.reshape(&[n_cells, 1])?.gather_rows(&rows).reshape(&[rows.len()])?,
        w: preds.boxes.w.reshape(&[n_cells, 1])?.gather_rows(&rows).reshape(&[rows.len()])?,
        h: preds.boxes.h.reshape(&[n_cells, 1])?.gather_rows(&rows).reshape(&[rows.len()])?,
    };

    // center embeddings from each encoder level, nearest-cell indexing
    let mut embeddings = Vec::with_capacity(3);
    for lvl in [3usize, 4, 5] {
        let e = out.encoder_levels.level(lvl);
        let (c, hh, ww) = (e.shape()[0], e.shape()[1], e.shape()[2]);
        let seq = e.reshape(&[c, hh * ww])?.transpose();
        embeddings.push(seq.gather_rows(&center_cells(&scene.boxes, hh, ww)));
    }

    let inputs = TotalLossInputs {
        class_logits: &preds.class_logits,
        class_targets: &class_targets,
        num_pos: matches.len(),
        pred_boxes: matched_boxes,
        gt_boxes: &scene.boxes,
        center_embeddings: Some([&embeddings[0], &embeddings[1], &embeddings[2]]),
    };
    crate::losses::total_loss_t(graph, &inputs, cfg)
}

/// Component toggles mirroring the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disable {
    /// Zero and freeze the hybrid block's residual weights.
    Hybrid,
    /// Zero and freeze every fusion blend scalar.
    Alpha,
    /// Drop the coherence term (λ_c = 0).
    Csc,
    /// Force ω = 0 (pure CIoU box supervision).
    Omega,
}

#[derive(Debug, Clone)]
pub struct SmokeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    /// Scenes cycled round-robin during training.
    pub scene_pool: usize,
    pub disable: Vec<Disable>,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig {
            steps: 300,
            lr: 0.05,
            seed: 1,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            scene_pool: 4,
            disable: Vec::new(),
        }
    }
}

/// Plain gradient descent over a fixed pool of generated scenes. Returns one
/// loss report per step; aborts with a diagnostic naming the first
/// non-finite term.
pub fn smoke_train(cfg: &SmokeConfig) -> Result<Vec<LossReport>> {
    if cfg.steps < 1 {
        return Err(Error::Config("smoke training needs at least one step".into()));
    }
    let mut loss_cfg = cfg.losses.clone();
    if cfg.disable.contains(&Disable::Csc) {
        loss_cfg.lambda_c = 0.0;
    }
    if cfg.disable.contains(&Disable::Omega) {
        loss_cfg.force_omega_zero = true;
    }

    let mut scenes = Vec::with_capacity(cfg.scene_pool);
    for i in 0..cfg.scene_pool.max(1) {
        scenes.push(crate::synth::generate_scene(
            &cfg.scene,
            cfg.seed.wrapping_add(7919 * i as u64),
        )?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d64_7366);
    let mut set = ParamSet::new();
    let detector = ToyDetector::new(cfg.model.clone(), &mut set, &mut rng)?;
    if cfg.disable.contains(&Disable::Hybrid) {
        set.set(detector.hybrid.w_local, vec![0.0]);
        set.set(detector.hybrid.w_global, vec![0.0]);
        set.freeze(detector.hybrid.w_local);
        set.freeze(detector.hybrid.w_global);
    }
    if cfg.disable.contains(&Disable::Alpha) {
        detector.encoder.zero_alphas(&mut set);
    }

    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scene = &scenes[step % scenes.len()];
        let graph = Graph::new();
        let bound = set.bind(&graph);
        let (report, total) = scene_loss(&detector, &bound, &graph, scene, &loss_cfg)?;
        for (name, value) in [
            ("focal", report.focal),
            ("sa_wiou", report.sa_wiou),
            ("l1", report.l1),
            ("csc", report.csc),
            ("total", report.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step}: loss term {name} = {value}"
                )));
            }
        }
        total.backward()?;
        set.sgd_step(&bound, cfg.lr);
        reports.push(report);
    }
    Ok(reports)
}

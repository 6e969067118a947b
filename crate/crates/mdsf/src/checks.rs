//! Independent reference implementations (oracles) and the verification
//! suites behind the CLI. Oracles deliberately share no code with the kernels
//! they check.

use crate::error::{Error, Result};
use crate::ssm::{SelectiveInputs, SsmParams};
use crate::tensor::{fd_step, rel_err, Bound, Graph, ParamSet, Tensor};

/// Finite-difference gradient check over every coordinate of every parameter
/// in `set`. `f` must be a deterministic function of the bound parameters.
pub fn gradcheck_params<F>(set: &mut ParamSet, f: F) -> Result<f64>
where
    F: Fn(&Graph, &Bound) -> Result<Tensor>,
{
    // Reverse-mode gradient at the current parameter values.
    let graph = Graph::new();
    let bound = set.bind(&graph);
    let loss = f(&graph, &bound)?;
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck target must be scalar, got {:?}",
            loss.shape()
        )));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("gradcheck loss is not finite".into()));
    }
    loss.backward()?;
    let mut ad = Vec::with_capacity(set.total_len());
    for id in set.ids() {
        match bound.grad(id) {
            Some(g) => ad.extend_from_slice(&g),
            None => ad.extend(std::iter::repeat(0.0).take(set.get(id).len())),
        }
    }

    let theta0 = set.flatten();
    let eval = |set: &mut ParamSet, theta: &[f64]| -> Result<f64> {
        set.load_flat(theta);
        let graph = Graph::new();
        let bound = set.bind(&graph);
        let v = f(&graph, &bound)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck loss is not finite".into()));
        }
        Ok(v)
    };

    let mut max_rel: f64 = 0.0;
    let mut theta = theta0.clone();
    for i in 0..theta0.len() {
        let h = fd_step(theta0[i]);
        theta[i] = theta0[i] + h;
        let fp = eval(set, &theta)?;
        theta[i] = theta0[i] - h;
        let fm = eval(set, &theta)?;
        theta[i] = theta0[i];
        let g_fd = (fp - fm) / (2.0 * h);
        max_rel = max_rel.max(rel_err(g_fd, ad[i]));
    }
    set.load_flat(&theta0);
    Ok(max_rel)
}

/// O(L²) unrolled expansion of the selective recurrence:
/// y_t = Σ_s C[t,s] · Σ_{k≤t} (Π_{j=k+1..t} Ā[j,c,s]) · B̄[k,s] · x[k,c] + D[c]·x[t,c].
pub fn unrolled_scan_reference(
    x: &[f64],
    params: &SsmParams,
    inputs: &SelectiveInputs,
    seq_len: usize,
) -> Vec<f64> {
    let (ch, s_dim) = (params.channels, params.state_size);
    let mut y = vec![0.0; seq_len * ch];
    for t in 0..seq_len {
        for c in 0..ch {
            let mut acc = 0.0;
            for s in 0..s_dim {
                let a_cs = params.a[c * s_dim + s];
                let mut h_ts = 0.0;
                for k in 0..=t {
                    let mut decay = 1.0;
                    for j in k + 1..=t {
                        decay *= (inputs.delta[j * ch + c] * a_cs).exp();
                    }
                    let b_bar = inputs.delta[k * ch + c] * inputs.b[k * s_dim + s];
                    h_ts += decay * b_bar * x[k * ch + c];
                }
                acc += inputs.c[t * s_dim + s] * h_ts;
            }
            y[t * ch + c] = acc + params.d[c] * x[t * ch + c];
        }
    }
    y
}

/// Dense-attention reference for one dilated branch: a full H·W × H·W score
/// matrix with −∞ outside the 9-point dilated neighborhood, plus one
/// zero-score slot per out-of-bounds offset (the zero-padding contract).
/// Computed with scalar loops, no tape.
pub fn dense_masked_attention_reference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    d: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; ch * hw];
    let scale = 1.0 / (ch as f64).sqrt();
    for py in 0..h as isize {
        for px in 0..w as isize {
            let p = (py as usize) * w + px as usize;
            let mut scores = vec![f64::NEG_INFINITY; hw];
            let mut pad_slots = 0usize;
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let (qy, qx) = (py + dy * d as isize, px + dx * d as isize);
                    if qy < 0 || qy >= h as isize || qx < 0 || qx >= w as isize {
                        pad_slots += 1;
                        continue;
                    }
                    let qpos = (qy as usize) * w + qx as usize;
                    let mut dot = 0.0;
                    for c in 0..ch {
                        dot += q[c * hw + p] * k[c * hw + qpos];
                    }
                    scores[qpos] = dot * scale;
                }
            }
            let mut mx = if pad_slots > 0 { 0.0 } else { f64::NEG_INFINITY };
            for &s in &scores {
                if s > mx {
                    mx = s;
                }
            }
            let mut denom = pad_slots as f64 * (0.0 - mx).exp();
            let mut weights = vec![0.0; hw];
            for (qpos, &s) in scores.iter().enumerate() {
                if s > f64::NEG_INFINITY {
                    let e = (s - mx).exp();
                    weights[qpos] = e;
                    denom += e;
                }
            }
            for c in 0..ch {
                let mut acc = 0.0;
                for (qpos, &wt) in weights.iter().enumerate() {
                    if wt != 0.0 {
                        acc += wt * v[c * hw + qpos];
                    }
                }
                out[c * hw + p] = acc / denom;
            }
        }
    }
    out
}

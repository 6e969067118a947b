use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn matmul_identity() {
    let g = Graph::new();
    let eye = g.tensor(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let m = g.tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = eye.matmul(&m).unwrap();
    assert_eq!(y.value(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_dot_product() {
    let g = Graph::new();
    let a = g.tensor(&[1, 2], vec![1.0, 2.0]);
    let b = g.tensor(&[2, 1], vec![3.0, 4.0]);
    let y = a.matmul(&b).unwrap();
    assert_eq!(y.value(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::new();
    let a = g.tensor(&[2, 3], vec![0.0; 6]);
    let b = g.tensor(&[2, 2], vec![0.0; 4]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_grad_of_sum_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a_data = rand_vec(&mut rng, 5 * 7, -1.0, 1.0);
    let b_data = rand_vec(&mut rng, 7 * 3, -1.0, 1.0);

    let g = Graph::new();
    let a = g.var(&[5, 7], a_data.clone());
    let b = g.tensor(&[7, 3], b_data.clone());
    let loss = a.matmul(&b).unwrap().sum_all();
    loss.backward().unwrap();
    let grad = a.grad().unwrap();
    // d sum(A·B) / dA[i,p] = Σ_j B[p,j]
    for i in 0..5 {
        for p in 0..7 {
            let expect: f64 = (0..3).map(|j| b_data[p * 3 + j]).sum();
            assert!((grad[i * 7 + p] - expect).abs() < 1e-12);
        }
    }
    // and the same gradient agrees with the finite-difference oracle
    let b_cl = b_data.clone();
    let err = gradcheck(
        move |gr, t| {
            let bb = gr.tensor(&[7, 3], b_cl.clone());
            Ok(t.matmul(&bb)?.sum_all())
        },
        &[5, 7],
        &a_data,
    )
    .unwrap();
    assert!(err <= 1e-6, "err = {err}");
}

#[test]
fn softmax_uniform_logits() {
    let g = Graph::new();
    let x = g.tensor(&[3], vec![0.0, 0.0, 0.0]);
    let y = x.softmax(0).unwrap().value();
    for v in y {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_stable_for_huge_logits() {
    let g = Graph::new();
    let x = g.tensor(&[2], vec![1000.0, 0.0]);
    let y = x.softmax(0).unwrap().value();
    assert!(y[0].is_finite() && y[1].is_finite());
    assert!((y[0] - 1.0).abs() < 1e-12);
    assert!(y[1] < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::new();
    let x = g.tensor(&[4, 6], rand_vec(&mut rng, 24, -50.0, 50.0));
    let y = x.softmax(1).unwrap().value();
    for r in 0..4 {
        let s: f64 = y[r * 6..(r + 1) * 6].iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_vec(&mut rng, 12, -2.0, 2.0);
    // weighted sum makes the softmax jacobian non-trivial
    let w = rand_vec(&mut rng, 12, -1.0, 1.0);
    let err = gradcheck(
        move |gr, t| {
            let wt = gr.tensor(&[3, 4], w.clone());
            Ok(t.softmax(1)?.mul(&wt).sum_all())
        },
        &[3, 4],
        &x,
    )
    .unwrap();
    assert!(err <= 1e-6, "err = {err}");
}

#[test]
fn layer_norm_constant_vector_is_zero() {
    let g = Graph::new();
    let x = g.tensor(&[4], vec![7.5; 4]);
    let y = x.layer_norm(0).unwrap().value();
    for v in y {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn layer_norm_two_element_symmetry() {
    let g = Graph::new();
    let x = g.tensor(&[2], vec![1.0, 3.0]);
    let y = x.layer_norm(0).unwrap().value();
    // mean 2, std 1: [-1, 1] up to the epsilon inside the square root
    assert!((y[0] + 1.0).abs() < 1e-4);
    assert!((y[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_vec(&mut rng, 10, -2.0, 2.0);
    let w = rand_vec(&mut rng, 10, -1.0, 1.0);
    let err = gradcheck(
        move |gr, t| {
            let wt = gr.tensor(&[2, 5], w.clone());
            Ok(t.layer_norm(1)?.mul(&wt).sum_all())
        },
        &[2, 5],
        &x,
    )
    .unwrap();
    assert!(err <= 1e-5, "err = {err}");
}

#[test]
fn layer_norm_rejects_short_axis() {
    let g = Graph::new();
    let x = g.tensor(&[1, 3], vec![0.0; 3]);
    assert!(x.layer_norm(0).is_err());
}

#[test]
fn depthwise_impulse_response_is_kernel_footprint() {
    let g = Graph::new();
    let mut img = vec![0.0; 7 * 7];
    img[3 * 7 + 3] = 1.0;
    let x = g.tensor(&[1, 7, 7], img);
    let k = g.tensor(&[1, 3, 3], vec![1.0; 9]);
    let y = x.depthwise_conv2d(&k, 1).unwrap().value();
    for yy in 0..7 {
        for xx in 0..7 {
            let inside = (2..=4).contains(&yy) && (2..=4).contains(&xx);
            assert_eq!(y[yy * 7 + xx], if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn depthwise_dilation_two_spreads_to_5x5_lattice() {
    let g = Graph::new();
    let mut img = vec![0.0; 9 * 9];
    img[4 * 9 + 4] = 1.0;
    let x = g.tensor(&[1, 9, 9], img);
    let k = g.tensor(&[1, 3, 3], vec![1.0; 9]);
    let y = x.depthwise_conv2d(&k, 2).unwrap().value();
    for yy in 0..9i64 {
        for xx in 0..9i64 {
            let on_lattice = (yy - 4).abs() <= 2
                && (xx - 4).abs() <= 2
                && (yy - 4) % 2 == 0
                && (xx - 4) % 2 == 0;
            assert_eq!(y[(yy * 9 + xx) as usize], if on_lattice { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn depthwise_matches_nested_loop_reference() {
    // independent nested-loop convolution, written directly from the
    // definition with explicit zero padding
    fn reference(x: &[f64], k: &[f64], ch: usize, h: usize, w: usize, ks: usize, d: usize) -> Vec<f64> {
        let pad = (d * (ks - 1) / 2) as isize;
        let mut out = vec![0.0; ch * h * w];
        for c in 0..ch {
            for oy in 0..h as isize {
                for ox in 0..w as isize {
                    let mut s = 0.0;
                    for ky in 0..ks as isize {
                        for kx in 0..ks as isize {
                            let iy = oy + ky * d as isize - pad;
                            let ix = ox + kx * d as isize - pad;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                s += x[(c * h + iy as usize) * w + ix as usize]
                                    * k[(c * ks as usize + ky as usize) * ks + kx as usize];
                            }
                        }
                    }
                    out[(c * h + oy as usize) * w + ox as usize] = s;
                }
            }
        }
        out
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x_data = rand_vec(&mut rng, 4 * 6 * 6, -1.0, 1.0);
    let k_data = rand_vec(&mut rng, 4 * 9, -1.0, 1.0);
    for d in [1usize, 2] {
        let g = Graph::new();
        let x = g.tensor(&[4, 6, 6], x_data.clone());
        let k = g.tensor(&[4, 3, 3], k_data.clone());
        let y = x.depthwise_conv2d(&k, d).unwrap().value();
        let y_ref = reference(&x_data, &k_data, 4, 6, 6, 3, d);
        let max = y
            .iter()
            .zip(&y_ref)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-12, "dilation {d}: max err {max}");
    }
}

#[test]
fn depthwise_rejects_even_kernel() {
    let g = Graph::new();
    let x = g.tensor(&[1, 4, 4], vec![0.0; 16]);
    let k = g.tensor(&[1, 2, 2], vec![0.0; 4]);
    assert!(matches!(
        x.depthwise_conv2d(&k, 1),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn depthwise_commutes_with_channel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (ch, h, w) = (3, 5, 5);
    let x_data = rand_vec(&mut rng, ch * h * w, -1.0, 1.0);
    let k_data = rand_vec(&mut rng, ch * 9, -1.0, 1.0);
    let perm = [2usize, 0, 1];

    let g = Graph::new();
    let x = g.tensor(&[ch, h, w], x_data.clone());
    let k = g.tensor(&[ch, 3, 3], k_data.clone());
    let y = x.depthwise_conv2d(&k, 1).unwrap().value();

    let permute = |src: &[f64], block: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for (new_c, &old_c) in perm.iter().enumerate() {
            out[new_c * block..(new_c + 1) * block]
                .copy_from_slice(&src[old_c * block..(old_c + 1) * block]);
        }
        out
    };
    let g2 = Graph::new();
    let xp = g2.tensor(&[ch, h, w], permute(&x_data, h * w));
    let kp = g2.tensor(&[ch, 3, 3], permute(&k_data, 9));
    let yp = xp.depthwise_conv2d(&kp, 1).unwrap().value();
    assert_eq!(yp, permute(&y, h * w));
}

#[test]
fn sigmoid_at_zero() {
    let g = Graph::new();
    let y = g.tensor(&[1], vec![0.0]).sigmoid();
    assert_eq!(y.value(), vec![0.5]);
}

#[test]
fn unfold_center_reads_sub_block() {
    let g = Graph::new();
    let data: Vec<f64> = (0..25).map(|i| i as f64).collect();
    let x = g.tensor(&[1, 5, 5], data);
    let u = x.unfold_neighborhood(1).unwrap();
    assert_eq!(u.shape(), &[9, 1, 5, 5]);
    let v = u.value();
    // at center position (2,2), the 9 slots are the 3x3 sub-block
    let center = 2 * 5 + 2;
    let expect = [6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0];
    for o in 0..9 {
        assert_eq!(v[o * 25 + center], expect[o]);
    }
}

#[test]
fn unfold_corner_zero_pads() {
    let g = Graph::new();
    let data: Vec<f64> = (1..=25).map(|i| i as f64).collect();
    let x = g.tensor(&[1, 5, 5], data);
    let u = x.unfold_neighborhood(2).unwrap().value();
    // at the (0,0) corner with d = 2, offsets reaching outside are exactly 0
    for (o, (dy, dx)) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
        .iter()
        .enumerate()
    {
        let (sy, sx) = (dy * 2, dx * 2);
        let expect = if sy < 0 || sx < 0 {
            0.0
        } else {
            (sy * 5 + sx + 1) as f64
        };
        assert_eq!(u[o * 25], expect, "offset ({dy},{dx})");
    }
}

#[test]
fn unfold_rejects_zero_dilation() {
    let g = Graph::new();
    let x = g.tensor(&[1, 3, 3], vec![0.0; 9]);
    assert!(matches!(
        x.unfold_neighborhood(0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn unfold_respects_chebyshev_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x_data = rand_vec(&mut rng, 7 * 7, -1.0, 1.0);
    for d in [1usize, 2] {
        let g = Graph::new();
        let x = g.tensor(&[1, 7, 7], x_data.clone());
        let base = x.unfold_neighborhood(d).unwrap().value();
        // perturbing a pixel farther than d (Chebyshev) from p leaves slot values at p unchanged
        let p = (3usize, 3usize);
        let q = (3usize, 3 + d + 1);
        let mut x2 = x_data.clone();
        x2[q.0 * 7 + q.1] += 5.0;
        let g2 = Graph::new();
        let xt2 = g2.tensor(&[1, 7, 7], x2);
        let pert = xt2.unfold_neighborhood(d).unwrap().value();
        for o in 0..9 {
            assert_eq!(base[o * 49 + p.0 * 7 + p.1], pert[o * 49 + p.0 * 7 + p.1]);
        }
    }
}

#[test]
fn backward_sum_gives_ones() {
    let g = Graph::new();
    let x = g.var(&[3], vec![1.0, 2.0, 3.0]);
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
}

#[test]
fn backward_sum_of_squares() {
    let g = Graph::new();
    let x = g.var(&[2], vec![1.0, 2.0]);
    x.square().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let x = g.var(&[2], vec![1.0, 2.0]);
    assert!(matches!(x.backward(), Err(crate::Error::Usage(_))));
}

#[test]
fn backward_accumulates_across_fanout() {
    let g = Graph::new();
    let x = g.var(&[2], vec![3.0, -1.0]);
    let y = x.add(&x).sum_all(); // each element used twice
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    // a second backward accumulates unless the caller zeroes
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    g.zero_grads();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn tape_is_topologically_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = Graph::new();
    let x = g.var(&[2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0));
    let k = g.tensor(&[2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0));
    let _ = x
        .depthwise_conv2d(&k, 1)
        .unwrap()
        .silu()
        .layer_norm(0)
        .unwrap()
        .sum_all();
    assert!(g.check_topological());
}

/// Every recorded op passes the finite-difference oracle at random points.
#[test]
fn gradcheck_every_op() {
    type Builder = (&'static str, Box<dyn Fn(&Graph, &Tensor) -> Result<Tensor>>, Vec<usize>, (f64, f64));

    let cases: Vec<Builder> = vec![
        ("add", Box::new(|g, t| {
            let o = g.tensor(&[6], vec![0.3; 6]);
            Ok(t.add(&o).sum_all())
        }), vec![6], (-2.0, 2.0)),
        ("sub_mul", Box::new(|g, t| {
            let o = g.tensor(&[6], vec![0.7, -0.2, 1.0, 0.5, -1.1, 0.9]);
            Ok(t.sub(&o).mul(t).sum_all())
        }), vec![6], (-2.0, 2.0)),
        ("div", Box::new(|g, t| {
            let o = g.tensor(&[4], vec![1.3, -2.0, 0.8, 3.1]);
            Ok(t.div(&o).sum_all())
        }), vec![4], (-2.0, 2.0)),
        ("min_max", Box::new(|g, t| {
            let o = g.tensor(&[6], vec![0.1, -0.4, 0.9, -1.3, 0.2, 0.6]);
            Ok(t.min_elem(&o).add(&t.max_elem(&o)).sum_all())
        }), vec![6], (-2.0, 2.0)),
        ("neg_exp", Box::new(|_, t| Ok(t.neg().exp().sum_all())), vec![5], (-1.5, 1.5)),
        ("sqrt", Box::new(|_, t| Ok(t.sqrt().sum_all())), vec![5], (0.2, 3.0)),
        ("abs", Box::new(|_, t| Ok(t.abs().sum_all())), vec![5], (0.1, 2.0)),
        ("arctan", Box::new(|_, t| Ok(t.arctan().sum_all())), vec![5], (-2.0, 2.0)),
        ("sigmoid", Box::new(|_, t| Ok(t.sigmoid().sum_all())), vec![5], (-3.0, 3.0)),
        ("softplus", Box::new(|_, t| Ok(t.softplus().sum_all())), vec![5], (-3.0, 3.0)),
        ("silu", Box::new(|_, t| Ok(t.silu().sum_all())), vec![5], (-3.0, 3.0)),
        ("pow_const", Box::new(|_, t| Ok(t.pow_const(2.5).sum_all())), vec![5], (0.3, 2.0)),
        ("scale_addconst", Box::new(|_, t| Ok(t.scale(-1.7).add_const(0.4).square().sum_all())), vec![5], (-2.0, 2.0)),
        ("clamp_min", Box::new(|_, t| Ok(t.clamp_min(0.5).sum_all())), vec![6], (-2.0, 2.0)),
        ("mul_channel", Box::new(|g, t| {
            let w = g.var(&[3], vec![0.5, -1.0, 2.0]);
            Ok(t.mul_channel(&w).sum_all())
        }), vec![3, 2, 2], (-2.0, 2.0)),
        ("add_channel", Box::new(|g, t| {
            let b = g.tensor(&[3], vec![0.5, -1.0, 2.0]);
            Ok(t.add_channel(&b).square().sum_all())
        }), vec![3, 2, 2], (-2.0, 2.0)),
        ("mul_spatial", Box::new(|g, t| {
            let m = g.tensor(&[2, 2], vec![0.5, -1.0, 2.0, 0.1]);
            Ok(t.mul_spatial(&m).sum_all())
        }), vec![3, 2, 2], (-2.0, 2.0)),
        ("mul_add_scalar", Box::new(|g, t| {
            let s = g.tensor(&[], vec![1.3]);
            Ok(t.mul_scalar(&s).add_scalar(&s).sum_all())
        }), vec![4], (-2.0, 2.0)),
        ("add_row", Box::new(|g, t| {
            let b = g.tensor(&[3], vec![0.4, -0.6, 1.0]);
            Ok(t.add_row(&b).square().sum_all())
        }), vec![2, 3], (-2.0, 2.0)),
        ("sum_channels", Box::new(|_, t| Ok(t.sum_channels().square().sum_all())), vec![2, 3, 3], (-2.0, 2.0)),
        ("mean_spatial", Box::new(|_, t| Ok(t.mean_spatial().square().sum_all())), vec![2, 3, 3], (-2.0, 2.0)),
        ("reshape_transpose", Box::new(|_, t| {
            Ok(t.reshape(&[3, 4])?.transpose().square().sum_all())
        }), vec![12], (-2.0, 2.0)),
        ("concat_split", Box::new(|_, t| {
            let parts = t.split(0, &[2, 4])?;
            let back = Tensor::concat(&[&parts[1], &parts[0]], 0)?;
            Ok(back.square().sum_all())
        }), vec![6], (-2.0, 2.0)),
        ("gather_rows", Box::new(|_, t| {
            Ok(t.gather_rows(&[2, 0, 2]).square().sum_all())
        }), vec![3, 2], (-2.0, 2.0)),
        ("seq_roundtrip", Box::new(|_, t| {
            let perm = Rc::new(vec![3usize, 1, 0, 2, 5, 4]);
            Ok(t.to_seq(&perm).square().sum_all())
        }), vec![2, 2, 3], (-2.0, 2.0)),
        ("from_seq", Box::new(|_, t| {
            let perm = Rc::new(vec![3usize, 1, 0, 2, 5, 4]);
            Ok(t.from_seq(&perm, 2, 3).square().sum_all())
        }), vec![6, 2], (-2.0, 2.0)),
        ("matmul", Box::new(|g, t| {
            let b = g.var(&[3, 2], vec![0.2, -0.5, 1.1, 0.7, -0.3, 0.4]);
            Ok(t.matmul(&b)?.square().sum_all())
        }), vec![2, 3], (-2.0, 2.0)),
        ("softmax", Box::new(|g, t| {
            let w = g.tensor(&[2, 3], vec![1.0, -2.0, 0.5, 0.3, 1.2, -0.7]);
            Ok(t.softmax(1)?.mul(&w).sum_all())
        }), vec![2, 3], (-2.0, 2.0)),
        ("layer_norm", Box::new(|g, t| {
            let w = g.tensor(&[2, 4], vec![1.0, -2.0, 0.5, 0.3, 1.2, -0.7, 0.8, -0.1]);
            Ok(t.layer_norm(1)?.mul(&w).sum_all())
        }), vec![2, 4], (-2.0, 2.0)),
        ("dwconv", Box::new(|g, t| {
            let k = g.var(&[2, 3, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.1, -0.3,
                                           -0.1, 0.2, 0.0, 0.4, -0.5, 0.1, 0.0, 0.3, 0.2]);
            Ok(t.depthwise_conv2d(&k, 1)?.square().sum_all())
        }), vec![2, 4, 4], (-2.0, 2.0)),
        ("dwconv_dilated_strided", Box::new(|g, t| {
            let k = g.var(&[1, 3, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.1, -0.3]);
            Ok(t.depthwise_conv2d_strided(&k, 2, 2)?.square().sum_all())
        }), vec![1, 6, 6], (-2.0, 2.0)),
        ("shift2d", Box::new(|_, t| {
            Ok(t.shift2d(1, -1).square().sum_all())
        }), vec![2, 3, 3], (-2.0, 2.0)),
        ("bilinear_up", Box::new(|_, t| {
            Ok(t.bilinear_resize(5, 7).square().sum_all())
        }), vec![2, 3, 4], (-2.0, 2.0)),
        ("bilinear_down", Box::new(|_, t| {
            Ok(t.bilinear_resize(2, 2).square().sum_all())
        }), vec![2, 4, 4], (-2.0, 2.0)),
        ("selective_scan", Box::new(|_g, t| {
            // pack x, delta_raw, b, c, a_raw, d into one leaf via slicing
            let parts = t.split(0, &[8, 8, 8, 8, 4, 2])?;
            let x = parts[0].reshape(&[4, 2])?;
            let delta = parts[1].reshape(&[4, 2])?.softplus().add_const(1e-4);
            let b = parts[2].reshape(&[4, 2])?;
            let c = parts[3].reshape(&[4, 2])?;
            let a = parts[4].reshape(&[2, 2])?.abs().neg().add_const(-0.01);
            let d = &parts[5];
            let y = crate::ssm::selective_scan_t(&x, &delta, &b, &c, &a, d)?;
            Ok(y.square().sum_all())
        }), vec![38], (-1.5, 1.5)),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();
    for (name, f, shape, (lo, hi)) in &cases {
        let n: usize = shape.iter().product();
        for trial in 0..10 {
            let x0 = rand_vec(&mut rng, n, *lo, *hi);
            let err = gradcheck(|g, t| f(g, t), shape, &x0)
                .unwrap_or(f64::INFINITY);
            if err > 1e-5 {
                failures.push(format!("{name} trial {trial}: {err:.3e}"));
            }
        }
    }
    assert!(failures.is_empty(), "gradcheck failures: {failures:?}");
}

#[test]
fn elementwise_chain_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let g = Graph::new();
        let x = g.tensor(&[8], rand_vec(&mut rng, 8, -5.0, 5.0));
        let y = x
            .sigmoid()
            .silu()
            .softplus()
            .arctan()
            .exp()
            .scale(0.3)
            .add_const(-0.1);
        assert!(y.all_finite());
    }
}

#[test]
fn bilinear_ramp_roundtrip_is_exact() {
    // 2x downsample then 2x upsample of an affine ramp reproduces it.
    let (h, w) = (8, 8);
    let mut ramp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            ramp[y * w + x] = 0.7 * y as f64 - 0.3 * x as f64 + 1.5;
        }
    }
    let g = Graph::new();
    let x = g.tensor(&[1, h, w], ramp.clone());
    let down = x.bilinear_resize(h / 2, w / 2);
    let back = down.bilinear_resize(h, w).value();
    for i in 0..h * w {
        assert!((back[i] - ramp[i]).abs() <= 1e-12, "at {i}");
    }
}

#[test]
fn bilinear_constant_stays_constant() {
    let g = Graph::new();
    let x = g.tensor(&[1, 3, 3], vec![2.5; 9]);
    let y = x.bilinear_resize(7, 5).value();
    for v in y {
        assert!((v - 2.5).abs() < 1e-15);
    }
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::new();
    let x = g.var(&[2], vec![1.0, 2.0]);
    let y = x.detach().square().sum_all();
    y.backward().unwrap();
    assert!(x.grad().is_none());
}

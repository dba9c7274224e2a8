//! Central finite-difference checks for every differentiable op and for the
//! full encoder + group-contrastive composite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use smog_core::encoder::{BackboneKind, Binder, EncoderPair, NetworkSpec, ParamKind};
use smog_core::grouping::{GroupBank, InitMethod, UpdateVariant};
use smog_core::image::ImageBuf;
use smog_core::loss::{instance_infonce, pure_group_loss, smog_loss};
use smog_core::rng::{derive, Stream};
use smog_core::tensor::{Tape, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

/// Check the gradient of `build` (a scalar function of the listed leaves)
/// against central differences, for `SEEDS` random instantiations.
fn fd_check<F, G>(name: &str, shapes: &[&[usize]], gen: G, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
    G: Fn(&mut ChaCha8Rng, usize) -> f64,
{
    for seed in 0..SEEDS {
        let mut rng = derive(seed, Stream::Eval, &[0xf0]);
        let values: Vec<Vec<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (0..s.iter().product::<usize>())
                    .map(|_| gen(&mut rng, i))
                    .collect()
            })
            .collect();
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = shapes
                .iter()
                .zip(vals)
                .map(|(s, v)| tape.leaf(s, v.clone()))
                .collect();
            let loss = build(&mut tape, &leaves);
            tape.value(loss)[0]
        };
        // analytic gradients
        let mut tape = Tape::new();
        let leaves: Vec<Var> = shapes
            .iter()
            .zip(&values)
            .map(|(s, v)| tape.leaf(s, v.clone()))
            .collect();
        let loss = build(&mut tape, &leaves);
        tape.backward(loss).unwrap();
        for (li, leaf) in leaves.iter().enumerate() {
            let grad = tape.grad(*leaf).unwrap().to_vec();
            for j in 0..values[li].len() {
                let mut plus = values.clone();
                plus[li][j] += H;
                let mut minus = values.clone();
                minus[li][j] -= H;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * H);
                let err = rel_err(grad[j], num);
                assert!(
                    err < TOL,
                    "{name}: seed {seed} leaf {li}[{j}] analytic {} numeric {num} rel err {err}",
                    grad[j]
                );
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, _leaf: usize) -> f64 {
    rng.random_range(-1.0..1.0)
}

/// Weighted-sum reduction so non-scalar ops get a full Jacobian probe.
fn wsum(tape: &mut Tape, x: Var, w: Var) -> Var {
    let p = tape.mul(x, w).unwrap();
    tape.sum_all(p)
}

#[test]
fn grad_matmul() {
    fd_check("matmul", &[&[3, 4], &[4, 2], &[3, 2]], uniform, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        wsum(t, y, v[2])
    });
}

#[test]
fn grad_matmul_nt() {
    fd_check("matmul_nt", &[&[3, 4], &[2, 4], &[3, 2]], uniform, |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        wsum(t, y, v[2])
    });
}

#[test]
fn grad_conv2d_stride1_pad1() {
    fd_check(
        "conv2d s1 p1",
        &[&[1, 2, 4, 4], &[2, 2, 3, 3], &[1, 2, 4, 4]],
        uniform,
        |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
            wsum(t, y, v[2])
        },
    );
}

#[test]
fn grad_conv2d_stride2_pad0() {
    fd_check(
        "conv2d s2 p0",
        &[&[2, 1, 5, 5], &[2, 1, 3, 3], &[2, 2, 2, 2]],
        uniform,
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 0).unwrap();
            wsum(t, y, v[2])
        },
    );
}

#[test]
fn grad_batch_norm_2d() {
    fd_check(
        "batch_norm 2d",
        &[&[4, 3], &[3], &[3], &[4, 3]],
        uniform,
        |t, v| {
            let (mean, var) = t.channel_moments(v[0]);
            let y = t.batch_norm(v[0], v[1], v[2], &mean, &var, true, 1e-5).unwrap();
            wsum(t, y, v[3])
        },
    );
}

#[test]
fn grad_batch_norm_4d() {
    fd_check(
        "batch_norm 4d",
        &[&[2, 2, 3, 3], &[2], &[2], &[2, 2, 3, 3]],
        uniform,
        |t, v| {
            let (mean, var) = t.channel_moments(v[0]);
            let y = t.batch_norm(v[0], v[1], v[2], &mean, &var, true, 1e-5).unwrap();
            wsum(t, y, v[3])
        },
    );
}

#[test]
fn grad_l2_normalize() {
    // keep rows clear of the origin
    let gen = |rng: &mut ChaCha8Rng, _: usize| {
        let v: f64 = rng.random_range(0.2..1.0);
        if rng.random_range(0.0..1.0) < 0.5 {
            -v
        } else {
            v
        }
    };
    fd_check("l2_normalize", &[&[3, 4], &[3, 4]], gen, |t, v| {
        let y = t.l2_normalize(v[0]).unwrap();
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_elementwise_and_scale() {
    fd_check("add/sub/mul/scale", &[&[3, 3], &[3, 3], &[3, 3]], uniform, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(a, v[1]).unwrap();
        let m = t.mul(s, v[0]).unwrap();
        let sc = t.scale(m, 0.37);
        wsum(t, sc, v[2])
    });
}

#[test]
fn grad_add_bias() {
    fd_check("add_bias", &[&[4, 3], &[3], &[4, 3]], uniform, |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        wsum(t, y, v[2])
    });
}

#[test]
fn grad_relu_away_from_kink() {
    let gen = |rng: &mut ChaCha8Rng, _: usize| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_range(0.0..1.0) < 0.5 {
            -v
        } else {
            v
        }
    };
    fd_check("relu", &[&[3, 3], &[3, 3]], gen, |t, v| {
        let y = t.relu(v[0]);
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_global_avg_pool() {
    fd_check("gap", &[&[2, 3, 4, 4], &[2, 3]], uniform, |t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_reductions() {
    fd_check("mean_all", &[&[3, 4]], uniform, |t, v| t.mean_all(v[0]));
    fd_check("sum_all", &[&[3, 4]], uniform, |t, v| t.sum_all(v[0]));
}

#[test]
fn grad_concat_rows() {
    fd_check("concat_rows", &[&[2, 3], &[3, 3], &[5, 3]], uniform, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]]).unwrap();
        wsum(t, y, v[2])
    });
}

#[test]
fn grad_log_sum_exp() {
    fd_check("log_sum_exp", &[&[4, 5], &[4]], uniform, |t, v| {
        let y = t.log_sum_exp(v[0]).unwrap();
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_pick_cols() {
    fd_check("pick_cols", &[&[4, 5], &[4]], uniform, |t, v| {
        let y = t.pick_cols(v[0], &[0, 3, 2, 4]).unwrap();
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_gather_rows() {
    fd_check("gather_rows", &[&[5, 3], &[4, 3]], uniform, |t, v| {
        let y = t.gather_rows(v[0], &[0, 2, 2, 4]).unwrap();
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_row_scale() {
    fd_check("row_scale", &[&[4, 3], &[4, 3]], uniform, |t, v| {
        let y = t.row_scale(v[0], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        wsum(t, y, v[1])
    });
}

#[test]
fn grad_instance_infonce() {
    let gen = |rng: &mut ChaCha8Rng, _: usize| rng.random_range(0.2..1.0);
    fd_check("instance_infonce", &[&[4, 3], &[4, 3]], gen, |t, v| {
        let a = t.l2_normalize(v[0]).unwrap();
        let b = t.l2_normalize(v[1]).unwrap();
        instance_infonce(t, a, b, 0.1).unwrap()
    });
}

#[test]
fn grad_smog_loss() {
    let gen = |rng: &mut ChaCha8Rng, _: usize| rng.random_range(0.2..1.0);
    fd_check("smog_loss", &[&[4, 3], &[5, 3]], gen, |t, v| {
        let a = t.l2_normalize(v[0]).unwrap();
        let g = t.l2_normalize(v[1]).unwrap();
        smog_loss(t, a, &[0, 2, 1, 4], g, 0.1).unwrap()
    });
}

#[test]
fn grad_pure_group_loss() {
    let gen = |rng: &mut ChaCha8Rng, _: usize| rng.random_range(0.2..1.0);
    fd_check("pure_group_loss", &[&[4, 3]], gen, |t, v| {
        let g = t.l2_normalize(v[0]).unwrap();
        pure_group_loss(t, &[0, 1, 2], &[2, 1, 3], g, 0.1).unwrap()
    });
}

// ---------------------------------------------------------------------------
// conv forward vs an independent nested-loop oracle

fn naive_conv(
    input: &[f64],
    kernel: &[f64],
    dims: (usize, usize, usize, usize),
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * kernel[((fo * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_forward_matches_oracle_on_many_shapes() {
    let shapes: [(usize, usize, usize, usize, usize, usize, usize, usize); 12] = [
        (1, 1, 3, 3, 1, 3, 1, 1),
        (1, 1, 5, 5, 2, 3, 1, 0),
        (2, 3, 8, 8, 4, 3, 2, 1),
        (1, 2, 7, 5, 3, 3, 1, 1),
        (3, 1, 4, 4, 2, 1, 1, 0),
        (1, 4, 6, 6, 4, 3, 2, 1),
        (2, 2, 9, 9, 1, 5, 2, 2),
        (1, 3, 12, 12, 5, 3, 2, 1),
        (1, 1, 4, 7, 2, 3, 1, 1),
        (2, 2, 5, 5, 2, 5, 1, 2),
        (1, 2, 10, 6, 3, 3, 3, 1),
        (4, 1, 6, 6, 2, 3, 2, 0),
    ];
    for (si, &(n, c, h, w, f, k, stride, padding)) in shapes.iter().enumerate() {
        let mut rng = derive(si as u64, Stream::Eval, &[0xc0]);
        let input: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..f * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&[n, c, h, w], input.clone());
        let kv = tape.leaf(&[f, c, k, k], kernel.clone());
        let y = tape.conv2d(x, kv, stride, padding).unwrap();
        let oracle = naive_conv(&input, &kernel, (n, c, h, w), f, k, stride, padding);
        assert_eq!(tape.value(y), &oracle[..], "shape case {si}");
    }
}

// ---------------------------------------------------------------------------
// full composite: encoder forward + in-graph Eq. 4 + group-contrastive loss

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        backbone: BackboneKind::TinyCnn,
        widths: vec![3, 4],
        input_channels: 3,
        mlp_input_dim: 0,
        proj_hidden: 8,
        proj_dim: 4,
        pred_hidden: 8,
    }
}

fn composite_images(seed: u64, n: usize) -> Vec<ImageBuf> {
    let mut rng = derive(seed, Stream::Synthesis, &[1]);
    (0..n)
        .map(|_| {
            let mut img = ImageBuf::zeros(3, 8, 8);
            for v in img.data.iter_mut() {
                *v = rng.random_range(0.0..1.0);
            }
            img
        })
        .collect()
}

fn composite_bank(seed: u64, l: usize, d: usize) -> GroupBank {
    let mut warnings = Vec::new();
    GroupBank::init(
        InitMethod::Random,
        l,
        d,
        UpdateVariant::MomentumUpdate,
        seed,
        &[],
        &mut warnings,
    )
    .unwrap()
}

/// Forward + in-graph bank update + loss; optionally overrides one parameter
/// component and optionally detaches the anchor path. Returns the loss value
/// and (when `grad_of` is set) the analytic gradient for that component.
fn composite_eval(
    seed: u64,
    override_param: Option<(usize, usize, f64)>,
    grad_of: Option<(usize, usize)>,
    detach_anchor: bool,
) -> (f64, Option<f64>) {
    let mut pair = EncoderPair::build(&tiny_spec(), 0.99, seed).unwrap();
    if let Some((id, comp, value)) = override_param {
        pair.online.store.entries_mut()[id].data[comp] = value;
    }
    let images = composite_images(seed, 3);
    let refs: Vec<&ImageBuf> = images.iter().collect();
    let bank = composite_bank(seed, 5, 4);
    let assignment = [0usize, 2, 4];
    let labels = [1usize, 0, 3];

    let mut tape = Tape::new();
    let mut binder = Binder::new(&pair.online.store);
    let out = pair.forward_online(&mut tape, &mut binder, &refs, true).unwrap();
    let pred = out.pred.unwrap();
    let mut rs_rng = derive(seed, Stream::RandomSelect, &[0]);
    let update = bank
        .update_in_graph(&mut tape, pred, &assignment, 0.7, &mut rs_rng)
        .unwrap();
    let anchor = if detach_anchor {
        let vals = tape.value(pred).to_vec();
        tape.leaf(&[3, 4], vals)
    } else {
        pred
    };
    let loss = smog_loss(&mut tape, anchor, &labels, update.updated, 0.1).unwrap();
    let loss_value = tape.value(loss)[0];
    let grad = grad_of.map(|(id, comp)| {
        tape.backward(loss).unwrap();
        binder
            .var_of(id)
            .and_then(|v| tape.grad(v).map(|g| g[comp]))
            .unwrap_or(0.0)
    });
    (loss_value, grad)
}

#[test]
fn grad_full_encoder_composite() {
    for seed in 0..SEEDS {
        let pair = EncoderPair::build(&tiny_spec(), 0.99, seed).unwrap();
        let mut rng = derive(seed, Stream::Eval, &[0xab]);
        // probe a few random components of optimizable parameters
        let candidates: Vec<(usize, usize)> = pair
            .online
            .store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind != ParamKind::RunningStat)
            .map(|(id, e)| (id, rng.random_range(0..e.data.len())))
            .collect();
        let picks: Vec<(usize, usize)> = (0..4)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect();
        for (id, comp) in picks {
            let base = pair.online.store.entries()[id].data[comp];
            let (_, grad) = composite_eval(seed, None, Some((id, comp)), false);
            let (fp, _) = composite_eval(seed, Some((id, comp, base + H)), None, false);
            let (fm, _) = composite_eval(seed, Some((id, comp, base - H)), None, false);
            let num = (fp - fm) / (2.0 * H);
            let a = grad.unwrap();
            let err = rel_err(a, num);
            assert!(
                err < TOL,
                "composite seed {seed} entry {id}[{comp}]: analytic {a} numeric {num} err {err}"
            );
        }
    }
}

#[test]
fn gradient_flows_through_group_update_alone() {
    // with the anchor detached, the only path to the encoder parameters is
    // the in-graph bank update; gradients must still be nonzero
    let mut pair = EncoderPair::build(&tiny_spec(), 0.99, 7).unwrap();
    let images = composite_images(7, 3);
    let refs: Vec<&ImageBuf> = images.iter().collect();
    let bank = composite_bank(7, 5, 4);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&pair.online.store);
    let out = pair.forward_online(&mut tape, &mut binder, &refs, true).unwrap();
    let pred = out.pred.unwrap();
    let mut rs_rng = derive(7, Stream::RandomSelect, &[0]);
    let update = bank
        .update_in_graph(&mut tape, pred, &[0, 2, 4], 0.7, &mut rs_rng)
        .unwrap();
    let anchor_vals = tape.value(pred).to_vec();
    let anchor = tape.leaf(&[3, 4], anchor_vals);
    let loss = smog_loss(&mut tape, anchor, &[1, 0, 3], update.updated, 0.1).unwrap();
    tape.backward(loss).unwrap();
    let mut total = 0.0;
    for (id, var) in binder.bound() {
        if pair.online.store.entries()[id].kind == ParamKind::RunningStat {
            continue;
        }
        if let Some(g) = tape.grad(var) {
            total += g.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    assert!(
        total > 1e-8,
        "no gradient reached the encoder through the group update (sum {total})"
    );
}

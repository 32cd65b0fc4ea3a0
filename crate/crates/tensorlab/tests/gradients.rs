use proptest::prelude::*;
use tensorlab::gradcheck::{self, GradReport};
use tensorlab::{Graph, Result, Rng, Tensor, Var};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn assert_passes(name: &str, r: GradReport) {
    assert!(
        r.passes(TOL),
        "{name}: max rel err {:.3e} at {:?} over {} entries",
        r.max_rel_err,
        r.worst,
        r.checked
    );
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = g.constant(Tensor::randn(g.shape(y), &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn conv3d_sum_gradients() {
    let mut rng = Rng::new(1);
    let x = randn(&[2, 4, 4, 4], &mut rng);
    let k = randn(&[3, 2, 3, 3, 3], &mut rng);
    let r = gradcheck::check(&[x, k], H, None, &mut rng, |g, v| {
        let y = g.conv3d(v[0], v[1], None, 1, 1)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert_passes("conv3d", r);
}

#[test]
fn conv3d_strided_with_bias() {
    let mut rng = Rng::new(2);
    let x = randn(&[2, 5, 4, 6], &mut rng);
    let k = randn(&[3, 2, 3, 3, 3], &mut rng);
    let b = randn(&[3], &mut rng);
    let r = gradcheck::check(&[x, k, b], H, None, &mut rng, |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
        probe(g, y, 7)
    })
    .unwrap();
    assert_passes("conv3d stride 2", r);
}

#[test]
fn conv3d_ones_centre_is_27() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 3, 3, 3]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
    let y = g.conv3d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data()[13], 27.0);
    assert_eq!(g.value(y).data()[0], 8.0);
}

#[test]
fn conv3d_identity_kernel() {
    let mut rng = Rng::new(3);
    for k in [1usize, 3, 5] {
        let x = Tensor::<f32>::randn(&[2, 4, 5, 3], &mut rng);
        let mut kern = Tensor::<f32>::zeros(&[2, 2, k, k, k]);
        let c = k / 2;
        for ch in 0..2 {
            kern.data_mut()[(((ch * 2 + ch) * k + c) * k + c) * k + c] = 1.0;
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kern);
        let y = g.conv3d(xv, kv, None, 1, k / 2).unwrap();
        assert_eq!(g.value(y), &x, "k = {k}");
    }
}

#[test]
fn conv3d_channel_mismatch_is_descriptive() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    let err = g.conv3d(x, k, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("c_in"), "{err}");
}

fn group_norm_oracle(x: &Tensor<f64>, groups: usize, eps: f64) -> Vec<f64> {
    let c = x.shape()[0];
    let m = x.numel() / c;
    let per = c / groups;
    let mut out = vec![0.0; x.numel()];
    for gi in 0..groups {
        let mut sum = 0.0;
        let mut n = 0.0;
        for ch in gi * per..(gi + 1) * per {
            for i in 0..m {
                sum += x.data()[ch * m + i];
                n += 1.0;
            }
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for ch in gi * per..(gi + 1) * per {
            for i in 0..m {
                ss += (x.data()[ch * m + i] - mean).powi(2);
            }
        }
        let var = ss / n;
        for ch in gi * per..(gi + 1) * per {
            for i in 0..m {
                out[ch * m + i] = (x.data()[ch * m + i] - mean) / (var + eps).sqrt();
            }
        }
    }
    out
}

#[test]
fn group_norm_matches_two_pass_loops() {
    let mut rng = Rng::new(4);
    let x = randn(&[4, 2, 2, 2], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.group_norm(xv, gamma, beta, 2, 1e-5).unwrap();
    let oracle = group_norm_oracle(&x, 2, 1e-5);
    for (a, b) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn group_norm_edge_cases() {
    // Already standardized groups pass through: four +1 and four -1 per
    // group have zero mean and unit variance exactly.
    let mut rng = Rng::new(5);
    let mut signs: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    rng.shuffle(&mut signs[..8]);
    rng.shuffle(&mut signs[8..]);
    let standardized = Tensor::new(&[2, 2, 2, 2], signs).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(standardized.clone());
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.group_norm(xv, gamma, beta, 2, 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(&standardized) < 1e-5);

    // Constant input leaves only the shift.
    let c = g.constant(Tensor::full(&[2, 2, 2, 2], 0.7));
    let shift = g.constant(Tensor::new(&[2], vec![0.25, -1.0]).unwrap());
    let y = g.group_norm(c, gamma, shift, 1, 1e-5).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let want = if i < 8 { 0.25 } else { -1.0 };
        assert!((v - want).abs() < 1e-9);
    }

    assert!(g.group_norm(xv, gamma, beta, 3, 1e-5).is_err());
    assert!(g.group_norm(xv, gamma, beta, 2, 0.0).is_err());
}

#[test]
fn group_norm_gradients() {
    let mut rng = Rng::new(6);
    let x = randn(&[4, 3, 2, 3], &mut rng);
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng);
    let beta = randn(&[4], &mut rng);
    let r = gradcheck::check(&[x, gamma, beta], H, None, &mut rng, |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
        probe(g, y, 8)
    })
    .unwrap();
    assert_passes("group_norm", r);
}

#[test]
fn conv_groupnorm_mean_pipeline() {
    let mut rng = Rng::new(7);
    let x = randn(&[2, 4, 4, 2], &mut rng);
    let k = randn(&[4, 2, 3, 3, 3], &mut rng);
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng);
    let beta = randn(&[4], &mut rng);
    let r = gradcheck::check(&[x, k, gamma, beta], H, None, &mut rng, |g, v| {
        let y = g.conv3d(v[0], v[1], None, 1, 1)?;
        let n = g.group_norm(y, v[2], v[3], 2, 1e-5)?;
        let s = g.silu(n);
        let sq = g.square(s);
        Ok(g.mean(sq))
    })
    .unwrap();
    assert_passes("conv -> gn -> mean", r);
}

#[test]
fn elementwise_gradients() {
    let mut rng = Rng::new(8);
    let a = randn(&[3, 4], &mut rng);
    let b = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut rng);
    let r = gradcheck::check(&[a, b], H, None, &mut rng, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let q = g.div(m, v[1])?;
        let sc = g.scale(q, 0.3);
        let sh = g.add_scalar(sc, 2.0);
        let l = g.log(sh);
        let sq = g.sqrt(v[1]);
        let r = g.recip(sq);
        let e = g.exp(r);
        let t = g.tanh(l);
        let sg = g.sigmoid(e);
        let si = g.silu(v[0]);
        let ab = g.abs(si);
        let c = g.clamp(v[0], -0.8, 0.8);
        let total = g.concat(&[t, sg, ab, c])?;
        probe(g, total, 9)
    })
    .unwrap();
    assert_passes("elementwise", r);
}

#[test]
fn channel_and_matrix_gradients() {
    let mut rng = Rng::new(9);
    let x = randn(&[3, 2, 2, 2], &mut rng);
    let v = randn(&[3], &mut rng);
    let m = randn(&[8, 5], &mut rng);
    let r = gradcheck::check(&[x, v, m], H, None, &mut rng, |g, p| {
        let a = g.add_channel(p[0], p[1])?;
        let b = g.mul_channel(a, p[1])?;
        let flat = g.reshape(b, &[3, 8])?;
        let mm = g.matmul(flat, p[2])?;
        let tt = g.transpose(mm)?;
        let sm = g.softmax(tt);
        let nr = g.narrow(sm, 1, 3)?;
        let up = g.upsample2(p[0])?;
        let up_flat = g.reshape(up, &[3, 64])?;
        let l1 = probe(g, nr, 10)?;
        let l2 = probe(g, up_flat, 11)?;
        g.add(l1, l2)
    })
    .unwrap();
    assert_passes("channel/matrix", r);
}

#[test]
fn channel_statistics_gradients() {
    let mut rng = Rng::new(10);
    let x = randn(&[3, 2, 3, 2], &mut rng);
    let r = gradcheck::check(&[x], H, None, &mut rng, |g, p| {
        let mu = g.channel_mean(p[0]);
        let var = g.channel_var(p[0]);
        let l1 = probe(g, mu, 12)?;
        let l2 = probe(g, var, 13)?;
        g.add(l1, l2)
    })
    .unwrap();
    assert_passes("channel stats", r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_conv_shapes_pass_fd(
        c_in in 1usize..3, c_out in 1usize..3,
        w in 2usize..5, h in 2usize..5, d in 2usize..4,
        stride in 1usize..3, seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let x = randn(&[c_in, w, h, d], &mut rng);
        let k = randn(&[c_out, c_in, 3, 3, 3], &mut rng);
        let r = gradcheck::check(&[x, k], H, Some(20), &mut rng, |g, v| {
            let y = g.conv3d(v[0], v[1], None, stride, 1)?;
            probe(g, y, seed)
        }).unwrap();
        prop_assert!(r.passes(TOL), "{:?}", r);
    }

    #[test]
    fn conv_identity_kernel_is_identity(w in 1usize..6, h in 1usize..6, d in 1usize..6, seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f32>::randn(&[1, w, h, d], &mut rng);
        let mut k = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        k.data_mut()[13] = 1.0;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k);
        let y = g.conv3d(xv, kv, None, 1, 1).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }
}

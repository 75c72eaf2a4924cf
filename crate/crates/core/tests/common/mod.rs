//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use condvid::backbone::{Backbone, BackboneConfig};
use condvid::pipeline::ConditionImage;
use condvid::rng::normal_tensor;
use condvid::traj::{BoxGroup, TrajectorySpec};
use condvid::{Result, SparseMap, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

pub fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(seed, "test", shape).unwrap()
}

pub fn randn32(seed: u64, shape: &[usize]) -> Tensor {
    normal_tensor(seed, "test", shape).unwrap()
}

pub type Op = (&'static str, Box<dyn Fn(&Var<f64>, u64) -> condvid::Result<Var<f64>>>, Vec<usize>);

/// Every differentiable op with an input domain where it is smooth.
pub fn registered_ops() -> Vec<Op> {
    let other = |seed: u64, shape: &[usize]| Var::constant(randn(seed ^ 77, shape));
    vec![
        ("add", Box::new(move |x, s| x.add(&other(s, &[3, 4]))), vec![3, 4]),
        ("add_broadcast", Box::new(move |x, s| other(s, &[2, 3, 4]).add(x)), vec![3, 4]),
        ("sub", Box::new(move |x, s| other(s, &[3, 4]).sub(x)), vec![3, 4]),
        ("mul", Box::new(move |x, s| x.mul(&other(s, &[3, 4]))), vec![3, 4]),
        ("mul_broadcast", Box::new(move |x, s| other(s, &[2, 3, 4]).mul(x)), vec![1, 4]),
        (
            "div",
            Box::new(move |x, s| {
                let d = Var::constant(randn(s ^ 77, &[3, 4]).map(|v| v.abs() + 1.0));
                x.div(&d)
            }),
            vec![3, 4],
        ),
        (
            "div_denominator",
            Box::new(move |x, s| {
                let den = x.square()?.add_scalar(1.0)?;
                other(s, &[3, 4]).div(&den)
            }),
            vec![3, 4],
        ),
        ("add_scalar", Box::new(|x, _| x.add_scalar(0.7)), vec![5]),
        ("mul_scalar", Box::new(|x, _| x.mul_scalar(-1.3)), vec![5]),
        ("neg", Box::new(|x, _| x.neg()), vec![5]),
        ("square", Box::new(|x, _| x.square()), vec![2, 3]),
        ("sqrt", Box::new(|x, _| x.square()?.add_scalar(0.5)?.sqrt()), vec![2, 3]),
        ("exp", Box::new(|x, _| x.exp()), vec![2, 3]),
        ("silu", Box::new(|x, _| x.silu()), vec![2, 3]),
        ("sum_all", Box::new(|x, _| x.sum_all()), vec![2, 3]),
        ("sum_axis", Box::new(|x, _| x.sum_axis(1)), vec![2, 3, 2]),
        ("mean_axis", Box::new(|x, _| x.mean_axis(0)), vec![2, 3, 2]),
        ("softmax", Box::new(|x, _| x.softmax(1)), vec![3, 5]),
        ("matmul", Box::new(move |x, s| x.matmul(&other(s, &[4, 2]))), vec![3, 4]),
        ("matmul_rhs", Box::new(move |x, s| other(s, &[2, 3, 4]).matmul(x)), vec![2, 4, 3]),
        ("reshape", Box::new(|x, _| x.reshape([6, 2])), vec![3, 4]),
        ("permute", Box::new(|x, _| x.permute(&[2, 0, 1])), vec![2, 3, 4]),
        ("transpose_last2", Box::new(|x, _| x.transpose_last2()), vec![2, 3, 4]),
        ("narrow", Box::new(|x, _| x.narrow(1, 1, 2)), vec![2, 4]),
        ("concat", Box::new(move |x, s| Var::concat(&[x, &other(s, &[1, 3]), x], 0)), vec![2, 3]),
        ("broadcast_to", Box::new(|x, _| x.broadcast_to(&[2, 3, 4])), vec![3, 1]),
        (
            "sparse",
            Box::new(|x, _| {
                let map = SparseMap::weighted(
                    [4],
                    [3],
                    vec![vec![(0, 0.5), (1, 0.5)], vec![(3, 2.0)], vec![(2, -1.0), (0, 0.25)]],
                )?;
                x.sparse(&Arc::new(map))
            }),
            vec![4],
        ),
    ]
}

/// Relative L2 gap between the tape gradient of `sum(w ⊙ f(x))` and central
/// differences with step `h`, for fixed random weights `w`.
pub fn fd_rel_err(x: &Tensor<f64>, seed: u64, h: f64, f: impl Fn(&Var<f64>) -> Result<Var<f64>>) -> f64 {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone()).unwrap();
    let y = f(&leaf).unwrap();
    let w = Var::constant(normal_tensor(seed ^ 0x5eed, "weights", y.shape()).unwrap());
    let loss = y.mul(&w).unwrap().sum_all().unwrap();
    let grads = tape.backward(&loss).unwrap();
    let analytic = grads.get(&leaf).cloned().unwrap_or_else(|| x.zeros_like());

    let scalar = |t: &Tensor<f64>| -> f64 {
        let y = f(&Var::constant(t.clone())).unwrap();
        y.value().data().iter().zip(w.value().data()).map(|(a, b)| a * b).sum()
    };
    let mut numeric = vec![0.0; x.numel()];
    let mut data = x.to_vec();
    for (i, g) in numeric.iter_mut().enumerate() {
        let orig = data[i];
        data[i] = orig + h;
        let up = scalar(&Tensor::new(x.shape().to_vec(), data.clone()).unwrap());
        data[i] = orig - h;
        let down = scalar(&Tensor::new(x.shape().to_vec(), data.clone()).unwrap());
        data[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    let numeric = Tensor::new(x.shape().to_vec(), numeric).unwrap();
    let denom = numeric.l2_norm().max(analytic.l2_norm()).max(1e-12);
    analytic.sub(&numeric).unwrap().l2_norm() / denom
}

/// Small backbone used where the default 4×16×16 scale is not the point.
pub fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        base_width: 16,
        frames: 3,
        height: 8,
        width: 8,
        cond_dim: 16,
        seed,
        ..Default::default()
    }
}

pub fn cond_for(cfg: &BackboneConfig, seed: u64) -> Tensor {
    normal_tensor(seed, "embedding", &[cfg.cond_tokens, cfg.cond_dim]).unwrap()
}

pub fn build(cfg: &BackboneConfig) -> Backbone {
    Backbone::build(cfg).unwrap()
}

/// 64×64 condition image: a bright disc centred at `(cx, cy)` on a dark
/// background.
pub fn disc_image(cx: f64, cy: f64, radius: f64) -> ConditionImage {
    disc_image_sized(64, cx, cy, radius)
}

pub fn disc_image_sized(size: usize, cx: f64, cy: f64, radius: f64) -> ConditionImage {
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            px.extend_from_slice(if d < radius { &[230, 200, 60] } else { &[40, 40, 40] });
        }
    }
    ConditionImage::from_rgb(size, size, px).unwrap()
}

/// Disc at the left, boxes sliding right by `step` pixels per frame.
pub fn moving_disc_fixture(step: f64) -> (ConditionImage, TrajectorySpec) {
    let image = disc_image(20.0, 32.0, 10.0);
    let boxes = (0..4)
        .map(|j| {
            let dx = step * j as f64;
            [8.0 + dx, 20.0, 32.0 + dx, 44.0]
        })
        .collect();
    let spec = TrajectorySpec {
        groups: vec![BoxGroup { boxes, salient_k: 9 }],
        pca_dim: 64,
    };
    (image, spec)
}

/// Latent video `[f, 4, 16, 16]` holding a Gaussian bump per frame at
/// column `cx[j]`, row `cy`: positive on even channels, negative on odd.
pub fn bump_latent(cx: &[f64], cy: f64, amp: f64) -> Tensor {
    let f = cx.len();
    Tensor::from_fn([f, 4, 16, 16], |i| {
        let (fr, c, y, x) = (i / 1024, (i / 256) % 4, (i / 16) % 16, i % 16);
        let d2 = (x as f64 + 0.5 - cx[fr]).powi(2) + (y as f64 + 0.5 - cy).powi(2);
        let sign = if c % 2 == 0 { 1.0 } else { -0.5 };
        (amp * (sign * (-d2 / 8.0).exp() - 0.2)) as f32
    })
    .unwrap()
}

/// Top-`m` principal directions of the rows of `x: [rows, c]` from a dense
/// symmetric eigensolver, as orthonormal columns `[c, m]`.
pub fn pca_oracle(x: &[f64], c: usize, m: usize) -> nalgebra::DMatrix<f64> {
    let rows = x.len() / c;
    let data = nalgebra::DMatrix::from_row_slice(rows, c, x);
    let mean = data.row_mean();
    let centred = nalgebra::DMatrix::from_fn(rows, c, |r, k| data[(r, k)] - mean[k]);
    let cov = centred.transpose() * &centred / rows as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    nalgebra::DMatrix::from_fn(c, m, |i, k| eig.eigenvectors[(i, order[k])])
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal `[c, m]` bases: `asin` of the spectral norm of `(I − BBᵀ)A`.
pub fn max_principal_angle(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    let resid = a - b * (b.transpose() * a);
    let s = resid.singular_values().max();
    s.min(1.0).asin()
}

/// Optimal two-cluster SSE split of `values` by enumerating every
/// assignment of the distinct values to two nonempty sides. Returns the
/// SSE and, per input, whether it falls on the higher-mean side.
pub fn kmeans2_oracle(values: &[f64]) -> (f64, Vec<bool>) {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let n = distinct.len();
    assert!((2..=16).contains(&n), "oracle needs 2..=16 distinct values");
    let count = |v: f64| values.iter().filter(|&&x| x == v).count() as f64;
    let mut best = (f64::INFINITY, 0u32);
    for subset in 1..(1u32 << n) - 1 {
        let mut side = [(0.0, 0.0, 0.0); 2];
        for (k, &v) in distinct.iter().enumerate() {
            let s = &mut side[((subset >> k) & 1) as usize];
            let w = count(v);
            *s = (s.0 + w * v, s.1 + w * v * v, s.2 + w);
        }
        let sse: f64 = side.iter().map(|(s, sq, w)| sq - s * s / w).sum();
        if sse < best.0 - 1e-12 {
            best = (sse, subset);
        }
    }
    let side_of = |v: f64| (best.1 >> distinct.iter().position(|&d| d == v).unwrap()) & 1;
    let mean = |bit: u32| {
        let xs: Vec<f64> = values.iter().copied().filter(|&v| side_of(v) == bit).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let high = if mean(1) > mean(0) { 1 } else { 0 };
    (best.0, values.iter().map(|&v| side_of(v) == high).collect())
}

//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use adaring_core::ring::{FactorizationPlan, TrAdapterStack};
use adaring_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Full ring tensor by explicit summation over every bond index.
pub fn brute_ring(cores: &[Tensor]) -> Vec<f64> {
    let d = cores.len();
    let modes: Vec<usize> = cores.iter().map(|c| c.dims()[1]).collect();
    let bonds: Vec<usize> = cores.iter().map(|c| c.dims()[0]).collect();
    let total: usize = modes.iter().product();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; d];
    for slot in out.iter_mut() {
        let mut r = vec![0usize; d];
        let mut sum = 0.0;
        loop {
            let mut prod = 1.0;
            for k in 0..d {
                prod *= cores[k].at(&[r[k], idx[k], r[(k + 1) % d]]);
            }
            sum += prod;
            if !odometer(&mut r, &bonds) {
                break;
            }
        }
        *slot = sum;
        odometer(&mut idx, &modes);
    }
    out
}

/// Advances a row-major multi-index; false after wrapping to zero.
pub fn odometer(idx: &mut [usize], extents: &[usize]) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < extents[k] {
            return true;
        }
        idx[k] = 0;
    }
    false
}

/// Dense `(I, O)` adapter matrix of layer `l`, by brute force.
pub fn brute_layer_weight(stack: &TrAdapterStack, l: usize) -> Vec<Vec<f64>> {
    let plan = stack.plan();
    let p = plan.layer_index();
    let mut cores = stack.cores().to_vec();
    let (ra, rb) = (cores[p].dims()[0], cores[p].dims()[2]);
    let mut slice = Vec::with_capacity(ra * rb);
    for a in 0..ra {
        for b in 0..rb {
            slice.push(cores[p].at(&[a, l, b]));
        }
    }
    cores[p] = Tensor::from_vec(&[ra, 1, rb], slice).unwrap();
    let flat = brute_ring(&cores);
    let (i_w, o_w) = (plan.input_width(), plan.output_width());
    (0..i_w).map(|i| flat[i * o_w..(i + 1) * o_w].to_vec()).collect()
}

/// `y_o = Σ_i A[i][o] x_i`.
pub fn dense_matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let o_w = a[0].len();
    (0..o_w)
        .map(|o| a.iter().zip(x).map(|(row, xi)| row[o] * xi).sum())
        .collect()
}

/// Random factorization of a width ≤ `max_width` into at most 3 factors.
pub fn random_factors(rng: &mut ChaCha8Rng, max_width: usize) -> Vec<usize> {
    loop {
        let n = rng.gen_range(1..=3);
        let f: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
        if f.iter().product::<usize>() <= max_width {
            return f;
        }
    }
}

/// Random plan with `I, O ≤ 16`, ranks ≤ 4 and `L ≤ 6`.
pub fn random_plan(rng: &mut ChaCha8Rng) -> FactorizationPlan {
    let in_f = random_factors(rng, 16);
    let out_f = random_factors(rng, 16);
    let n = in_f.len() + out_f.len() + 2;
    let mut ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
    ranks[n - 1] = ranks[0];
    FactorizationPlan::new(in_f, out_f, rng.gen_range(1..=6), ranks).unwrap()
}

/// Stack whose every core, including the layer core, is random.
pub fn random_stack(rng: &mut ChaCha8Rng, plan: &FactorizationPlan) -> TrAdapterStack {
    let cores = (0..plan.num_cores())
        .map(|j| random_tensor(rng, &plan.core_shape(j)))
        .collect();
    TrAdapterStack::from_cores(plan.clone(), cores).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Stored scalar count by walking every core element.
pub fn enumerate_scalars(stack: &TrAdapterStack) -> usize {
    stack.cores().iter().map(|c| c.data().iter().count()).sum()
}

/// Axis-rolled copy: output axis `j` is input axis `(j + k) mod d`.
pub fn roll_axes(flat: &[f64], dims: &[usize], k: usize) -> Vec<f64> {
    let d = dims.len();
    let new_dims: Vec<usize> = (0..d).map(|j| dims[(j + k) % d]).collect();
    let mut out = Vec::with_capacity(flat.len());
    let mut idx = vec![0usize; d];
    for _ in 0..flat.len() {
        let mut off = 0;
        for a in 0..d {
            // original axis a sits at new position (a + d - k) % d
            off = off * dims[a] + idx[(a + d - k) % d];
        }
        out.push(flat[off]);
        odometer(&mut idx, &new_dims);
    }
    out
}

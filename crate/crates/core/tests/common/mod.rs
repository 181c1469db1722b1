#![allow(dead_code)]

use a4unet::candle::{DType, Device, Tensor, Var};
use a4unet::nn::ParamStore;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            scale * (-2.0 * u.ln()).sqrt() * t.cos()
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Per-tensor norm-wise relative error between backprop and central-difference
/// gradients of `sum(f(x)²)`. Checks the input and every parameter in `store`,
/// on at most `samples` coordinates each.
pub fn grad_check(
    store: &ParamStore,
    x: &Tensor,
    f: impl Fn(&Tensor) -> a4unet::Result<Tensor>,
    samples: usize,
    seed: u64,
) -> Vec<(String, f64)> {
    let mut rng = rng(seed);
    let input = Var::from_tensor(x).unwrap();
    let objective = |t: &Tensor| -> f64 { f(t).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() };
    let loss = f(input.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let mut vars = vec![("input".to_string(), input.clone())];
    vars.extend(store.vars());
    let eps = 1e-6;
    let mut report = Vec::new();
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = to_vec(var.as_tensor());
        let n = base.len();
        let idx: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                objective(input.as_tensor())
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            diff += (numeric - analytic[i]).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu).unwrap()).unwrap();
        // gradients with norm below 1e-4 are compared absolutely
        let scale = na.sqrt().max(nn.sqrt()).max(1e-4);
        let err = diff.sqrt() / scale;
        report.push((name, err));
    }
    report
}

pub fn worst(report: &[(String, f64)]) -> (String, f64) {
    report
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> Array2<u8> {
    let density: f64 = rng.gen_range(0.0..1.0);
    Array2::from_shape_fn((h, w), |_| {
        if rng.gen_bool(density) {
            rng.gen_range(1..=k)
        } else {
            0
        }
    })
}

/// Pixel-enumeration dice over the nonzero foreground.
pub fn dice_oracle(p: &Array2<u8>, g: &Array2<u8>) -> f64 {
    let (mut inter, mut sp, mut sg) = (0u64, 0u64, 0u64);
    for (&a, &b) in p.iter().zip(g.iter()) {
        inter += u64::from(a != 0 && b != 0);
        sp += u64::from(a != 0);
        sg += u64::from(b != 0);
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}

pub fn miou_oracle(p: &Array2<u8>, g: &Array2<u8>, k: u8) -> f64 {
    let mut total = 0.0;
    for c in 0..=k {
        let (mut inter, mut uni) = (0u64, 0u64);
        for (&a, &b) in p.iter().zip(g.iter()) {
            inter += u64::from(a == c && b == c);
            uni += u64::from(a == c || b == c);
        }
        total += if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
    }
    total / (k as f64 + 1.0)
}

fn boundary_points(m: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = m.dim();
    let at = |i: isize, j: isize| -> bool {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            false
        } else {
            m[[i as usize, j as usize]] != 0
        }
    };
    let mut out = Vec::new();
    for i in 0..h as isize {
        for j in 0..w as isize {
            if at(i, j) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(di, dj)| !at(i + di, j + dj)) {
                out.push((i as usize, j as usize));
            }
        }
    }
    out
}

fn percentile_oracle(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = p / 100.0 * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
}

/// All-pairs boundary distance oracle for the percentile Hausdorff distance.
pub fn hd_oracle(p: &Array2<u8>, g: &Array2<u8>, spacing: (f64, f64), pct: f64) -> Option<f64> {
    let (bp, bg) = (boundary_points(p), boundary_points(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let directed = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        let d: Vec<f64> = a
            .iter()
            .map(|&(i, j)| {
                b.iter()
                    .map(|&(k, l)| {
                        let dy = (i as f64 - k as f64) * spacing.0;
                        let dx = (j as f64 - l as f64) * spacing.1;
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        percentile_oracle(d, pct)
    };
    Some(directed(&bp, &bg).max(directed(&bg, &bp)))
}

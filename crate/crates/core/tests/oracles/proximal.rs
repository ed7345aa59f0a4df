//! Hinge-loss learners' reference: a Huber-smoothed hinge plus the same
//! penalty, minimized with FISTA, adaptive restart and continuation on the
//! smoothing width. The smoothing error is at most `mu / 2` per example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy)]
pub enum Penalty {
    /// `lambda ||w||^2`
    L2(f64),
    /// `lambda sum_g ||w_g||`
    Group(f64, usize),
}

pub struct Data {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Data {
    pub fn rows(&self, label: f64) -> Vec<Vec<f32>> {
        self.x
            .iter()
            .zip(&self.y)
            .filter(|(_, &y)| y == label)
            .map(|(r, _)| r.iter().map(|&v| v as f32).collect())
            .collect()
    }

    /// Same data with the f32 rounding the learners see.
    pub fn rounded(&self) -> Data {
        Data {
            x: self.x.iter().map(|r| r.iter().map(|&v| f64::from(v as f32)).collect()).collect(),
            y: self.y.clone(),
        }
    }

    pub fn scaled(&self, c: f64) -> Data {
        Data {
            x: self.x.iter().map(|r| r.iter().map(|v| v * c).collect()).collect(),
            y: self.y.clone(),
        }
    }
}

pub fn penalty(w: &[f64], p: Penalty) -> f64 {
    match p {
        Penalty::L2(l) => l * w.iter().map(|v| v * v).sum::<f64>(),
        Penalty::Group(l, len) => l * w.chunks(len).map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>(),
    }
}

pub fn objective(data: &Data, w: &[f64], b: f64, p: Penalty) -> f64 {
    let n = data.y.len() as f64;
    let hinge: f64 = data
        .x
        .iter()
        .zip(&data.y)
        .map(|(x, y)| {
            let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            (1.0 - y * (s + b)).max(0.0)
        })
        .sum();
    penalty(w, p) + hinge / n
}

pub fn smooth_loss(data: &Data, w: &[f64], b: f64, mu: f64) -> (f64, Vec<f64>, f64) {
    let n = data.y.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (x, y) in data.x.iter().zip(&data.y) {
        let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let z = 1.0 - y * (s + b);
        let (h, dh) = if z <= 0.0 {
            (0.0, 0.0)
        } else if z < mu {
            (z * z / (2.0 * mu), z / mu)
        } else {
            (z - mu / 2.0, 1.0)
        };
        loss += h / n;
        for (g, xj) in gw.iter_mut().zip(x) {
            *g -= dh * y * xj / n;
        }
        gb -= dh * y / n;
    }
    (loss, gw, gb)
}

pub fn prox(v: &[f64], step: f64, p: Penalty) -> Vec<f64> {
    match p {
        Penalty::L2(l) => v.iter().map(|x| x / (1.0 + 2.0 * step * l)).collect(),
        Penalty::Group(l, len) => v
            .chunks(len)
            .flat_map(|g| {
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = if n > step * l { 1.0 - step * l / n } else { 0.0 };
                g.iter().map(move |x| x * s).collect::<Vec<_>>()
            })
            .collect(),
    }
}

/// FISTA with backtracking, gradient restart and continuation on `mu`.
pub fn reference_solve(data: &Data, p: Penalty) -> (Vec<f64>, f64) {
    let dim = data.x[0].len();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let mut mu = 0.1;
    while mu > 1e-7 {
        let (mut zw, mut zb) = (w.clone(), b);
        let mut t = 1.0f64;
        let mut lip = 1.0f64;
        for _ in 0..20_000 {
            let (f, gw, gb) = smooth_loss(data, &zw, zb, mu);
            let (nw, nb) = loop {
                let step = 1.0 / lip;
                let cand: Vec<f64> = zw.iter().zip(&gw).map(|(z, g)| z - step * g).collect();
                let nw = prox(&cand, step, p);
                let nb = zb - step * gb;
                let (fn_, _, _) = smooth_loss(data, &nw, nb, mu);
                let dw: Vec<f64> = nw.iter().zip(&zw).map(|(a, z)| a - z).collect();
                let db = nb - zb;
                let lin: f64 = gw.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>() + gb * db;
                let quad = dw.iter().map(|d| d * d).sum::<f64>() + db * db;
                if fn_ <= f + lin + 0.5 * lip * quad + 1e-15 {
                    break (nw, nb);
                }
                lip *= 2.0;
            };
            // restart when the momentum direction opposes the step
            let dot: f64 = zw.iter().zip(&nw).zip(&w).map(|((z, n), o)| (z - n) * (n - o)).sum::<f64>()
                + (zb - nb) * (nb - b);
            let tn = if dot > 0.0 { 1.0 } else { (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0 };
            let beta = if dot > 0.0 { 0.0 } else { (t - 1.0) / tn };
            let change: f64 = nw.iter().zip(&w).map(|(a, o)| (a - o).abs()).fold((nb - b).abs(), f64::max);
            zw = nw.iter().zip(&w).map(|(n, o)| n + beta * (n - o)).collect();
            zb = nb + beta * (nb - b);
            w = nw;
            b = nb;
            t = tn;
            lip = (lip / 1.1).max(1e-3);
            if change < 1e-12 {
                break;
            }
        }
        mu /= 4.0;
    }
    (w, b)
}

pub fn support_of(w: &[f64], len: usize) -> Vec<bool> {
    w.chunks(len).map(|g| g.iter().any(|&v| v != 0.0)).collect()
}

/// Two classes separated along the first `informative` groups, with small
/// noise in the remaining ones.
pub fn toy(groups: usize, group_len: usize, informative: usize, n: usize, seed: u64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let label = if i % 2 == 0 { 1.0 } else { -1.0 };
        let row: Vec<f64> = (0..groups * group_len)
            .map(|j| {
                let g = j / group_len;
                if g < informative {
                    label * 0.5 + rng.gen_range(-0.6..0.6)
                } else {
                    rng.gen_range(-0.05..0.05)
                }
            })
            .collect();
        x.push(row);
        y.push(label);
    }
    Data { x, y }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

pub fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(|r| r.as_slice()).collect()
}

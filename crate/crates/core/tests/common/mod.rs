#![allow(dead_code)]

use evfl::data::{retain_sessions, DatasetConfig};
use evfl::features::{featurize, Design, RawFeatures};
use evfl::ingest::{generate_synthetic, SyntheticDepotSpec};
use evfl::models::Mlp;
use evfl::rng;
use rand::Rng;

/// Generated depot run through retention and featurization.
pub fn depot_rows(spec: &SyntheticDepotSpec) -> Vec<RawFeatures> {
    let depot = generate_synthetic(spec).expect("valid spec");
    let cfg = DatasetConfig::default();
    let (kept, _) = retain_sessions(&depot.sessions, &depot.series, &cfg);
    featurize(&kept, &depot.series, &cfg).0
}

pub fn random_design(n: usize, dim: usize, stations: usize, seed: u64) -> Design {
    let mut r = rng::stream(seed, &[0xD0]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let station = (0..n).map(|_| r.random_range(0..stations)).collect();
    let y = (0..n).map(|_| r.random_range(0.0..20.0)).collect();
    Design::from_rows(&rows, station, y)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `p`.
pub fn numeric_grad(p: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|j| {
            let orig = q[j];
            q[j] = orig + h;
            let up = f(&q);
            q[j] = orig - h;
            let down = f(&q);
            q[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Reference MLP forward written against the parameter layout by segment
/// name: embedding lookup, dense layers with ReLU and optional inverted
/// dropout multipliers, softplus output.
pub fn reference_mlp_predict(
    m: &Mlp,
    params: &[f64],
    x: &[f64],
    station: usize,
    masks: Option<&[Vec<f64>]>,
) -> f64 {
    let layout = m.layout();
    let seg = |name: &str| &params[layout.segment(name).expect("segment").range()];
    let e = m.spec.embedding_dim;
    let row = station.min(m.spec.embedding_cardinality - 1);
    let mut a: Vec<f64> = seg("embedding")[row * e..(row + 1) * e].to_vec();
    a.extend_from_slice(x);
    let n_layers = m.spec.hidden.len() + 1;
    for k in 0..n_layers {
        let w = seg(&format!("dense{k}.weight"));
        let b = seg(&format!("dense{k}.bias"));
        let fan_in = a.len();
        let mut z = vec![0.0; b.len()];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut acc = b[o];
            for i in 0..fan_in {
                acc += w[o * fan_in + i] * a[i];
            }
            *zo = acc;
        }
        if k + 1 == n_layers {
            let v = z[0];
            // log(1 + e^v), stable for both signs.
            return if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
        }
        a = z.iter().map(|v| v.max(0.0)).collect();
        if let Some(ms) = masks {
            for (v, s) in a.iter_mut().zip(&ms[k]) {
                *v *= s;
            }
        }
    }
    unreachable!()
}

pub fn reference_mlp_loss(
    m: &Mlp,
    params: &[f64],
    d: &Design,
    rows: &[usize],
    masks: Option<&evfl::models::DropoutMasks>,
) -> f64 {
    rows.iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mk = masks.map(|ms| ms.masks[slot].as_slice());
            let r = reference_mlp_predict(m, params, d.row(i), d.station[i], mk) - d.y[i];
            r * r
        })
        .sum::<f64>()
        / rows.len() as f64
}

pub fn reference_linear_loss(params: &[f64], d: &Design, rows: &[usize]) -> f64 {
    let dim = d.dim;
    rows.iter()
        .map(|&i| {
            let x = d.row(i);
            let pred: f64 = (0..dim).map(|j| params[j] * x[j]).sum::<f64>() + params[dim];
            (pred - d.y[i]).powi(2)
        })
        .sum::<f64>()
        / rows.len() as f64
}

//! Tabular MLP: station embedding concatenated with numeric features, ReLU
//! hidden layers with inverted dropout, Softplus output. Gradients are
//! computed by hand-written reverse mode.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linear::{axpy, dot};
use super::params::Layout;
use crate::error::{Error, Result};
use crate::features::Design;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub numeric_input_dim: usize,
    /// Embedding rows, including the reserved unknown-station row.
    pub embedding_cardinality: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(numeric_input_dim: usize, embedding_cardinality: usize) -> MlpSpec {
        MlpSpec {
            numeric_input_dim,
            embedding_cardinality,
            embedding_dim: 16,
            hidden: vec![128, 128, 64],
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_cardinality == 0 {
            return Err(Error::config("embedding_cardinality", "must be > 0"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    emb: usize,
    /// Hidden layers followed by the scalar output layer.
    layers: Vec<Dense>,
    n_params: usize,
}

/// Inverted-dropout multipliers (0 or `1/(1-p)`) per sample and hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub masks: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug)]
pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus`, for placing the initial output at a target level.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.max(1e-6).exp_m1().ln()
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Mlp> {
        spec.validate()?;
        let emb = spec.embedding_cardinality * spec.embedding_dim;
        let mut offset = emb;
        let mut fan_in = spec.embedding_dim + spec.numeric_input_dim;
        let mut layers = Vec::new();
        for &h in spec.hidden.iter().chain(std::iter::once(&1)) {
            let w = offset;
            let b = w + h * fan_in;
            offset = b + h;
            layers.push(Dense {
                w,
                b,
                fan_in,
                fan_out: h,
            });
            fan_in = h;
        }
        Ok(Mlp {
            spec,
            emb,
            layers,
            n_params: offset,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn layout(&self) -> Layout {
        let s = &self.spec;
        let hidden: Vec<String> = s.hidden.iter().map(|h| h.to_string()).collect();
        let arch = format!(
            "mlp(d={},stations={},emb={},hidden={},dropout={})",
            s.numeric_input_dim,
            s.embedding_cardinality,
            s.embedding_dim,
            hidden.join("-"),
            s.dropout_rate
        );
        let mut shapes: Vec<(String, Vec<usize>)> =
            vec![("embedding".into(), vec![s.embedding_cardinality, s.embedding_dim])];
        for (k, l) in self.layers.iter().enumerate() {
            shapes.push((format!("dense{k}.weight"), vec![l.fan_out, l.fan_in]));
            shapes.push((format!("dense{k}.bias"), vec![l.fan_out]));
        }
        let refs: Vec<(&str, Vec<usize>)> =
            shapes.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        Layout::new(arch, &refs)
    }

    /// Embeddings ~ N(0, 0.1); weights ~ U(±√(1/fan_in)); hidden biases 0;
    /// output bias placed so the initial prediction is `output_level`.
    pub fn init(&self, rng: &mut StreamRng, output_level: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        for v in &mut p[..self.emb] {
            *v = normal.sample(rng);
        }
        for l in &self.layers {
            let bound = (1.0 / l.fan_in as f64).sqrt();
            for v in &mut p[l.w..l.b] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        let out = self.layers.last().expect("output layer");
        p[out.b] = softplus_inverse(output_level);
        p
    }

    fn station_row(&self, station: usize) -> usize {
        station.min(self.spec.embedding_cardinality - 1)
    }

    fn input(&self, params: &[f64], x: &[f64], station: usize) -> Vec<f64> {
        let e = self.spec.embedding_dim;
        let r = self.station_row(station);
        let mut v = Vec::with_capacity(e + x.len());
        v.extend_from_slice(&params[r * e..(r + 1) * e]);
        v.extend_from_slice(x);
        v
    }

    pub fn sample_masks(&self, n: usize, rng: &mut StreamRng) -> DropoutMasks {
        let p = self.spec.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        DropoutMasks {
            masks: (0..n)
                .map(|_| {
                    self.spec
                        .hidden
                        .iter()
                        .map(|&h| {
                            (0..h)
                                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Per-layer pre-activations and post-activation (post-dropout) outputs.
    fn forward_trace(
        &self,
        params: &[f64],
        input: Vec<f64>,
        masks: Option<&[Vec<f64>]>,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let a = acts.last().expect("input");
            let z: Vec<f64> = (0..l.fan_out)
                .map(|o| dot(&params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in], a) + params[l.b + o])
                .collect();
            if k < last {
                let mut h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
                if let Some(m) = masks {
                    h.iter_mut().zip(&m[k]).for_each(|(v, s)| *v *= s);
                }
                acts.push(h);
            }
            pre.push(z);
        }
        (pre, acts)
    }

    pub fn forward(&self, params: &[f64], x: &[f64], station: usize, mode: Mode<'_>) -> Result<f64> {
        if x.len() != self.spec.numeric_input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.numeric_input_dim,
                actual: x.len(),
            });
        }
        let masks = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some(self.sample_masks(1, rng)),
        };
        let m = masks.as_ref().map(|m| m.masks[0].as_slice());
        let (pre, _) = self.forward_trace(params, self.input(params, x, station), m);
        Ok(softplus(pre.last().expect("output")[0]))
    }

    /// Batch-mean squared error over `rows` and its gradient. `masks`, when
    /// given, holds one entry per row in `rows` order.
    pub fn loss_grad_masked(
        &self,
        params: &[f64],
        data: &Design,
        rows: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.n_params];
        let n = rows.len() as f64;
        let e = self.spec.embedding_dim;
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        for (slot, &i) in rows.iter().enumerate() {
            let m = masks.map(|m| m.masks[slot].as_slice());
            let station = self.station_row(data.station[i]);
            let (pre, acts) = self.forward_trace(params, self.input(params, data.row(i), station), m);
            let z_out = pre[last][0];
            let r = softplus(z_out) - data.y[i];
            loss += r * r;

            let mut delta = vec![2.0 * r / n * sigmoid(z_out)];
            for k in (0..self.layers.len()).rev() {
                let l = self.layers[k];
                let a_prev = &acts[k];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, a_prev, &mut g[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in]);
                        g[l.b + o] += d;
                    }
                }
                let mut back = vec![0.0; l.fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in], &mut back);
                    }
                }
                if k > 0 {
                    // Through dropout and ReLU of the layer below.
                    let zb = &pre[k - 1];
                    for (j, b) in back.iter_mut().enumerate() {
                        let mut v = if zb[j] > 0.0 { *b } else { 0.0 };
                        if let Some(m) = m {
                            v *= m[k - 1][j];
                        }
                        *b = v;
                    }
                } else {
                    axpy(1.0, &back[..e], &mut g[station * e..(station + 1) * e]);
                }
                delta = back;
            }
        }
        (loss / n, g)
    }

    pub fn loss_grad(
        &self,
        params: &[f64],
        data: &Design,
        rows: &[usize],
        dropout: Option<&mut StreamRng>,
    ) -> (f64, Vec<f64>) {
        match dropout {
            Some(rng) if self.spec.dropout_rate > 0.0 => {
                let masks = self.sample_masks(rows.len(), rng);
                self.loss_grad_masked(params, data, rows, Some(&masks))
            }
            _ => self.loss_grad_masked(params, data, rows, None),
        }
    }
}

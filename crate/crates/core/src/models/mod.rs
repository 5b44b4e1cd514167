//! Predictors behind one flat-parameter interface: mean and Gaussian dummies
//! (closed-form fits), linear regression and the embedding MLP (gradient
//! trained).

pub mod adam;
pub mod checkpoint;
pub mod dummy;
pub mod linear;
pub mod mlp;
pub mod params;

use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use dummy::{DummyGaussian, DummyMean};
pub use linear::LinearRegression;
pub use mlp::{DropoutMasks, Mlp, MlpSpec, Mode};
pub use params::{Layout, ModelParameters, Segment};

use crate::error::{Error, Result};
use crate::features::Design;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "dummy-mean")]
    DummyMean,
    #[serde(rename = "dummy-gauss")]
    DummyGauss,
    #[serde(rename = "lr")]
    Lr,
    #[serde(rename = "mlp")]
    Mlp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::DummyMean => "dummy-mean",
            ModelKind::DummyGauss => "dummy-gauss",
            ModelKind::Lr => "lr",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn is_dummy(&self) -> bool {
        matches!(self, ModelKind::DummyMean | ModelKind::DummyGauss)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dummy-mean" => Ok(ModelKind::DummyMean),
            "dummy-gauss" => Ok(ModelKind::DummyGauss),
            "lr" => Ok(ModelKind::Lr),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::config(
                "model",
                format!("unknown model {other:?} (dummy-mean|dummy-gauss|lr|mlp)"),
            )),
        }
    }
}

/// A gradient-trainable architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Linear(LinearRegression),
    Mlp(Mlp),
}

impl Architecture {
    pub fn layout(&self) -> Layout {
        match self {
            Architecture::Linear(m) => m.layout(),
            Architecture::Mlp(m) => m.layout(),
        }
    }

    /// Seeded initial parameters with the output placed at `output_level`.
    pub fn init_params(&self, seed: u64, output_level: f64) -> ModelParameters {
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let values = match self {
            Architecture::Linear(m) => m.init(&mut r, output_level),
            Architecture::Mlp(m) => m.init(&mut r, output_level),
        };
        ModelParameters {
            layout: Arc::new(self.layout()),
            values,
        }
    }

    pub fn predict_row(&self, params: &[f64], x: &[f64], station: usize) -> Result<f64> {
        match self {
            Architecture::Linear(m) => m.forward(params, x),
            Architecture::Mlp(m) => m.forward(params, x, station, Mode::Eval),
        }
    }

    /// Eval-mode predictions for every row of `data`.
    pub fn predict(&self, params: &[f64], data: &Design) -> Result<Vec<f64>> {
        (0..data.len())
            .into_par_iter()
            .map(|i| self.predict_row(params, data.row(i), data.station[i]))
            .collect()
    }

    /// Batch-mean squared error over `rows` and its gradient. Dropout is
    /// active only when `dropout` carries a generator.
    pub fn loss_grad(
        &self,
        params: &[f64],
        data: &Design,
        rows: &[usize],
        dropout: Option<&mut StreamRng>,
    ) -> (f64, Vec<f64>) {
        match self {
            Architecture::Linear(m) => m.loss_grad(params, data, rows),
            Architecture::Mlp(m) => m.loss_grad(params, data, rows, dropout),
        }
    }

    pub fn uses_dropout(&self) -> bool {
        matches!(self, Architecture::Mlp(m) if m.spec.dropout_rate > 0.0)
    }
}

/// An architecture paired with its current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    params: ModelParameters,
}

impl Model {
    pub fn new(arch: Architecture, params: ModelParameters) -> Result<Model> {
        params.check_layout(&arch.layout())?;
        Ok(Model { arch, params })
    }

    pub fn init(arch: Architecture, seed: u64, output_level: f64) -> Model {
        let params = arch.init_params(seed, output_level);
        Model { arch, params }
    }

    pub fn get_params(&self) -> ModelParameters {
        self.params.clone()
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn set_params(&mut self, params: ModelParameters) -> Result<()> {
        params.check_layout(&self.params.layout)?;
        self.params = params;
        Ok(())
    }

    pub fn predict(&self, data: &Design) -> Result<Vec<f64>> {
        self.arch.predict(&self.params.values, data)
    }
}

/// Any fitted predictor, dummy or trained, with a parameter snapshot for
/// checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    DummyMean(DummyMean),
    DummyGauss { model: DummyGaussian, seed: u64 },
    Trained(Model),
}

impl Predictor {
    pub fn predict(&self, data: &Design) -> Result<Vec<f64>> {
        match self {
            Predictor::DummyMean(m) => Ok(m.predict(data.len())),
            Predictor::DummyGauss { model, seed } => Ok(model.predict(data.len(), *seed)),
            Predictor::Trained(m) => m.predict(data),
        }
    }

    pub fn params(&self) -> ModelParameters {
        match self {
            Predictor::DummyMean(m) => ModelParameters {
                layout: Arc::new(Layout::new("dummy-mean", &[("mean", vec![1])])),
                values: vec![m.mean],
            },
            Predictor::DummyGauss { model, .. } => ModelParameters {
                layout: Arc::new(Layout::new("dummy-gauss", &[("mu", vec![1]), ("sigma", vec![1])])),
                values: vec![model.mu, model.sigma],
            },
            Predictor::Trained(m) => m.get_params(),
        }
    }
}

/// Elementwise mean of parameter snapshots; used by tests and tooling that
/// need an unweighted average.
pub fn mean_params(snapshots: &[ModelParameters]) -> Result<ModelParameters> {
    let first = snapshots.first().ok_or(Error::Empty("parameter snapshots"))?;
    let mut out = ModelParameters::zeros(first.layout.clone());
    for s in snapshots {
        s.check_layout(&first.layout)?;
        for (o, v) in out.values.iter_mut().zip(&s.values) {
            *o += v;
        }
    }
    let n = snapshots.len() as f64;
    out.values.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

//! Fully connected heads with the class label re-appended at every layer.

use serde::{Deserialize, Serialize};

use super::RegressionError;
use crate::nn::{silu, silu_grad, Linear, ParamLayout};

/// Hidden layer widths shared by all heads.
pub const HIDDEN_WIDTHS: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Rotation,
    Centre,
    Distance,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Rotation, HeadKind::Centre, HeadKind::Distance];

    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Rotation => 6,
            HeadKind::Centre => 2,
            HeadKind::Distance => 1,
        }
    }

    /// Number of bounding-box features appended to `μ`.
    pub fn bbox_features(self) -> usize {
        match self {
            HeadKind::Rotation => 0,
            HeadKind::Centre => 4,
            HeadKind::Distance => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Rotation => "rotation",
            HeadKind::Centre => "centre",
            HeadKind::Distance => "distance",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            HeadKind::Rotation => 1,
            HeadKind::Centre => 2,
            HeadKind::Distance => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub head: HeadKind,
    pub latent_dim: usize,
    pub num_classes: usize,
    /// When false the label is not fed to any layer.
    pub use_labels: bool,
}

impl MlpConfig {
    pub fn label_dim(&self) -> usize {
        if self.use_labels {
            self.num_classes
        } else {
            0
        }
    }

    /// Width of the head-specific features, excluding the label.
    pub fn feature_dim(&self) -> usize {
        self.latent_dim + self.head.bbox_features()
    }

    /// Input width of every affine layer, label included.
    pub fn layer_inputs(&self) -> Vec<usize> {
        let k = self.label_dim();
        std::iter::once(self.feature_dim())
            .chain(HIDDEN_WIDTHS)
            .map(|w| w + k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: Vec<f64>,
    layers: Vec<Linear>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct MlpFile {
    config: MlpConfig,
    params: Vec<f64>,
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MlpFile {
            config: self.config,
            params: self.params.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = MlpFile::deserialize(d)?;
        Mlp::with_params(f.config, f.params).map_err(serde::de::Error::custom)
    }
}

pub(crate) struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Row-wise `[h ‖ y]`.
fn append_labels(h: &[f64], width: usize, labels: &[f64], k: usize, rows: usize) -> Vec<f64> {
    if k == 0 {
        return h.to_vec();
    }
    let mut out = Vec::with_capacity(rows * (width + k));
    for r in 0..rows {
        out.extend_from_slice(&h[r * width..(r + 1) * width]);
        out.extend_from_slice(&labels[r * k..(r + 1) * k]);
    }
    out
}

fn drop_labels(g: &[f64], width: usize, k: usize) -> Vec<f64> {
    if k == 0 {
        return g.to_vec();
    }
    g.chunks_exact(width + k)
        .flat_map(|row| &row[..width])
        .copied()
        .collect()
}

fn build(config: &MlpConfig) -> (Vec<Linear>, ParamLayout) {
    let mut layout = ParamLayout::new();
    let ins = config.layer_inputs();
    let layers = ins
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let out = HIDDEN_WIDTHS
                .get(i)
                .copied()
                .unwrap_or(config.head.out_dim());
            layout.linear(w, out, i < HIDDEN_WIDTHS.len())
        })
        .collect();
    (layers, layout)
}

impl Mlp {
    pub fn new(config: MlpConfig, seed: u64) -> Self {
        let (layers, layout) = build(&config);
        Self {
            config,
            params: layout.initialize(seed),
            layers,
        }
    }

    pub fn with_params(config: MlpConfig, params: Vec<f64>) -> Result<Self, RegressionError> {
        let (layers, layout) = build(&config);
        if params.len() != layout.len() {
            return Err(RegressionError::ShapeMismatch(format!(
                "{} head has {} parameters, expected {}",
                config.head.name(),
                params.len(),
                layout.len()
            )));
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    fn check(&self, features: &[f64], labels: &[f64], rows: usize) -> Result<(), RegressionError> {
        let f = self.config.feature_dim();
        let k = self.config.label_dim();
        if features.len() != rows * f {
            return Err(RegressionError::ShapeMismatch(format!(
                "{} head expects {f} features per row, got {} values for {rows} rows",
                self.config.head.name(),
                features.len()
            )));
        }
        if labels.len() != rows * k {
            return Err(RegressionError::ShapeMismatch(format!(
                "{} head expects {k} label entries per row, got {} values for {rows} rows",
                self.config.head.name(),
                labels.len()
            )));
        }
        Ok(())
    }

    /// Outputs for `rows` stacked feature vectors (`rows × out_dim`).
    /// `labels` holds one-hot rows, or is empty for label-free heads.
    pub fn forward(&self, features: &[f64], labels: &[f64], rows: usize) -> Result<Vec<f64>, RegressionError> {
        self.check(features, labels, rows)?;
        Ok(self.forward_cached(&self.params, features, labels, rows).0)
    }

    pub(crate) fn forward_cached(
        &self,
        p: &[f64],
        features: &[f64],
        labels: &[f64],
        rows: usize,
    ) -> (Vec<f64>, MlpCache) {
        let k = self.config.label_dim();
        let last = self.layers.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut h = features.to_vec();
        let mut width = self.config.feature_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            let x = append_labels(&h, width, labels, k, rows);
            let pre = layer.forward(p, &x, rows);
            cache.inputs.push(x);
            width = layer.out_dim;
            if i == last {
                return (pre, cache);
            }
            h = pre.iter().map(|&v| silu(v)).collect();
            cache.pre.push(pre);
        }
        unreachable!("at least one layer")
    }

    pub(crate) fn backward(&self, p: &[f64], cache: &MlpCache, grad_out: &[f64], rows: usize, grads: &mut [f64]) {
        let k = self.config.label_dim();
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need = i > 0;
            let gx = layer.backward(p, &cache.inputs[i], &g, rows, grads, need);
            let Some(gx) = gx else { break };
            let prev = &cache.pre[i - 1];
            g = drop_labels(&gx, layer.in_dim - k, k)
                .iter()
                .zip(prev)
                .map(|(&d, &z)| d * silu_grad(z))
                .collect();
        }
    }

    /// Mean squared error over all rows and outputs and its parameter
    /// gradient, evaluated at `p`.
    pub fn loss_and_gradient_at(
        &self,
        p: &[f64],
        features: &[f64],
        labels: &[f64],
        targets: &[f64],
        rows: usize,
    ) -> Result<(f64, Vec<f64>), RegressionError> {
        self.check(features, labels, rows)?;
        if targets.len() != rows * self.config.head.out_dim() || p.len() != self.params.len() {
            return Err(RegressionError::ShapeMismatch("targets or parameters".into()));
        }
        let (out, cache) = self.forward_cached(p, features, labels, rows);
        let scale = 1.0 / targets.len() as f64;
        let mut loss = 0.0;
        let g_out: Vec<f64> = out
            .iter()
            .zip(targets)
            .map(|(&o, &t)| {
                let d = o - t;
                loss += d * d;
                2.0 * d * scale
            })
            .collect();
        let mut grads = vec![0.0; p.len()];
        self.backward(p, &cache, &g_out, rows, &mut grads);
        Ok((loss * scale, grads))
    }

    pub fn loss(&self, features: &[f64], labels: &[f64], targets: &[f64], rows: usize) -> Result<f64, RegressionError> {
        let out = self.forward(features, labels, rows)?;
        if out.len() != targets.len() {
            return Err(RegressionError::ShapeMismatch("targets".into()));
        }
        let s: f64 = out.iter().zip(targets).map(|(o, t)| (o - t) * (o - t)).sum();
        Ok(s / targets.len() as f64)
    }
}

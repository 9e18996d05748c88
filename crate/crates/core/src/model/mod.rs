//! The toy network: a context-window MLP encoder, a projection head used by
//! the contrastive objective, and a linear prediction head used by
//! cross-entropy. Backpropagation is written out by hand.

mod checkpoint;
mod masking;
mod optim;
mod schedule;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use masking::{apply_masking, MaskPolicy};
pub use optim::{clip_grad_norm, optimizer_step, OptimizerKind, OptimizerState};
pub use schedule::{lr_at, TriStageSchedule};

use serde::{Deserialize, Serialize};

use crate::batching::Gradient;
use crate::error::{Error, Result};
use crate::numerics::{argmax, normalize_rows, Matrix, NormalizedRows, Rng};
use crate::segmentation::Label;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Frames on each side of the centre frame fed to the encoder.
    pub context: usize,
    pub encoder_hidden: Vec<usize>,
    pub d_enc: usize,
    pub h_proj: usize,
    pub d_proj: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            context: 2,
            encoder_hidden: vec![32],
            d_enc: 16,
            h_proj: 64,
            d_proj: 16,
            n_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim * (2 * self.context + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("d_enc", self.d_enc),
            ("h_proj", self.h_proj),
            ("d_proj", self.d_proj),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "needs at least 2 classes"));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::config("encoder_hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(input, output, |_, _| limit * (2.0 * rng.uniform() - 1.0)),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dX`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense, need_input_grad: bool) -> Result<Option<Matrix>> {
        let dw = x.t_matmul(dy)?;
        for (g, d) in grad.weight.data_mut().iter_mut().zip(dw.data()) {
            *g += d;
        }
        for (g, d) in grad.bias.iter_mut().zip(dy.column_sums()) {
            *g += d;
        }
        if need_input_grad {
            Ok(Some(dy.matmul_t(&self.weight)?))
        } else {
            Ok(None)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<Dense>,
    pub projection_hidden: Dense,
    pub projection_out: Dense,
    pub prediction: Dense,
}

fn tanh_backward(activated: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = upstream.clone();
    for (o, a) in out.data_mut().iter_mut().zip(activated.data()) {
        *o *= 1.0 - a * a;
    }
    out
}

/// Stacks each frame with `context` neighbours on both sides; edge frames
/// repeat the first/last frame.
pub fn context_window(frames: &Matrix, context: usize, rows: &[usize]) -> Matrix {
    let (t, f) = frames.shape();
    let width = 2 * context + 1;
    let mut out = Matrix::zeros(rows.len(), f * width);
    for (r, &centre) in rows.iter().enumerate() {
        let dst = out.row_mut(r);
        for w in 0..width {
            let src = (centre + w).saturating_sub(context).min(t - 1);
            dst[w * f..(w + 1) * f].copy_from_slice(frames.row(src));
        }
    }
    out
}

/// Activations kept from an encoder forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub input: Matrix,
    /// Post-tanh output of every layer; the last one is `Z`.
    pub layers: Vec<Matrix>,
}

impl EncoderTrace {
    pub fn output(&self) -> &Matrix {
        self.layers.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionTrace {
    pub hidden: Matrix,
    pub raw: Matrix,
    pub normalized: NormalizedRows,
}

impl ProjectionTrace {
    pub fn output(&self) -> &Matrix {
        &self.normalized.rows
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut width = config.input_dim();
        for &h in config.encoder_hidden.iter().chain(std::iter::once(&config.d_enc)) {
            encoder.push(Dense::glorot(width, h, rng));
            width = h;
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            projection_hidden: Dense::glorot(config.d_enc, config.h_proj, rng),
            projection_out: Dense::glorot(config.h_proj, config.d_proj, rng),
            prediction: Dense::glorot(config.d_enc, config.n_classes, rng),
        })
    }

    /// Same shapes, all zeros. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.input_dim(), d.output_dim());
        Self {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(z).collect(),
            projection_hidden: z(&self.projection_hidden),
            projection_out: z(&self.projection_out),
            prediction: z(&self.prediction),
        }
    }

    pub fn reinit_prediction(&mut self, rng: &mut Rng) {
        self.prediction = Dense::glorot(self.config.d_enc, self.config.n_classes, rng);
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain([&self.projection_hidden, &self.projection_out, &self.prediction])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain([
            &mut self.projection_hidden,
            &mut self.projection_out,
            &mut self.prediction,
        ])
    }

    /// Parameter tensors in a fixed order: each encoder layer (W, b), then
    /// the projection layers, then the prediction head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|d| [d.weight.data(), d.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|d| [d.weight.data_mut(), d.bias.as_mut_slice()])
            .collect()
    }

    pub fn encoder_tensors(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .flat_map(|d| [d.weight.data(), d.bias.as_slice()])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    fn check_frames(&self, frames: &Matrix) -> Result<()> {
        if frames.cols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "frames have {} features, model expects {}",
                frames.cols(),
                self.config.feature_dim
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::Empty("utterance with no frames"));
        }
        Ok(())
    }

    /// Encoder pass over already-windowed inputs.
    pub fn encode_windows(&self, input: Matrix) -> Result<EncoderTrace> {
        if input.cols() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "encoder input width {} != {}",
                input.cols(),
                self.config.input_dim()
            )));
        }
        let mut layers: Vec<Matrix> = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let x = layers.last().unwrap_or(&input);
            layers.push(layer.forward(x)?.map(f64::tanh));
        }
        Ok(EncoderTrace { input, layers })
    }

    /// Encoder trace for the listed frames of one utterance.
    pub fn encode_frames(&self, frames: &Matrix, rows: &[usize]) -> Result<EncoderTrace> {
        self.check_frames(frames)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= frames.rows()) {
            return Err(Error::Shape(format!("frame {bad} out of range")));
        }
        self.encode_windows(context_window(frames, self.config.context, rows))
    }

    /// `F_enc`: one `d_enc` representation per frame.
    pub fn encode(&self, frames: &Matrix) -> Result<Matrix> {
        let rows: Vec<usize> = (0..frames.rows()).collect();
        let mut trace = self.encode_frames(frames, &rows)?;
        Ok(trace.layers.pop().unwrap_or(trace.input))
    }

    fn check_z(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.config.d_enc {
            return Err(Error::Shape(format!(
                "representation width {} != d_enc {}",
                z.cols(),
                self.config.d_enc
            )));
        }
        Ok(())
    }

    pub fn project_trace(&self, z: &Matrix) -> Result<ProjectionTrace> {
        self.check_z(z)?;
        let hidden = self.projection_hidden.forward(z)?.map(f64::tanh);
        let raw = self.projection_out.forward(&hidden)?;
        let normalized = normalize_rows(&raw)?;
        let zero = normalized.zero_rows();
        if !zero.is_empty() {
            log::warn!("projection produced {} zero rows; passed through unnormalised", zero.len());
        }
        Ok(ProjectionTrace {
            hidden,
            raw,
            normalized,
        })
    }

    /// `M_proj` followed by row normalisation.
    pub fn project(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.project_trace(z)?.normalized.rows)
    }

    /// `G_pred` logits (softmax is applied inside the loss).
    pub fn predict(&self, z: &Matrix) -> Result<Matrix> {
        self.check_z(z)?;
        self.prediction.forward(z)
    }

    pub fn logits(&self, frames: &Matrix) -> Result<Matrix> {
        self.predict(&self.encode(frames)?)
    }

    /// Per-frame argmax class, lowest index on ties.
    pub fn predict_labels(&self, frames: &Matrix) -> Result<Vec<Label>> {
        Ok(self.logits(frames)?.iter_rows().map(argmax).collect())
    }

    /// Backpropagates `dL/dH` (gradient at the unit-normalised projection)
    /// through normalisation and the projection head. Accumulates into
    /// `grad` and returns `dL/dZ`.
    pub fn backward_projection(
        &self,
        z: &Matrix,
        trace: &ProjectionTrace,
        d_h: &Matrix,
        grad: &mut ModelParams,
    ) -> Result<Matrix> {
        let h = &trace.normalized.rows;
        let mut d_raw = d_h.clone();
        // ∂(v/‖v‖)/∂v = (I − ĥĥᵀ)/‖v‖
        for (r, &n) in trace.normalized.norms.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            let hr = h.row(r);
            let row = d_raw.row_mut(r);
            let along: f64 = row.iter().zip(hr).map(|(a, b)| a * b).sum();
            for (g, &hv) in row.iter_mut().zip(hr) {
                *g = (*g - along * hv) / n;
            }
        }
        let d_hidden = self
            .projection_out
            .backward(&trace.hidden, &d_raw, &mut grad.projection_out, true)?
            .unwrap_or_default();
        let d_pre = tanh_backward(&trace.hidden, &d_hidden);
        Ok(self
            .projection_hidden
            .backward(z, &d_pre, &mut grad.projection_hidden, true)?
            .unwrap_or_default())
    }

    /// Backpropagates `dL/dlogits` through the prediction head; returns `dL/dZ`.
    pub fn backward_prediction(&self, z: &Matrix, d_logits: &Matrix, grad: &mut ModelParams) -> Result<Matrix> {
        Ok(self
            .prediction
            .backward(z, d_logits, &mut grad.prediction, true)?
            .unwrap_or_default())
    }

    /// Backpropagates `dL/dZ` through the encoder.
    pub fn backward_encoder(&self, trace: &EncoderTrace, d_z: &Matrix, grad: &mut ModelParams) -> Result<()> {
        let mut upstream = d_z.clone();
        for l in (0..self.encoder.len()).rev() {
            let d_pre = tanh_backward(&trace.layers[l], &upstream);
            let x = if l == 0 { &trace.input } else { &trace.layers[l - 1] };
            if let Some(d_x) = self.encoder[l].backward(x, &d_pre, &mut grad.encoder[l], l > 0)? {
                upstream = d_x;
            }
        }
        Ok(())
    }
}

impl Gradient for ModelParams {
    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            context: 1,
            encoder_hidden: vec![5],
            d_enc: 4,
            h_proj: 6,
            d_proj: 3,
            n_classes: 4,
        }
    }

    fn random_frames(rng: &mut Rng, t: usize, f: usize) -> Matrix {
        Matrix::from_fn(t, f, |_, _| rng.normal())
    }

    #[test]
    fn zero_weight_encoder_returns_bias() {
        let mut rng = Rng::new(0);
        let mut p = ModelParams::init(&tiny(), &mut rng).unwrap();
        for layer in &mut p.encoder {
            layer.weight = Matrix::zeros(layer.input_dim(), layer.output_dim());
            layer.bias = (0..layer.output_dim()).map(|i| 0.1 * i as f64).collect();
        }
        let z = p.encode(&random_frames(&mut rng, 7, 3)).unwrap();
        let expected: Vec<f64> = (0..4).map(|i| (0.1 * i as f64).tanh()).collect();
        for row in z.iter_rows() {
            for (a, b) in row.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_frame_and_shape_errors() {
        let mut rng = Rng::new(1);
        let p = ModelParams::init(&tiny(), &mut rng).unwrap();
        assert_eq!(p.encode(&random_frames(&mut rng, 1, 3)).unwrap().shape(), (1, 4));
        assert!(matches!(p.encode(&Matrix::zeros(4, 2)), Err(Error::Shape(_))));
        assert!(matches!(p.predict(&Matrix::zeros(4, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn context_window_replicates_edges() {
        let frames = Matrix::from_fn(3, 1, |t, _| t as f64);
        let w = context_window(&frames, 2, &[0, 1, 2]);
        assert_eq!(w.row(0), &[0.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(w.row(1), &[0.0, 0.0, 1.0, 2.0, 2.0]);
        assert_eq!(w.row(2), &[0.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn projection_rows_are_unit_and_scale_free() {
        let mut rng = Rng::new(2);
        let mut p = ModelParams::init(&tiny(), &mut rng).unwrap();
        let z = p.encode(&random_frames(&mut rng, 9, 3)).unwrap();
        let h = p.project(&z).unwrap();
        for row in h.iter_rows() {
            assert!((crate::numerics::norm(row) - 1.0).abs() < 1e-9);
        }
        // scaling the pre-normalisation output leaves the projection unchanged
        p.projection_out.weight = p.projection_out.weight.map(|v| 5.0 * v);
        p.projection_out.bias.iter_mut().for_each(|v| *v *= 5.0);
        assert!(p.project(&z).unwrap().max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn prediction_head_is_affine() {
        let mut rng = Rng::new(3);
        let cfg = ModelConfig {
            d_enc: 4,
            n_classes: 4,
            ..tiny()
        };
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        let z = random_frames(&mut rng, 5, 4);
        p.prediction.weight = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        p.prediction.bias = vec![0.5, -0.5, 0.0, 1.0];
        let logits = p.predict(&z).unwrap();
        for t in 0..5 {
            for c in 0..4 {
                assert!((logits.get(t, c) - z.get(t, c) - p.prediction.bias[c]).abs() < 1e-15);
            }
        }
        p.prediction.weight = Matrix::zeros(4, 4);
        for row in p.predict(&z).unwrap().iter_rows() {
            assert_eq!(row, p.prediction.bias.as_slice());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let p = ModelParams::init(&tiny(), &mut rng).unwrap();
        let frames = random_frames(&mut rng, 6, 3);
        let rows: Vec<usize> = (0..6).collect();
        let trace = p.encode_frames(&frames, &rows).unwrap();
        let proj = p.project_trace(trace.output()).unwrap();
        let mut grad = p.zeros_like();
        let dz = p
            .backward_projection(trace.output(), &proj, &Matrix::zeros(6, 3), &mut grad)
            .unwrap();
        p.backward_encoder(&trace, &dz, &mut grad).unwrap();
        assert_eq!(grad.squared_norm(), 0.0);
    }
}

//! Voltage-plus-deformation tactile network.
//!
//! Two branches feed a fusion head:
//!
//! - the voltage branch runs the 104 normalized voltage differences through
//!   a batch-normalized MLP, then treats the result as a one-channel signal
//!   for a stack of 1-D convolutions closed by global average pooling;
//! - the deformation branch convolves the `27 x 50` height map with strided
//!   2-D convolutions and flattens the result.
//!
//! The fusion head maps the concatenation through a hidden layer with
//! dropout to 1350 logits, one per recon point. Probabilities are the
//! logistic sigmoid of the logits.
//!
//! Everything runs in `f64` on the CPU and is deterministic for a fixed seed.

mod layers;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GRID_COLS, GRID_ROWS};
use layers::{Layer, Op};

pub use train::{bce, bce_grad, split_indices, train, Adam, TrainReport, BCE_CLAMP};

pub const VOLTAGE_LEN: usize = 104;
pub const OUTPUT_LEN: usize = GRID_ROWS * GRID_COLS;

/// Network shape and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vd2tConfig {
    pub voltage_len: usize,
    /// `[rows, cols]` of the height map.
    pub deform_shape: [usize; 2],
    pub mlp_widths: Vec<usize>,
    pub conv1d_channels: Vec<usize>,
    pub conv1d_kernel: usize,
    pub conv2d_channels: Vec<usize>,
    pub conv2d_kernel: usize,
    pub conv2d_stride: usize,
    /// Output widths of the two fusion layers; the last is `output_len`.
    pub fusion_widths: [usize; 2],
    pub output_len: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for Vd2tConfig {
    fn default() -> Self {
        Vd2tConfig {
            voltage_len: VOLTAGE_LEN,
            deform_shape: [GRID_ROWS, GRID_COLS],
            mlp_widths: vec![256, 256, 128],
            conv1d_channels: vec![8, 16, 32],
            conv1d_kernel: 5,
            conv2d_channels: vec![8, 16],
            conv2d_kernel: 3,
            conv2d_stride: 2,
            fusion_widths: [512, OUTPUT_LEN],
            output_len: OUTPUT_LEN,
            dropout: 0.2,
            learning_rate: 1e-4,
            batch_size: 512,
            epochs: 100,
            val_fraction: 0.1,
            seed: 2024,
        }
    }
}

impl Vd2tConfig {
    /// Same network with a schedule that converges on one workstation core
    /// in minutes: smaller batches take many more Adam steps per epoch.
    pub fn desk() -> Self {
        Vd2tConfig { learning_rate: 1e-3, batch_size: 32, epochs: 60, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.voltage_len != VOLTAGE_LEN {
            return bad(format!("voltage_len must be {VOLTAGE_LEN}, got {}", self.voltage_len));
        }
        if self.deform_shape != [GRID_ROWS, GRID_COLS] {
            return bad(format!("deform_shape must be [{GRID_ROWS}, {GRID_COLS}]"));
        }
        if self.output_len != OUTPUT_LEN || self.fusion_widths[1] != self.output_len {
            return bad(format!("output_len and the last fusion width must be {OUTPUT_LEN}"));
        }
        if self.mlp_widths.is_empty() || self.conv1d_channels.is_empty() || self.conv2d_channels.is_empty() {
            return bad("every branch needs at least one layer".into());
        }
        if [&self.mlp_widths, &self.conv1d_channels, &self.conv2d_channels].iter().any(|v| v.contains(&0))
            || self.fusion_widths[0] == 0
        {
            return bad("layer widths must be positive".into());
        }
        if self.conv1d_kernel % 2 == 0 {
            return bad("conv1d_kernel must be odd".into());
        }
        if self.conv2d_kernel == 0 || self.conv2d_stride == 0 {
            return bad("conv2d kernel and stride must be positive".into());
        }
        let (mut h, mut w) = (self.deform_shape[0], self.deform_shape[1]);
        for _ in &self.conv2d_channels {
            if h < self.conv2d_kernel || w < self.conv2d_kernel {
                return bad("conv2d stack shrinks the height map to nothing".into());
            }
            h = (h - self.conv2d_kernel) / self.conv2d_stride + 1;
            w = (w - self.conv2d_kernel) / self.conv2d_stride + 1;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)".into());
        }
        Ok(())
    }
}

/// A batch of inputs, sample-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub dv: Vec<f64>,
    pub heights: Vec<f64>,
    pub target: Vec<f64>,
    pub len: usize,
}

impl Batch {
    pub fn push(&mut self, dv: &[f64], heights: &[f64], target: &[f64]) {
        self.dv.extend_from_slice(dv);
        self.heights.extend_from_slice(heights);
        self.target.extend_from_slice(target);
        self.len += 1;
    }
}

#[derive(Debug, Clone)]
pub struct Vd2tModel {
    pub config: Vd2tConfig,
    voltage: Vec<Layer>,
    deform: Vec<Layer>,
    fusion: Vec<Layer>,
}

fn run(layers: &mut [Layer], x: &[f64], batch: usize, training: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut a = x.to_vec();
    for l in layers {
        a = l.forward(&a, batch, training, rng)?;
    }
    Ok(a)
}

fn back(layers: &mut [Layer], dy: Vec<f64>, need_input: bool) -> Vec<f64> {
    let mut d = dy;
    let n = layers.len();
    for (i, l) in layers.iter_mut().enumerate().rev() {
        d = l.backward(&d, i > 0 || need_input);
        if i == 0 && !need_input && n > 0 {
            return Vec::new();
        }
    }
    d
}

impl Vd2tModel {
    /// Builds the network with fan-in scaled uniform weights, zero biases
    /// and identity batch norms.
    pub fn new(config: Vd2tConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let mut voltage = Vec::new();
        let mut width = c.voltage_len;
        for (i, &w) in c.mlp_widths.iter().enumerate() {
            voltage.push(Layer::new(format!("mlp{i}"), Op::Linear { inputs: width, outputs: w }, &mut rng));
            voltage.push(Layer::new(format!("mlp{i}_bn"), Op::BatchNorm { channels: w, spatial: 1 }, &mut rng));
            voltage.push(Layer::new(format!("mlp{i}_relu"), Op::Relu { size: w }, &mut rng));
            width = w;
        }
        let len = width;
        let mut ch = 1;
        for (i, &co) in c.conv1d_channels.iter().enumerate() {
            let op = Op::Conv { cin: ch, cout: co, h: 1, w: len, kh: 1, kw: c.conv1d_kernel, stride: 1, ph: 0, pw: c.conv1d_kernel / 2 };
            voltage.push(Layer::new(format!("conv1d{i}"), op, &mut rng));
            voltage.push(Layer::new(format!("conv1d{i}_bn"), Op::BatchNorm { channels: co, spatial: len }, &mut rng));
            voltage.push(Layer::new(format!("conv1d{i}_relu"), Op::Relu { size: co * len }, &mut rng));
            ch = co;
        }
        voltage.push(Layer::new("gap", Op::GlobalAvgPool { channels: ch, spatial: len }, &mut rng));
        let voltage_out = ch;

        let mut deform = Vec::new();
        let [mut h, mut w] = c.deform_shape;
        let mut ch = 1;
        for (i, &co) in c.conv2d_channels.iter().enumerate() {
            let op = Op::Conv { cin: ch, cout: co, h, w, kh: c.conv2d_kernel, kw: c.conv2d_kernel, stride: c.conv2d_stride, ph: 0, pw: 0 };
            h = (h - c.conv2d_kernel) / c.conv2d_stride + 1;
            w = (w - c.conv2d_kernel) / c.conv2d_stride + 1;
            deform.push(Layer::new(format!("conv2d{i}"), op, &mut rng));
            deform.push(Layer::new(format!("conv2d{i}_bn"), Op::BatchNorm { channels: co, spatial: h * w }, &mut rng));
            deform.push(Layer::new(format!("conv2d{i}_relu"), Op::Relu { size: co * h * w }, &mut rng));
            ch = co;
        }
        let deform_out = ch * h * w;

        let hidden = c.fusion_widths[0];
        let fusion = vec![
            Layer::new("fusion0", Op::Linear { inputs: voltage_out + deform_out, outputs: hidden }, &mut rng),
            Layer::new("fusion0_bn", Op::BatchNorm { channels: hidden, spatial: 1 }, &mut rng),
            Layer::new("fusion0_relu", Op::Relu { size: hidden }, &mut rng),
            Layer::new("fusion0_dropout", Op::Dropout { p: c.dropout, size: hidden }, &mut rng),
            Layer::new("fusion1", Op::Linear { inputs: hidden, outputs: c.output_len }, &mut rng),
        ];
        Ok(Vd2tModel { config, voltage, deform, fusion })
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.voltage.iter().chain(&self.deform).chain(&self.fusion)
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.voltage.iter_mut().chain(&mut self.deform).chain(&mut self.fusion)
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.params.len()).sum()
    }

    /// Width of the voltage and deformation branch outputs.
    pub fn branch_widths(&self) -> (usize, usize) {
        (self.voltage.last().unwrap().op.out_size(), self.deform.last().unwrap().op.out_size())
    }

    fn check_batch(&self, b: &Batch, with_target: bool) -> Result<()> {
        let c = &self.config;
        let checks = [
            ("voltage batch", b.len * c.voltage_len, b.dv.len()),
            ("height batch", b.len * c.deform_shape[0] * c.deform_shape[1], b.heights.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::Shape { what, expected, found });
            }
        }
        if with_target && b.target.len() != b.len * c.output_len {
            return Err(Error::Shape { what: "target batch", expected: b.len * c.output_len, found: b.target.len() });
        }
        if b.len == 0 {
            return Err(Error::Param("empty batch".into()));
        }
        Ok(())
    }

    /// Logits for a batch. In training mode batch norm uses batch
    /// statistics (and updates its running averages) and dropout masks are
    /// drawn from `rng`.
    pub(crate) fn logits(&mut self, b: &Batch, training: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = b.len;
        let v = run(&mut self.voltage, &b.dv, n, training, rng)?;
        let d = run(&mut self.deform, &b.heights, n, training, rng)?;
        let (vw, dw) = self.branch_widths();
        let mut cat = Vec::with_capacity(n * (vw + dw));
        for s in 0..n {
            cat.extend_from_slice(&v[s * vw..(s + 1) * vw]);
            cat.extend_from_slice(&d[s * dw..(s + 1) * dw]);
        }
        run(&mut self.fusion, &cat, n, training, rng)
    }

    /// Accumulates parameter gradients for `dlogits` after a training-mode
    /// [`Self::logits`] call on the same batch.
    pub(crate) fn backward(&mut self, dlogits: Vec<f64>, n: usize) {
        let (vw, dw) = self.branch_widths();
        let dcat = back(&mut self.fusion, dlogits, true);
        let mut dv = Vec::with_capacity(n * vw);
        let mut dd = Vec::with_capacity(n * dw);
        for row in dcat.chunks(vw + dw) {
            dv.extend_from_slice(&row[..vw]);
            dd.extend_from_slice(&row[vw..]);
        }
        back(&mut self.voltage, dv, false);
        back(&mut self.deform, dd, false);
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().for_each(Layer::zero_grad);
    }

    /// Training-mode loss and gradients for one batch, with dropout masks
    /// drawn from `seed`. Gradients are accumulated; call
    /// [`Self::zero_grad`] first.
    pub fn loss_and_grad(&mut self, b: &Batch, seed: u64) -> Result<f64> {
        self.check_batch(b, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.logits(b, true, &mut rng)?;
        let loss = bce(&z, &b.target);
        if !loss.is_finite() {
            return Err(Error::Training("non-finite loss".into()));
        }
        self.backward(bce_grad(&z, &b.target), b.len);
        Ok(loss)
    }

    /// Evaluation-mode loss on a batch.
    pub fn eval_loss(&mut self, b: &Batch) -> Result<f64> {
        self.check_batch(b, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = self.logits(b, false, &mut rng)?;
        Ok(bce(&z, &b.target))
    }

    /// Per-point touch probabilities, `len x 1350`, in evaluation mode.
    pub fn predict(&mut self, b: &Batch) -> Result<Vec<f64>> {
        self.check_batch(b, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.logits(b, false, &mut rng)?.into_iter().map(sigmoid).collect())
    }

    /// Flat view of all trainable parameters, in layer order.
    pub fn params(&self) -> Vec<f64> {
        self.layers().flat_map(|l| l.params.iter().copied()).collect()
    }

    /// Flat view of the accumulated gradients, aligned with [`Self::params`].
    pub fn grads(&self) -> Vec<f64> {
        self.layers().flat_map(|l| l.grads.iter().copied()).collect()
    }

    /// Sets the flat parameter at `index`.
    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for l in self.layers_mut() {
            if index < l.params.len() {
                l.params[index] = value;
                return;
            }
            index -= l.params.len();
        }
        panic!("parameter index out of range");
    }

    /// Writes a binary checkpoint: magic, a little-endian `u64` header
    /// length, a JSON header, then every parameter and running statistic as
    /// little-endian `f64` in layer order.
    pub fn save<W: Write>(&self, meta: &CheckpointMeta, mut w: W) -> Result<()> {
        let payload: Vec<u8> = self
            .layers()
            .flat_map(|l| l.params.iter().chain(&l.state))
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta: meta.clone(),
            layers: self.layers().map(|l| (l.name.clone(), l.params.len(), l.state.len())).collect(),
            payload_sha256: crate::hash::sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn save_file(&self, meta: &CheckpointMeta, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save(meta, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Self::save`]; `path` is only used in
    /// error messages.
    pub fn load<R: Read>(mut r: R, path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bad = |m: &str| Error::format(path, m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated checkpoint"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(bad("checkpoint header too large"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated checkpoint"))?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {}", header.version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if crate::hash::sha256_hex(&payload) != header.payload_sha256 {
            return Err(bad("checkpoint payload checksum mismatch"));
        }
        let mut model = Vd2tModel::new(header.config)?;
        let shapes: Vec<_> = model.layers().map(|l| (l.name.clone(), l.params.len(), l.state.len())).collect();
        if shapes != header.layers {
            return Err(bad("checkpoint layers do not match its configuration"));
        }
        let expected: usize = shapes.iter().map(|s| 8 * (s.1 + s.2)).sum();
        if payload.len() != expected {
            return Err(bad("checkpoint payload has the wrong length"));
        }
        let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for l in model.layers_mut() {
            for v in l.params.iter_mut().chain(l.state.iter_mut()) {
                *v = vals.next().unwrap();
            }
        }
        Ok((model, header.meta))
    }

    pub fn load_file(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bytes = std::fs::read(path)?;
        Self::load(bytes.as_slice(), path)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ESKVD2T1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    /// Hash of the dataset manifest the model was trained on, if any.
    pub dataset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    config: Vd2tConfig,
    meta: CheckpointMeta,
    layers: Vec<(String, usize, usize)>,
    payload_sha256: String,
}

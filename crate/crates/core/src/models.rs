//! The four classifier families and their checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Act, BatchNorm, Conv3x3, Dropout, Layer, Linear, MaxPool2x2, Param};

/// Conv widths of the three sVGG blocks (two convolutions each).
pub const SVGG_BLOCKS: [usize; 3] = [16, 32, 48];
pub const SVGG_FC_WIDTH: usize = 128;
pub const MLP_HIDDEN: usize = 1000;
const PREDICT_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Svgg,
    Mlp1,
    Mlp2,
    Softmax,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Svgg => "svgg",
            Family::Mlp1 => "mlp1",
            Family::Mlp2 => "mlp2",
            Family::Softmax => "softmax",
        }
    }

    fn hidden_layers(self) -> usize {
        match self {
            Family::Mlp1 => 1,
            Family::Mlp2 => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub n_classes: u32,
    pub batch_norm: bool,
    #[serde(default)]
    pub l2_strength: f32,
    #[serde(default)]
    pub dropout_rate: f32,
}

impl ModelSpec {
    pub fn new(family: Family, input_shape: (usize, usize, usize), n_classes: u32) -> Self {
        Self {
            family,
            input_shape,
            n_classes,
            batch_norm: true,
            l2_strength: 0.0,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "input shape must be positive, got {h}x{w}x{c}"
            )));
        }
        if self.family == Family::Svgg && (h < 2 || w < 2) {
            return Err(Error::Shape(format!(
                "svgg needs a spatial input, got {h}x{w}x{c}"
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "l2_strength must be nonnegative, got {}",
                self.l2_strength
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }
}

/// Row-wise class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityBatch {
    pub n_classes: usize,
    pub probs: Vec<f32>,
}

impl ProbabilityBatch {
    pub fn len(&self) -> usize {
        self.probs.len() / self.n_classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.probs.chunks_exact(self.n_classes)
    }

    /// Predicted class per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<u32> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Post-activation maps of one layer for one image, `channels x h x w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMaps {
    pub layer_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub maps: Vec<f32>,
}

impl FeatureMaps {
    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.height * self.width;
        &self.maps[c * len..(c + 1) * len]
    }

    pub fn active_count(&self, c: usize) -> usize {
        self.channel(c).iter().filter(|&&v| v > 0.0).count()
    }
}

/// The `k` channels with the most strictly positive entries, most active first.
pub fn top_active_channels(maps: &FeatureMaps, k: usize) -> Result<Vec<usize>> {
    if k > maps.channels {
        return Err(Error::InvalidArgument(format!(
            "asked for {k} channels, layer `{}` has {}",
            maps.layer_id, maps.channels
        )));
    }
    let mut order: Vec<(usize, usize)> = (0..maps.channels).map(|c| (maps.active_count(c), c)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, c)| c).collect())
}

#[derive(Debug, Clone)]
struct Node {
    id: String,
    layer: Layer,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    nodes: Vec<Node>,
}

/// Parameter and buffer values, in layer order. Used for in-memory best-so-far copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Vec<Vec<f32>>);

struct Builder {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    spec: ModelSpec,
    seed: u64,
}

impl Builder {
    fn push(&mut self, id: impl Into<String>, layer: Layer) {
        self.nodes.push(Node {
            id: id.into(),
            layer,
        });
    }

    fn conv(&mut self, id: &str, cin: usize, cout: usize) {
        let conv = Conv3x3::new(cin, cout, &mut self.rng);
        self.push(id, Layer::Conv(conv));
        if self.spec.batch_norm {
            self.push(format!("{id}.bn"), Layer::BatchNorm(BatchNorm::new(cout)));
        }
        self.push(format!("{id}.relu"), Layer::relu());
    }

    fn hidden(&mut self, id: &str, fin: usize, fout: usize) {
        let lin = Linear::new(fin, fout, &mut self.rng);
        self.push(id, Layer::Linear(lin));
        if self.spec.batch_norm {
            self.push(format!("{id}.bn"), Layer::BatchNorm(BatchNorm::new(fout)));
        }
        self.push(format!("{id}.relu"), Layer::relu());
        if self.spec.dropout_rate > 0.0 {
            let seed = self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(self.nodes.len() as u64 + 1));
            self.push(
                format!("{id}.dropout"),
                Layer::Dropout(Dropout::new(self.spec.dropout_rate, seed)),
            );
        }
    }
}

/// Constructs a freshly initialized network; identical `(spec, seed)` give identical weights.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder {
        nodes: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        spec: *spec,
        seed,
    };
    let n_out = spec.n_classes as usize;
    let flat_in = match spec.family {
        Family::Svgg => {
            let (mut h, mut w, mut cin) = spec.input_shape;
            let mut index = 1;
            for (block, &width) in SVGG_BLOCKS.iter().enumerate() {
                for _ in 0..2 {
                    b.conv(&format!("conv{index}"), cin, width);
                    cin = width;
                    index += 1;
                }
                b.push(format!("pool{}", block + 1), Layer::MaxPool(MaxPool2x2::default()));
                h = MaxPool2x2::output_size(h);
                w = MaxPool2x2::output_size(w);
            }
            h * w * cin
        }
        _ => spec.input_len(),
    };
    b.push("flatten", Layer::flatten());
    let mut fin = flat_in;
    let hidden: Vec<usize> = match spec.family {
        Family::Svgg => vec![SVGG_FC_WIDTH; 2],
        f => vec![MLP_HIDDEN; f.hidden_layers()],
    };
    for (i, &width) in hidden.iter().enumerate() {
        b.hidden(&format!("fc{}", i + 1), fin, width);
        fin = width;
    }
    let out = Linear::new(fin, n_out, &mut b.rng);
    b.push("out", Layer::Linear(out));
    Ok(Model {
        spec: *spec,
        seed,
        nodes: b.nodes,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Ids of every node in forward order.
    pub fn node_ids(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    /// Ids of the convolution and fully connected layers ("conv1".."conv6", "fc1", "fc2", "out").
    pub fn layer_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Conv(_) | Layer::Linear(_)))
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn conv_layer_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Conv(_)))
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn normalization_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::BatchNorm(_)))
            .count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Human-readable layer sequence, e.g. `conv 3x3x16`, `ReLU`, `max pool 2x2`, `FC-128`.
    pub fn describe(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.layer {
                Layer::Conv(c) => Some(format!("conv 3x3x{}", c.out_channels)),
                Layer::BatchNorm(_) => Some("BN".to_string()),
                Layer::Relu { .. } => Some("ReLU".to_string()),
                Layer::MaxPool(_) => Some("max pool 2x2".to_string()),
                Layer::Flatten { .. } => None,
                Layer::Linear(l) => Some(format!("FC-{}", l.out_features)),
                Layer::Dropout(d) => Some(format!("dropout {}", d.rate)),
            })
            .collect();
        out.push("softmax".to_string());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        self.nodes.iter().flat_map(|n| n.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params_mut()).collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut out = Vec::new();
        for n in &self.nodes {
            out.extend(n.layer.params().into_iter().map(|p| p.value.clone()));
            out.extend(n.layer.buffers().into_iter().cloned());
        }
        Snapshot(out)
    }

    pub fn restore(&mut self, snapshot: &Snapshot) {
        let mut it = snapshot.0.iter();
        for n in &mut self.nodes {
            for p in n.layer.params_mut() {
                p.value.clone_from(it.next().expect("snapshot from a different model"));
            }
            for b in n.layer.buffers_mut() {
                b.clone_from(it.next().expect("snapshot from a different model"));
            }
        }
    }

    pub fn clear_cache(&mut self) {
        for n in &mut self.nodes {
            n.layer.clear_cache();
        }
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        if batch.image_shape() != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "model expects {:?} images, got {:?}",
                self.spec.input_shape,
                batch.image_shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn input_act(&self, batch: &ImageBatch, indices: &[usize]) -> Act {
        let (h, w, c) = self.spec.input_shape;
        let mut data = vec![0.0f32; indices.len() * h * w * c];
        batch.gather_unit(indices, &mut data);
        Act::new(indices.len(), h, w, c, data)
    }

    /// Training-mode forward pass to logits.
    pub(crate) fn forward_train(&mut self, x: Act) -> Act {
        self.nodes.iter_mut().fold(x, |a, n| n.layer.forward_train(a))
    }

    /// Backpropagates the logit gradient, accumulating parameter gradients.
    pub(crate) fn backward(&mut self, dlogits: Act) {
        let mut dy = Some(dlogits);
        for (i, n) in self.nodes.iter_mut().enumerate().rev() {
            dy = n.layer.backward(dy.take().expect("gradient"), i > 0);
        }
    }

    pub(crate) fn forward_eval(&self, x: Act) -> Act {
        self.nodes.iter().fold(x, |a, n| n.layer.forward_eval(a))
    }

    /// Evaluation-mode class probabilities.
    pub fn predict(&self, batch: &ImageBatch) -> Result<ProbabilityBatch> {
        self.check_batch(batch)?;
        let k = self.spec.n_classes as usize;
        let mut probs = Vec::with_capacity(batch.len() * k);
        let indices: Vec<usize> = (0..batch.len()).collect();
        for chunk in indices.chunks(PREDICT_CHUNK) {
            let mut logits = self.forward_eval(self.input_act(batch, chunk)).data;
            softmax_rows(&mut logits, k);
            probs.extend_from_slice(&logits);
        }
        Ok(ProbabilityBatch { n_classes: k, probs })
    }

    /// Post-ReLU maps of the named convolution for a single image.
    pub fn activations(&self, image: &ImageBatch, layer_id: &str) -> Result<FeatureMaps> {
        self.check_batch(image)?;
        if image.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "activations take a single image, got {}",
                image.len()
            )));
        }
        let valid = self.conv_layer_ids();
        if !valid.iter().any(|v| v == layer_id) {
            return Err(Error::UnknownLayer {
                requested: layer_id.to_string(),
                valid,
            });
        }
        let tap = format!("{layer_id}.relu");
        let mut a = self.input_act(image, &[0]);
        for n in &self.nodes {
            a = n.layer.forward_eval(a);
            if n.id == tap {
                break;
            }
        }
        let (h, w, c) = (a.h, a.w, a.c);
        let mut maps = vec![0.0f32; c * h * w];
        for (p, px) in a.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                maps[ch * h * w + p] = v;
            }
        }
        Ok(FeatureMaps {
            layer_id: layer_id.to_string(),
            channels: c,
            height: h,
            width: w,
            maps,
        })
    }

    /// Sets every bias (and BN shift) to zero; used by tests and probes.
    pub fn zero_biases(&mut self) {
        for n in &mut self.nodes {
            match &mut n.layer {
                Layer::Conv(c) => c.bias.value.fill(0.0),
                Layer::Linear(l) => l.bias.value.fill(0.0),
                Layer::BatchNorm(b) => {
                    b.beta.value.fill(0.0);
                    b.running_mean.fill(0.0);
                }
                _ => {}
            }
        }
    }
}

// Checkpoint file:
//   b"SBCK" | u32 schema | u32 header_len | header JSON | f32 LE tensors in header order
const CHECKPOINT_MAGIC: &[u8; 4] = b"SBCK";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

impl Model {
    fn named_tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let params = n.layer.params();
            let names: &[&str] = match n.layer {
                Layer::BatchNorm(_) => &["gamma", "beta", "running_mean", "running_var"],
                _ => &["weight", "bias"],
            };
            let tensors = params
                .into_iter()
                .map(|p| &p.value)
                .chain(n.layer.buffers());
            for (name, t) in names.iter().zip(tensors) {
                out.push((format!("{}.{name}", n.id), t));
            }
        }
        out
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let tensors = self.named_tensors();
        let header = CheckpointHeader {
            spec: self.spec,
            seed: self.seed,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    len: t.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(12 + json.len() + 4 * self.parameter_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
            .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        if buf.len() < 12 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let schema = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "unsupported schema {schema}, expected {CHECKPOINT_SCHEMA}"
            )));
        }
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let body = buf
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = build_model(&header.spec, header.seed)?;
        let expected: Vec<(String, usize)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect();
        let found: Vec<(String, usize)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.len))
            .collect();
        if expected != found {
            return Err(Error::Checkpoint(
                "tensor layout does not match the model spec".into(),
            ));
        }
        let mut data = buf[12 + hlen..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let total: usize = expected.iter().map(|(_, l)| l).sum();
        if buf.len() - 12 - hlen != total * 4 {
            return Err(Error::Checkpoint("tensor data has the wrong length".into()));
        }
        for n in &mut model.nodes {
            for p in n.layer.params_mut() {
                for v in p.value.iter_mut() {
                    *v = data.next().unwrap();
                }
            }
            for b in n.layer.buffers_mut() {
                for v in b.iter_mut() {
                    *v = data.next().unwrap();
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

//! Model parameters: shapes, initialization, flat iteration for the
//! optimizer, and the JSON checkpoint container.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which displacement head the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Eq.-style baseline: per-edge scalar times edge direction, summed.
    Sum,
    /// Projection magnitudes reconstructed by sphere fitting.
    Drlabel,
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadMode::Sum => write!(f, "sum"),
            HeadMode::Drlabel => write!(f, "drlabel"),
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(HeadMode::Sum),
            "drlabel" => Ok(HeadMode::Drlabel),
            other => Err(format!("unknown head mode '{other}' (expected sum|drlabel)")),
        }
    }
}

/// Network shape hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub n_species: usize,
    pub hidden: usize,
    pub n_gbf: usize,
    pub layers: usize,
    /// Distance covered by the Gaussian basis centers.
    pub gbf_max_dist: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { n_species: 4, hidden: 64, n_gbf: 32, layers: 4, gbf_max_dist: 2.0 }
    }
}

/// A two-layer perceptron `silu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            w1: uniform_fan_in(rng, d_in, d_hidden),
            b1: Array2::zeros((1, d_hidden)),
            w2: uniform_fan_in(rng, d_hidden, d_out),
            b2: Array2::zeros((1, d_out)),
        }
    }

    fn zero_out(&mut self) {
        self.w2.fill(0.0);
        self.b2.fill(0.0);
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array2::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array2::zeros(self.b2.raw_dim()),
        }
    }
}

/// One message-passing layer: a message MLP over
/// `[h_owner || h_neighbor || gbf]` and a residual node-update MLP over
/// `[h || aggregated message]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub message: Mlp,
    pub update: Mlp,
}

/// All learnable weights plus the head-mode selector and the intermediate
/// position update frequency `F` (0 = disabled; updates fire after every F
/// layers except the last, head parameters shared across update points).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub head_mode: HeadMode,
    pub interpos_frequency: usize,
    /// Fixed Gaussian basis centers and widths (not trained).
    pub gbf_centers: Vec<f64>,
    pub gbf_gammas: Vec<f64>,
    pub embedding: Array2<f64>,
    /// Per-edge-type affine (a, b) applied to distances before the basis.
    pub gbf_affine: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub sender_w: Array2<f64>,
    pub sender_b: Array2<f64>,
    pub receiver_w: Array2<f64>,
    pub receiver_b: Array2<f64>,
    pub magnitude_head: Mlp,
    pub sum_head: Mlp,
    pub energy_head: Mlp,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Array2<f64> {
    let bound = 1.0 / (d_in as f64).sqrt();
    Array2::from_shape_fn((d_in, d_out), |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Training initialization: uniform fan-in weights, zeroed final head
    /// layers so the untrained model predicts zero displacement and
    /// bias-only energy.
    pub fn init(dims: &ModelDims, head_mode: HeadMode, interpos_frequency: usize, seed: u64) -> Self {
        let mut p = Self::init_random(dims, head_mode, interpos_frequency, seed);
        p.magnitude_head.zero_out();
        p.sum_head.zero_out();
        p.energy_head.zero_out();
        p
    }

    /// Fully random initialization (no zeroed layers); used by gradient and
    /// equivariance checks that need generic parameter values.
    pub fn init_random(
        dims: &ModelDims,
        head_mode: HeadMode,
        interpos_frequency: usize,
        seed: u64,
    ) -> Self {
        assert!(
            interpos_frequency == 0 || (1..=dims.layers).contains(&interpos_frequency),
            "interpos frequency must be 0 or within 1..=layers"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = dims.hidden;
        let k = dims.n_gbf;
        let n_types = dims.n_species * dims.n_species;

        // Evenly spaced centers on [0, max_dist]; widths set to the spacing.
        let spacing = dims.gbf_max_dist / (k - 1).max(1) as f64;
        let gbf_centers: Vec<f64> = (0..k).map(|i| i as f64 * spacing).collect();
        let gbf_gammas = vec![1.0 / (2.0 * spacing * spacing); k];

        let embedding = Array2::from_shape_fn((dims.n_species, h), |_| rng.random_range(-1.0..1.0));
        let mut gbf_affine = Array2::zeros((n_types, 2));
        for t in 0..n_types {
            gbf_affine[[t, 0]] = 1.0;
        }

        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                message: Mlp::init(&mut rng, 2 * h + k, h, h),
                update: Mlp::init(&mut rng, 2 * h, h, h),
            })
            .collect();

        ModelParams {
            dims: dims.clone(),
            head_mode,
            interpos_frequency,
            gbf_centers,
            gbf_gammas,
            embedding,
            gbf_affine,
            layers,
            sender_w: uniform_fan_in(&mut rng, h, h),
            sender_b: Array2::zeros((1, h)),
            receiver_w: uniform_fan_in(&mut rng, h, h),
            receiver_b: Array2::zeros((1, h)),
            magnitude_head: Mlp::init(&mut rng, k + 2 * h, h, 1),
            sum_head: Mlp::init(&mut rng, k + 2 * h, h, 1),
            energy_head: Mlp::init(&mut rng, h, h, 1),
        }
    }

    /// A same-shaped parameter set of all zeros (gradient/moment buffers).
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            dims: self.dims.clone(),
            head_mode: self.head_mode,
            interpos_frequency: self.interpos_frequency,
            gbf_centers: self.gbf_centers.clone(),
            gbf_gammas: self.gbf_gammas.clone(),
            embedding: Array2::zeros(self.embedding.raw_dim()),
            gbf_affine: Array2::zeros(self.gbf_affine.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { message: l.message.zeros_like(), update: l.update.zeros_like() })
                .collect(),
            sender_w: Array2::zeros(self.sender_w.raw_dim()),
            sender_b: Array2::zeros(self.sender_b.raw_dim()),
            receiver_w: Array2::zeros(self.receiver_w.raw_dim()),
            receiver_b: Array2::zeros(self.receiver_b.raw_dim()),
            magnitude_head: self.magnitude_head.zeros_like(),
            sum_head: self.sum_head.zeros_like(),
            energy_head: self.energy_head.zeros_like(),
        }
    }

    /// All learnable tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("embedding".into(), &self.embedding),
            ("gbf_affine".into(), &self.gbf_affine),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.message.w1"), &layer.message.w1));
            out.push((format!("layer{i}.message.b1"), &layer.message.b1));
            out.push((format!("layer{i}.message.w2"), &layer.message.w2));
            out.push((format!("layer{i}.message.b2"), &layer.message.b2));
            out.push((format!("layer{i}.update.w1"), &layer.update.w1));
            out.push((format!("layer{i}.update.b1"), &layer.update.b1));
            out.push((format!("layer{i}.update.w2"), &layer.update.w2));
            out.push((format!("layer{i}.update.b2"), &layer.update.b2));
        }
        for (name, mlp) in [
            ("magnitude_head", &self.magnitude_head),
            ("sum_head", &self.sum_head),
            ("energy_head", &self.energy_head),
        ] {
            out.push((format!("{name}.w1"), &mlp.w1));
            out.push((format!("{name}.b1"), &mlp.b1));
            out.push((format!("{name}.w2"), &mlp.w2));
            out.push((format!("{name}.b2"), &mlp.b2));
        }
        out.push(("sender_w".into(), &self.sender_w));
        out.push(("sender_b".into(), &self.sender_b));
        out.push(("receiver_w".into(), &self.receiver_w));
        out.push(("receiver_b".into(), &self.receiver_b));
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("gbf_affine".into(), &mut self.gbf_affine),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.message.w1"), &mut layer.message.w1));
            out.push((format!("layer{i}.message.b1"), &mut layer.message.b1));
            out.push((format!("layer{i}.message.w2"), &mut layer.message.w2));
            out.push((format!("layer{i}.message.b2"), &mut layer.message.b2));
            out.push((format!("layer{i}.update.w1"), &mut layer.update.w1));
            out.push((format!("layer{i}.update.b1"), &mut layer.update.b1));
            out.push((format!("layer{i}.update.w2"), &mut layer.update.w2));
            out.push((format!("layer{i}.update.b2"), &mut layer.update.b2));
        }
        for (name, mlp) in [
            ("magnitude_head", &mut self.magnitude_head),
            ("sum_head", &mut self.sum_head),
            ("energy_head", &mut self.energy_head),
        ] {
            out.push((format!("{name}.w1"), &mut mlp.w1));
            out.push((format!("{name}.b1"), &mut mlp.b1));
            out.push((format!("{name}.w2"), &mut mlp.w2));
            out.push((format!("{name}.b2"), &mut mlp.b2));
        }
        out.push(("sender_w".into(), &mut self.sender_w));
        out.push(("sender_b".into(), &mut self.sender_b));
        out.push(("receiver_w".into(), &mut self.receiver_w));
        out.push(("receiver_b".into(), &mut self.receiver_b));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Self-describing JSON checkpoint: every tensor with its shape, the fixed
/// basis layout, the head mode, and the training config that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dims: ModelDims,
    pub head_mode: HeadMode,
    pub interpos_frequency: usize,
    pub gbf_centers: Vec<f64>,
    pub gbf_gammas: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
    /// Training configuration echoed verbatim (opaque to the library).
    pub train_config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "drlabel-checkpoint-v1";

impl Checkpoint {
    pub fn from_params(params: &ModelParams, train_config: serde_json::Value) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: params.dims.clone(),
            head_mode: params.head_mode,
            interpos_frequency: params.interpos_frequency,
            gbf_centers: params.gbf_centers.clone(),
            gbf_gammas: params.gbf_gammas.clone(),
            tensors,
            train_config,
        }
    }

    pub fn into_params(self) -> Result<ModelParams, ModelError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::BadCheckpoint(format!(
                "unknown checkpoint format '{}'",
                self.format
            )));
        }
        let mut params = ModelParams::init(&self.dims, self.head_mode, self.interpos_frequency, 0);
        params.gbf_centers = self.gbf_centers;
        params.gbf_gammas = self.gbf_gammas;
        let mut by_name: std::collections::BTreeMap<String, TensorEntry> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        for (name, slot) in params.tensors_mut() {
            let entry = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing tensor '{name}'")))?;
            if entry.shape != [slot.nrows(), slot.ncols()] || entry.data.len() != slot.len() {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    entry.shape,
                    [slot.nrows(), slot.ncols()]
                )));
            }
            *slot = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), entry.data)
                .expect("length checked above");
        }
        if !by_name.is_empty() {
            return Err(ModelError::BadCheckpoint(format!(
                "unexpected tensors: {:?}",
                by_name.keys().collect::<Vec<_>>()
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let file = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| ModelError::Io(e.to_string()))?,
        );
        serde_json::to_writer(file, self).map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let file = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| ModelError::Io(e.to_string()))?,
        );
        serde_json::from_reader(file).map_err(|e| ModelError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let dims = ModelDims { hidden: 16, n_gbf: 8, layers: 2, ..ModelDims::default() };
        let a = ModelParams::init(&dims, HeadMode::Drlabel, 0, 5);
        let b = ModelParams::init(&dims, HeadMode::Drlabel, 0, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_init_heads() {
        let dims = ModelDims { hidden: 16, n_gbf: 8, layers: 2, ..ModelDims::default() };
        let p = ModelParams::init(&dims, HeadMode::Sum, 0, 5);
        assert_eq!(p.magnitude_head.w2.sum(), 0.0);
        assert_eq!(p.sum_head.w2.sum(), 0.0);
        assert_eq!(p.energy_head.w2.sum(), 0.0);
        assert_ne!(p.magnitude_head.w1.sum(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dims = ModelDims { hidden: 12, n_gbf: 6, layers: 2, ..ModelDims::default() };
        let p = ModelParams::init_random(&dims, HeadMode::Drlabel, 2, 9);
        let ck = Checkpoint::from_params(&p, serde_json::json!({"note": "test"}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_params().unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn tensor_views_align() {
        let dims = ModelDims { hidden: 8, n_gbf: 4, layers: 1, ..ModelDims::default() };
        let mut p = ModelParams::init(&dims, HeadMode::Sum, 0, 1);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(p.n_parameters() > 0);
    }
}


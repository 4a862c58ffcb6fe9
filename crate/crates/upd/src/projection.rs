//! Learned injection of the correlation signal into the decoder's feature
//! space, and inference-time control of the signal strength.
//!
//! The layer is a single affine map e = W u + b from the concatenated
//! correlation bundle to one vector in the decoder's hidden dimension. Each
//! correlation mode gets its own layer because the input widths differ.
//!
//! Signal strength control blends the projected vector with seeded standard
//! normal noise, e' = alpha e + (1 - alpha) z. At alpha = 1 the path returns
//! the input untouched, bit for bit, so the control machinery provably
//! cannot perturb normal operation. At alpha = 0 the decoder sees pure
//! noise, which calibrates how much of the behavior rests on the injected
//! signal rather than on the prompt.

use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationBundle, CorrelationMode};
use crate::error::{Result, UpdError};
use crate::numerics::random::{derive_seed, gaussian_matrix, rng_from_seed};
use crate::numerics::{DenseMatrix, GradientTape, NodeId, Params};

pub const PROJECTION_INIT_STD: f64 = 0.02;

/// Shape-level description of one projection layer. The weights themselves
/// live in a [`Params`] map under this layer's parameter names so training,
/// checkpointing, and freeze hashing all see one flat namespace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionLayer {
    mode: CorrelationMode,
    emb_dim: usize,
    vlm_dim: usize,
}

impl ProjectionLayer {
    pub fn new(mode: CorrelationMode, emb_dim: usize, vlm_dim: usize) -> Self {
        Self {
            mode,
            emb_dim,
            vlm_dim,
        }
    }

    pub fn mode(&self) -> CorrelationMode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.mode.input_dim(self.emb_dim)
    }

    pub fn vlm_dim(&self) -> usize {
        self.vlm_dim
    }

    pub fn weight_name(&self) -> String {
        format!("proj.{}.weight", mode_tag(self.mode))
    }

    pub fn bias_name(&self) -> String {
        format!("proj.{}.bias", mode_tag(self.mode))
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.weight_name(), self.bias_name()]
    }

    /// Inserts freshly initialized weights: small gaussian weight, zero bias.
    pub fn init_params(&self, seed: u64, params: &mut Params) {
        let mut rng = rng_from_seed(derive_seed(
            seed,
            &format!("projection-init:{}", mode_tag(self.mode)),
        ));
        let weight = gaussian_matrix(&mut rng, self.vlm_dim, self.input_dim(), PROJECTION_INIT_STD);
        params.insert(self.weight_name(), weight);
        params.insert(self.bias_name(), DenseMatrix::zeros(self.vlm_dim, 1));
    }

    fn check_bundle(&self, bundle: &CorrelationBundle) -> Result<()> {
        if bundle.mode() != self.mode {
            return Err(UpdError::contract(format!(
                "projection built for {:?} got a {:?} bundle",
                self.mode,
                bundle.mode()
            )));
        }
        if bundle.input_dim() != self.input_dim() {
            return Err(UpdError::ShapeMismatch {
                op: "projection.forward".into(),
                left: (self.vlm_dim, self.input_dim()),
                right: (bundle.input_dim(), 1),
            });
        }
        Ok(())
    }

    fn fetch<'p>(&self, params: &'p Params, name: &str) -> Result<&'p DenseMatrix> {
        params
            .get(name)
            .ok_or_else(|| UpdError::MissingArtifact(format!("parameter {name}")))
    }

    /// Plain evaluation path: e = W u + b as a (vlm_dim, 1) column.
    pub fn forward(&self, params: &Params, bundle: &CorrelationBundle) -> Result<DenseMatrix> {
        self.check_bundle(bundle)?;
        let weight = self.fetch(params, &self.weight_name())?;
        let bias = self.fetch(params, &self.bias_name())?;
        let mut e = weight.matmul(&bundle.as_column())?;
        e.add_assign(bias)?;
        Ok(e)
    }

    /// Differentiable path. Registers the weight and bias on the tape and
    /// returns the node holding the projected column.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradientTape,
        params: &Params,
        bundle: &CorrelationBundle,
    ) -> Result<NodeId> {
        self.check_bundle(bundle)?;
        let weight = tape.parameter(
            &self.weight_name(),
            self.fetch(params, &self.weight_name())?.clone(),
        )?;
        let bias = tape.parameter(
            &self.bias_name(),
            self.fetch(params, &self.bias_name())?.clone(),
        )?;
        let u = tape.input_column(bundle.concatenated());
        let wu = tape.matmul(weight, u)?;
        tape.add(wu, bias)
    }
}

fn mode_tag(mode: CorrelationMode) -> &'static str {
    match mode {
        CorrelationMode::MultipleChoice => "mc",
        CorrelationMode::OpenEnded => "open",
    }
}

/// Inference-time signal strength. Lives entirely outside training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ControlConfig {
    pub alpha: f64,
    pub noise_seed: u64,
}

impl ControlConfig {
    pub fn new(alpha: f64, noise_seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(UpdError::Config(format!(
                "control alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self { alpha, noise_seed })
    }

    /// Blends the projected vector with item-keyed standard normal noise.
    /// At alpha = 1 this returns the input unchanged, without touching a
    /// single bit, so the identity endpoint holds exactly.
    pub fn apply(&self, e: &DenseMatrix, item_key: &str) -> DenseMatrix {
        if self.alpha == 1.0 {
            return e.clone();
        }
        let mut rng = rng_from_seed(derive_seed(
            self.noise_seed,
            &format!("control-noise:{item_key}"),
        ));
        let noise = gaussian_matrix(&mut rng, e.rows(), e.cols(), 1.0);
        let mut out = e.scale(self.alpha);
        out.add_assign(&noise.scale(1.0 - self.alpha))
            .expect("shapes match");
        out
    }
}

/// The standard sweep grid: 0.0, 0.1, ... 1.0.
pub fn alpha_sweep_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

//! Low-rank adapters over frozen linear layers, with an optional inner
//! mixing matrix computed from the correlation signal.
//!
//! A standard adapter adds (alpha / r) * B A x to the frozen layer output.
//! The injected variant inserts a per-item mixing matrix between the two
//! factors: delta = (alpha / r) * B (P u + C) A x, where u is the prompt's
//! concatenated correlation bundle, P is a zero-initialized linear map with
//! no bias, and C starts as the identity. At initialization P u + C = I, so
//! the injected adapter behaves exactly like the standard one until training
//! moves P or C.
//!
//! The delta is always applied as three small matrix products against the
//! activation; the rank-expanded d x k update is never materialized in the
//! forward path. Because the injected update depends on the input prompt,
//! it cannot be folded into the frozen weight: `try_merge` refuses.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpdError};
use crate::numerics::random::{derive_seed, gaussian_matrix, rng_from_seed};
use crate::numerics::{DenseMatrix, GradientTape, NodeId, Params};

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Standard,
    Injected,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub variant: AdapterVariant,
    /// Width of the correlation signal feeding the mixing matrix. Ignored
    /// for the standard variant.
    pub signal_dim: usize,
}

/// One adapter attached to one frozen linear layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraAdapter {
    layer: String,
    out_dim: usize,
    in_dim: usize,
    rank: usize,
    alpha: f64,
    variant: AdapterVariant,
    signal_dim: usize,
}

impl LoraAdapter {
    pub fn new(layer: impl Into<String>, out_dim: usize, in_dim: usize, config: LoraConfig) -> Result<Self> {
        if config.rank == 0 || config.rank > out_dim.min(in_dim) {
            return Err(UpdError::Config(format!(
                "adapter rank {} outside 1..={}",
                config.rank,
                out_dim.min(in_dim)
            )));
        }
        if config.variant == AdapterVariant::Injected && config.signal_dim == 0 {
            return Err(UpdError::Config(
                "injected adapter needs a nonzero signal dim".into(),
            ));
        }
        Ok(Self {
            layer: layer.into(),
            out_dim,
            in_dim,
            rank: config.rank,
            alpha: config.alpha,
            variant: config.variant,
            signal_dim: config.signal_dim,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn variant(&self) -> AdapterVariant {
        self.variant
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn down_name(&self) -> String {
        format!("adapter.{}.a", self.layer)
    }

    pub fn up_name(&self) -> String {
        format!("adapter.{}.b", self.layer)
    }

    pub fn signal_proj_name(&self) -> String {
        format!("adapter.{}.signal_proj", self.layer)
    }

    pub fn mix_bias_name(&self) -> String {
        format!("adapter.{}.c", self.layer)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.up_name(), self.down_name()];
        if self.variant == AdapterVariant::Injected {
            names.push(self.signal_proj_name());
            names.push(self.mix_bias_name());
        }
        names
    }

    /// B starts at zero so the adapted model is exactly the frozen model; A
    /// starts small and random so gradients through B have a direction.
    pub fn init_params(&self, seed: u64, params: &mut Params) {
        let mut rng = rng_from_seed(derive_seed(seed, &format!("adapter-init:{}", self.layer)));
        params.insert(self.up_name(), DenseMatrix::zeros(self.out_dim, self.rank));
        params.insert(
            self.down_name(),
            gaussian_matrix(&mut rng, self.rank, self.in_dim, ADAPTER_INIT_STD),
        );
        if self.variant == AdapterVariant::Injected {
            params.insert(
                self.signal_proj_name(),
                DenseMatrix::zeros(self.rank * self.rank, self.signal_dim),
            );
            params.insert(self.mix_bias_name(), DenseMatrix::identity(self.rank));
        }
    }

    fn fetch<'p>(&self, params: &'p Params, name: &str) -> Result<&'p DenseMatrix> {
        params
            .get(name)
            .ok_or_else(|| UpdError::MissingArtifact(format!("parameter {name}")))
    }

    fn check_signal(&self, signal: Option<&[f64]>) -> Result<()> {
        if self.variant != AdapterVariant::Injected {
            return Ok(());
        }
        match signal {
            Some(u) if u.len() == self.signal_dim => Ok(()),
            Some(u) => Err(UpdError::contract(format!(
                "adapter {} expects signal dim {}, got {}",
                self.layer,
                self.signal_dim,
                u.len()
            ))),
            None => Err(UpdError::contract(format!(
                "injected adapter {} called without a signal",
                self.layer
            ))),
        }
    }

    /// The mixing matrix for one prompt: P u reshaped to (r, r) plus C.
    /// Standard adapters mix with the identity.
    pub fn mixing(&self, params: &Params, signal: Option<&[f64]>) -> Result<DenseMatrix> {
        self.check_signal(signal)?;
        match self.variant {
            AdapterVariant::Standard => Ok(DenseMatrix::identity(self.rank)),
            AdapterVariant::Injected => {
                let proj = self.fetch(params, &self.signal_proj_name())?;
                let c = self.fetch(params, &self.mix_bias_name())?;
                let u = DenseMatrix::column_vector(signal.expect("checked above"));
                let flat = proj.matmul(&u)?;
                let mut m = DenseMatrix::new(self.rank, self.rank, flat.into_data())?;
                m.add_assign(c)?;
                Ok(m)
            }
        }
    }

    /// Differentiable delta over a row-major activation block (T, in_dim):
    /// rows -> (alpha / r) * rows A^T M^T B^T, shape (T, out_dim).
    pub fn delta_rows_on_tape(
        &self,
        tape: &mut GradientTape,
        params: &Params,
        rows: NodeId,
        signal: Option<&[f64]>,
    ) -> Result<NodeId> {
        self.check_signal(signal)?;
        let a = tape.parameter(&self.down_name(), self.fetch(params, &self.down_name())?.clone())?;
        let b = tape.parameter(&self.up_name(), self.fetch(params, &self.up_name())?.clone())?;
        let a_t = tape.transpose(a);
        let down = tape.matmul(rows, a_t)?;
        let mixed = match self.variant {
            AdapterVariant::Standard => down,
            AdapterVariant::Injected => {
                let proj = tape.parameter(
                    &self.signal_proj_name(),
                    self.fetch(params, &self.signal_proj_name())?.clone(),
                )?;
                let c = tape.parameter(
                    &self.mix_bias_name(),
                    self.fetch(params, &self.mix_bias_name())?.clone(),
                )?;
                let u = tape.input_column(signal.expect("checked above"));
                let flat = tape.matmul(proj, u)?;
                let m_lin = tape.reshape(flat, self.rank, self.rank)?;
                let m = tape.add(m_lin, c)?;
                let m_t = tape.transpose(m);
                tape.matmul(down, m_t)?
            }
        };
        let b_t = tape.transpose(b);
        let up = tape.matmul(mixed, b_t)?;
        Ok(tape.scale(up, self.scaling()))
    }

    /// Materializes delta W = (alpha / r) B M A densely. Test oracle and
    /// merge helper; the forward path never calls this.
    pub fn dense_delta(&self, params: &Params, signal: Option<&[f64]>) -> Result<DenseMatrix> {
        let m = self.mixing(params, signal)?;
        let b = self.fetch(params, &self.up_name())?;
        let a = self.fetch(params, &self.down_name())?;
        Ok(b.matmul(&m)?.matmul(a)?.scale(self.scaling()))
    }

    /// Folds a standard adapter into the frozen weight, which is stored in
    /// (in_dim, out_dim) layout. Injected adapters depend on the prompt, so
    /// there is no single weight to fold into; that call is a contract error.
    pub fn try_merge(&self, params: &Params, base_stored: &DenseMatrix) -> Result<DenseMatrix> {
        if self.variant == AdapterVariant::Injected {
            return Err(UpdError::contract(format!(
                "adapter {} computes its update from each prompt's signal; merging is undefined",
                self.layer
            )));
        }
        if base_stored.shape() != (self.in_dim, self.out_dim) {
            return Err(UpdError::ShapeMismatch {
                op: "adapter.try_merge".into(),
                left: (self.in_dim, self.out_dim),
                right: base_stored.shape(),
            });
        }
        let delta = self.dense_delta(params, None)?;
        let mut merged = base_stored.clone();
        merged.add_assign(&delta.transposed())?;
        Ok(merged)
    }
}

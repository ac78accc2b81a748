//! Building-block layers: affine maps and batch normalization, registered in
//! a `ParamStore` under path-like names and applied through a `Pass`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Mode, ParamStore, Pass, Tensor};

/// Negative slope used by every activation in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Epsilon added to batch variances before the square root.
pub const BN_EPSILON: f64 = 1e-5;

/// Exponential-moving-average factor for running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Fully connected map [R, d_in] -> [R, d_out], optionally with bias.
///
/// Layers whose output goes straight into train-mode batch normalization are
/// built without one: the normalization subtracts any per-channel constant,
/// leaving such a bias with an identically zero gradient.
#[derive(Clone, Debug)]
pub struct Affine {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub has_bias: bool,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Affine> {
        Affine::with_bias(store, rng, name, d_in, d_out, true)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        has_bias: bool,
    ) -> Result<Affine> {
        let bound = (6.0 / d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.uniform(-bound, bound)).collect();
        store.register(&format!("{name}.w"), &[d_in, d_out], w, true)?;
        if has_bias {
            store.register(&format!("{name}.b"), &[d_out], vec![0.0; d_out], true)?;
        }
        Ok(Affine {
            name: name.to_string(),
            d_in,
            d_out,
            has_bias,
        })
    }

    pub fn forward(&self, pass: &Pass, x: &Tensor) -> Result<Tensor> {
        let w = pass.param(&format!("{}.w", self.name))?;
        let y = x.matmul(&w)?;
        if self.has_bias {
            y.add_row(&pass.param(&format!("{}.b", self.name))?)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.has_bias { self.d_out } else { 0 }
    }
}

/// Per-feature batch normalization over the rows of a [B, width] tensor.
///
/// Train mode normalizes with the batch moments (composed from primitive ops,
/// so gradients flow through the statistics) and updates running buffers;
/// eval mode uses the running buffers as constants. Disabled instances are
/// the identity and register no parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub width: usize,
    pub enabled: bool,
}

impl BatchNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        enabled: bool,
    ) -> Result<BatchNorm> {
        if enabled {
            store.register(&format!("{name}.scale"), &[width], vec![1.0; width], true)?;
            store.register(&format!("{name}.shift"), &[width], vec![0.0; width], true)?;
            store.register(
                &format!("{name}.running_mean"),
                &[width],
                vec![0.0; width],
                false,
            )?;
            store.register(
                &format!("{name}.running_var"),
                &[width],
                vec![1.0; width],
                false,
            )?;
        }
        Ok(BatchNorm {
            name: name.to_string(),
            width,
            enabled,
        })
    }

    pub fn forward(&self, pass: &Pass, x: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return Ok(x.clone());
        }
        if x.shape().len() != 2 || x.shape()[1] != self.width {
            return Err(Error::dim(format!(
                "batch_norm {}: expected [B, {}], got {:?}",
                self.name,
                self.width,
                x.shape()
            )));
        }
        let scale = pass.param(&format!("{}.scale", self.name))?;
        let shift = pass.param(&format!("{}.shift", self.name))?;
        let rows = x.shape()[0];
        let normalized = match pass.mode() {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::config(format!(
                        "batch_norm {}: train mode needs at least 2 rows, got {rows}",
                        self.name
                    )));
                }
                let (xhat, mean, var) = x.normalize_rows(BN_EPSILON)?;
                self.update_running(pass, &mean, &var)?;
                xhat
            }
            Mode::Eval => {
                let rm = Tensor::from_vec(
                    pass.buffer(&format!("{}.running_mean", self.name))?,
                    &[self.width],
                )?;
                let rv = Tensor::from_vec(
                    pass.buffer(&format!("{}.running_var", self.name))?,
                    &[self.width],
                )?;
                let std = rv.add_scalar(BN_EPSILON).sqrt();
                x.sub_row(&rm)?.div_row(&std)?
            }
        };
        normalized.mul_row(&scale)?.add_row(&shift)
    }

    fn update_running(&self, pass: &Pass, mean: &[f64], var: &[f64]) -> Result<()> {
        let mean_name = format!("{}.running_mean", self.name);
        let var_name = format!("{}.running_var", self.name);
        let mut rm = pass.buffer(&mean_name)?;
        let mut rv = pass.buffer(&var_name)?;
        for (r, &m) in rm.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in rv.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
        pass.update_buffer(&mean_name, rm)?;
        pass.update_buffer(&var_name, rv)
    }

    pub fn param_count(&self) -> usize {
        if self.enabled {
            2 * self.width
        } else {
            0
        }
    }
}

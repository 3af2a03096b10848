//! Invertible activations of the Leaky ReLU family.
//!
//! The backward pass is driven by the activation *output* `z`: since the
//! negative-side slope is positive, `z` and its preimage `y` share signs, so
//! the derivative can be read off `z` without ever storing `y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SLOPE: f64 = 0.01;

/// Slopes below this are treated as non-invertible.
pub const MIN_INVERTIBLE_SLOPE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationFn {
    /// `z = y` for `y >= 0`, `z = slope * y` otherwise. A slope of zero is plain
    /// ReLU, accepted only by strategies that never invert the activation.
    LeakyRelu {
        slope: f64,
    },
    Identity,
}

impl Default for ActivationFn {
    fn default() -> Self {
        ActivationFn::LeakyRelu {
            slope: DEFAULT_SLOPE,
        }
    }
}

impl ActivationFn {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&slope) {
            return Err(Error::InvalidParameter(format!(
                "leaky relu slope must lie in [0, 1], got {slope}"
            )));
        }
        Ok(ActivationFn::LeakyRelu { slope })
    }

    pub fn slope(&self) -> f64 {
        match *self {
            ActivationFn::LeakyRelu { slope } => slope,
            ActivationFn::Identity => 1.0,
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.slope() >= MIN_INVERTIBLE_SLOPE
    }

    pub fn ensure_invertible(&self) -> Result<()> {
        if self.is_invertible() {
            Ok(())
        } else {
            Err(Error::NonInvertibleActivation {
                slope: self.slope(),
            })
        }
    }

    #[inline]
    fn apply<T: Scalar>(slope: T, y: T) -> T {
        if y >= T::zero() {
            y
        } else {
            slope * y
        }
    }

    pub fn forward<T: Scalar>(&self, y: &Tensor<T>) -> Tensor<T> {
        let mut z = y.clone();
        self.forward_in_place(&mut z);
        z
    }

    pub fn forward_in_place<T: Scalar>(&self, y: &mut Tensor<T>) {
        if let ActivationFn::LeakyRelu { slope } = *self {
            let a = T::of(slope);
            y.map_in_place(|v| Self::apply(a, v));
        }
    }

    pub fn inverse<T: Scalar>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = z.clone();
        self.inverse_in_place(&mut y)?;
        Ok(y)
    }

    pub fn inverse_in_place<T: Scalar>(&self, z: &mut Tensor<T>) -> Result<()> {
        self.ensure_invertible()?;
        if let ActivationFn::LeakyRelu { slope } = *self {
            let a = T::of(slope);
            z.map_in_place(|v| if v >= T::zero() { v } else { v / a });
        }
        Ok(())
    }

    /// Gradient w.r.t. the activation input, computed from the output `z`.
    /// The `z = 0` boundary takes the non-negative branch (derivative 1).
    pub fn backward_from_output<T: Scalar>(
        &self,
        z: &Tensor<T>,
        dz: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut dy = dz.clone();
        self.backward_from_output_in_place(z, &mut dy)?;
        Ok(dy)
    }

    pub fn backward_from_output_in_place<T: Scalar>(
        &self,
        z: &Tensor<T>,
        dz: &mut Tensor<T>,
    ) -> Result<()> {
        match *self {
            ActivationFn::LeakyRelu { slope } => {
                let a = T::of(slope);
                dz.zip_map_in_place(z, |g, v| if v >= T::zero() { g } else { a * g })
            }
            ActivationFn::Identity => {
                if z.shape() != dz.shape() {
                    return Err(Error::shape(z.shape(), dz.shape()));
                }
                Ok(())
            }
        }
    }
}

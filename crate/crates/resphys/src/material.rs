use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Converts Young's modulus and Poisson's ratio to the Lamé pair (μ, λ).
pub fn lame_parameters(youngs_modulus: f64, poissons_ratio: f64) -> Result<(f64, f64)> {
    if !(youngs_modulus > 0.0 && youngs_modulus.is_finite()) {
        return Err(Error::InvalidMaterial(format!(
            "Young's modulus must be positive, got {youngs_modulus}"
        )));
    }
    if !(poissons_ratio > -1.0 && poissons_ratio < 0.5) {
        return Err(Error::InvalidMaterial(format!(
            "Poisson's ratio must lie in (-1, 0.5), got {poissons_ratio}"
        )));
    }
    let mu = youngs_modulus / (2.0 * (1.0 + poissons_ratio));
    let lambda = youngs_modulus * poissons_ratio
        / ((1.0 + poissons_ratio) * (1.0 - 2.0 * poissons_ratio));
    Ok((mu, lambda))
}

/// Corotational linear elastic material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub youngs_modulus: f64,
    pub poissons_ratio: f64,
    pub density: f64,
    pub lame_mu: f64,
    pub lame_lambda: f64,
}

impl Material {
    pub fn new(youngs_modulus: f64, poissons_ratio: f64, density: f64) -> Result<Self> {
        let (lame_mu, lame_lambda) = lame_parameters(youngs_modulus, poissons_ratio)?;
        if !(density > 0.0 && density.is_finite()) {
            return Err(Error::InvalidMaterial(format!(
                "density must be positive, got {density}"
            )));
        }
        Ok(Self {
            youngs_modulus,
            poissons_ratio,
            density,
            lame_mu,
            lame_lambda,
        })
    }
}

use candle_core::Tensor;

use crate::config::TOKEN_STRIDE;
use crate::error::{Error, Result};
use crate::nn::{cosine_distance, mse, Conv2d, Scope};
use crate::patch::depth_to_space;

/// Weight of the feature term inside the auxiliary loss.
pub const AUX_FEATURE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct AuxPrediction {
    /// Same shape as the input image.
    pub pixel_recon: Tensor,
    /// `(B, feature_dim, H/16, W/16)`.
    pub feature_pred: Tensor,
}

#[derive(Debug, Clone)]
pub struct AuxLoss {
    pub mse: Tensor,
    /// `1 - mean cosine`; `None` when no target features were supplied.
    pub feature: Option<Tensor>,
    pub feature_skipped: bool,
    pub total: Tensor,
}

/// Pixel and feature prediction heads on top of the condition.
#[derive(Debug, Clone)]
pub struct AuxHeads {
    trunk: Conv2d,
    pixel: Conv2d,
    feature: Conv2d,
}

impl AuxHeads {
    pub fn new(scope: &Scope, cond_dim: usize, hidden: usize, feature_dim: usize) -> Result<Self> {
        Ok(Self {
            trunk: Conv2d::new(&scope.pp("trunk"), cond_dim, hidden, 1, 1, 0)?,
            pixel: Conv2d::new(
                &scope.pp("pixel"),
                hidden,
                3 * TOKEN_STRIDE * TOKEN_STRIDE,
                1,
                1,
                0,
            )?,
            feature: Conv2d::new(&scope.pp("feature"), hidden, feature_dim, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, c: &Tensor) -> Result<AuxPrediction> {
        let h = self.trunk.forward(c)?.silu()?;
        Ok(AuxPrediction {
            pixel_recon: depth_to_space(&self.pixel.forward(&h)?, TOKEN_STRIDE)?,
            feature_pred: self.feature.forward(&h)?,
        })
    }
}

/// `mse(pixel_recon, image) + 0.5 * (1 - cos(feature_pred, target))`.
pub fn aux_loss(
    pred: &AuxPrediction,
    image: &Tensor,
    target_features: Option<&Tensor>,
) -> Result<AuxLoss> {
    if pred.pixel_recon.dims() != image.dims() {
        return Err(Error::Shape(format!(
            "pixel reconstruction {:?} vs image {:?}",
            pred.pixel_recon.dims(),
            image.dims()
        )));
    }
    let mse = mse(&pred.pixel_recon, image)?;
    match target_features {
        Some(target) => {
            if target.dims() != pred.feature_pred.dims() {
                return Err(Error::Shape(format!(
                    "feature prediction {:?} vs target {:?}",
                    pred.feature_pred.dims(),
                    target.dims()
                )));
            }
            let feature = cosine_distance(&pred.feature_pred, &target.detach(), 1)?;
            let total = mse.add(&(&feature * AUX_FEATURE_WEIGHT)?)?;
            Ok(AuxLoss {
                mse,
                feature: Some(feature),
                feature_skipped: false,
                total,
            })
        }
        None => Ok(AuxLoss {
            total: mse.clone(),
            mse,
            feature: None,
            feature_skipped: true,
        }),
    }
}

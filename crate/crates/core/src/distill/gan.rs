use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, Scope};

const WIDTHS: [usize; 4] = [16, 32, 64, 1];

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// Four strided convolutions producing a map of real/fake logits.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(scope: &Scope) -> Result<Self> {
        let mut layers = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in WIDTHS.iter().enumerate() {
            let stride = if i < 3 { 2 } else { 1 };
            layers.push(Conv2d::new(
                &scope.pp(format!("conv{i}")),
                cin,
                c,
                3,
                stride,
                1,
            )?);
            cin = c;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// `mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let r = real_logits.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let f = fake_logits.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok(r.add(&f)?)
}

/// `-mean(D(fake))`.
pub fn hinge_generator_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

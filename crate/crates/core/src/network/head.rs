use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{Dense, Init, Scope};
use crate::patch::{patchify, unpatchify};

use super::embed::{dense_params, patch_coordinates};
use super::fold::plain;

/// Per-token neural field decoding a `p x p` pixel patch.
///
/// Each token emits the first-layer weights of a small MLP evaluated at every
/// pixel of its patch on `[coordinate encoding, noisy pixel, 1]`; the second
/// layer is shared across tokens.
#[derive(Debug, Clone)]
pub struct PixelFieldHead {
    pub params: Dense,
    pub out: Dense,
    coords: Tensor,
    patch: usize,
    hidden: usize,
}

impl PixelFieldHead {
    pub fn new(
        scope: &Scope,
        width: usize,
        patch: usize,
        hidden: usize,
        freqs: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let coords = patch_coordinates(patch, freqs, scope.dtype(), scope.device())?;
        let k = coords.dim(1)? + 3 + 1;
        let out_init = if zero_init {
            Init::Zeros
        } else {
            Init::FanIn(hidden)
        };
        Ok(Self {
            params: Dense::new(&scope.pp("params"), width, hidden * k)?,
            out: Dense::with_init(&scope.pp("out"), hidden, 3, out_init, out_init)?,
            coords,
            patch,
            hidden,
        })
    }

    pub fn with_params(&self, params: Dense) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.coords.dims()[1] + 4
    }

    pub fn forward(
        &self,
        tokens: &Tensor,
        x_t: &Tensor,
        rows: usize,
        cols: usize,
    ) -> Result<Tensor> {
        let (b, l, _) = tokens.dims3()?;
        let p2 = self.patch * self.patch;
        let k = self.input_dim();
        let pix = patchify(x_t, self.patch)?
            .reshape((b, l, 3, p2))?
            .transpose(2, 3)?;
        let coords = self
            .coords
            .reshape((1, 1, p2, k - 4))?
            .broadcast_as((b, l, p2, k - 4))?;
        let ones = Tensor::ones((b, l, p2, 1), x_t.dtype(), x_t.device())?;
        let inp = Tensor::cat(&[&coords, &pix, &ones], D::Minus1)?.contiguous()?;
        let w = self
            .params
            .forward(tokens)?
            .reshape((b, l, self.hidden, k))?;
        let norm = (w.sqr()?.sum_keepdim(D::Minus1)? + 1e-6)?.sqrt()?;
        let w = w.broadcast_div(&norm)?;
        let h = inp.matmul(&w.transpose(2, 3)?.contiguous()?)?.silu()?;
        let y = self
            .out
            .forward(&h)?
            .transpose(2, 3)?
            .reshape((b, l, 3 * p2))?;
        unpatchify(&y, self.patch, 3, rows, cols)
    }

    pub fn num_params(&self) -> usize {
        dense_params(&self.params) + dense_params(&self.out)
    }
}

/// Linear projection of each token to a `2 x 2` latent patch.
#[derive(Debug, Clone)]
pub struct LatentHead {
    pub proj: Dense,
    channels: usize,
    patch: usize,
}

impl LatentHead {
    pub fn new(
        scope: &Scope,
        width: usize,
        channels: usize,
        patch: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::FanIn(width)
        };
        Ok(Self {
            proj: Dense::with_init(
                &scope.pp("proj"),
                width,
                channels * patch * patch,
                init,
                init,
            )?,
            channels,
            patch,
        })
    }

    pub fn with_proj(&self, proj: Dense) -> Self {
        Self {
            proj,
            ..self.clone()
        }
    }

    pub fn forward(&self, tokens: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        unpatchify(
            &self.proj.forward(tokens)?,
            self.patch,
            self.channels,
            rows,
            cols,
        )
    }

    pub fn num_params(&self) -> usize {
        dense_params(&self.proj)
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Pixel(PixelFieldHead),
    Latent(LatentHead),
}

impl Head {
    pub fn forward(
        &self,
        tokens: &Tensor,
        x_t: &Tensor,
        rows: usize,
        cols: usize,
    ) -> Result<Tensor> {
        match self {
            Head::Pixel(h) => h.forward(tokens, x_t, rows, cols),
            Head::Latent(h) => h.forward(tokens, rows, cols),
        }
    }

    /// The layer applied directly to the modulated tokens.
    pub fn input_layer(&self) -> &Dense {
        match self {
            Head::Pixel(h) => &h.params,
            Head::Latent(h) => &h.proj,
        }
    }

    pub fn with_input_layer(&self, layer: Dense) -> Self {
        match self {
            Head::Pixel(h) => Head::Pixel(h.with_params(layer)),
            Head::Latent(h) => Head::Latent(h.with_proj(layer)),
        }
    }

    /// Copy with adapters merged and no link to trainable variables.
    pub fn detached(&self) -> Result<Self> {
        Ok(match self {
            Head::Pixel(h) => Head::Pixel(PixelFieldHead {
                params: plain(&h.params)?,
                out: plain(&h.out)?,
                ..h.clone()
            }),
            Head::Latent(h) => Head::Latent(h.with_proj(plain(&h.proj)?)),
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            Head::Pixel(h) => h.num_params(),
            Head::Latent(h) => h.num_params(),
        }
    }
}

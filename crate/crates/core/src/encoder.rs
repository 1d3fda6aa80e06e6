//! Surrogate temporal encoder: a stride-1 residual CNN over the stacked
//! history raster, producing the current-frame feature map `F_0`.

use crate::autograd::Var;
use crate::model::ModelConfig;
use crate::nn::{conv, res_block, Binder};
use crate::{Error, Result};

/// `[C_in, H, W] -> [C, H, W]`.
pub fn encode<'t>(b: &Binder<'t>, cfg: &ModelConfig, input: Var<'t>) -> Result<Var<'t>> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("encoder input must be [C, H, W], got {shape:?}")));
    }
    let mut x = conv(b, "enc.stem", input, cfg.channels, 3, cfg.bias, 1.0).relu();
    for i in 0..cfg.encoder_blocks {
        x = res_block(b, &format!("enc.block{i}"), x, cfg.bias);
    }
    Ok(x)
}

//! Small convolutional encoder producing `c x h x w` feature maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// When false the final stage skips its 2x2 pooling, doubling the output
    /// resolution.
    pub keep_last_pool: bool,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
            keep_last_pool: false,
            image_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(invalid!("backbone needs at least one stage"));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return Err(invalid!("backbone channel counts must be positive"));
        }
        let divisor = 1usize << self.pool_count();
        if self.image_size == 0 || !self.image_size.is_multiple_of(divisor) {
            return Err(shape_err!(
                "image size {} is not divisible by 2^{} = {divisor}",
                self.image_size,
                self.pool_count()
            ));
        }
        Ok(())
    }

    pub fn pool_count(&self) -> usize {
        self.stage_channels.len() - usize::from(!self.keep_last_pool)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// Spatial extent of the output feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size >> self.pool_count()
    }

    pub fn weight_name(stage: usize) -> String {
        format!("backbone.stage{stage}.weight")
    }

    pub fn bias_name(stage: usize) -> String {
        format!("backbone.stage{stage}.bias")
    }

    pub fn init_params<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.stage_channels.iter().enumerate() {
            let fan_in = c_in * 9;
            params.init_uniform(&Self::weight_name(i), &[c_out, c_in, 3, 3], fan_in, rng)?;
            params.init_uniform(&Self::bias_name(i), &[c_out], fan_in, rng)?;
            c_in = c_out;
        }
        Ok(())
    }
}

/// Runs `[n, in_channels, s, s]` images through the conv / relu / pool stages.
pub fn embed<'t>(images: Var<'t>, config: &BackboneConfig, params: &ParamStore) -> Result<Var<'t>> {
    config.validate()?;
    let shape = images.shape();
    let s = config.image_size;
    if shape.len() != 4 || shape[1] != config.in_channels || shape[2] != s || shape[3] != s {
        return Err(shape_err!(
            "backbone expects [n, {}, {s}, {s}] images, got {:?}",
            config.in_channels,
            shape
        ));
    }
    let tape = images.tape();
    let last = config.stage_channels.len() - 1;
    let mut x = images;
    for stage in 0..=last {
        let w = tape.param(&BackboneConfig::weight_name(stage), params)?;
        let b = tape.param(&BackboneConfig::bias_name(stage), params)?;
        x = ops::relu(ops::conv2d(x, w, Some(b), 1, 1, 1)?)?;
        if stage < last || config.keep_last_pool {
            x = ops::max_pool2(x)?;
        }
    }
    Ok(x)
}

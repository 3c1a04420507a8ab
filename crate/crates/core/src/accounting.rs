//! Training-cost bookkeeping in forward-inference FLOPs.
//!
//! `M` is the training-set size, `N` the number of epochs, `c_T`/`c_S` the
//! cost of one forward pass of one image through teacher/student and
//! `c_heads` the extra per-image work of the multi-view loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::Scheme;
use crate::error::{Error, Result};
use crate::models::SiameseModel;
use crate::nn::LayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_t: u64,
    pub c_s: u64,
    pub c_heads: u64,
    pub m: u64,
    pub n: u64,
}

/// Symbolic form of the cost of `scheme`, as printed in reports.
pub fn scheme_formula(scheme: Scheme) -> Result<&'static str> {
    match scheme {
        Scheme::SimdisOff => Ok("(2c_T + c_S) M N"),
        Scheme::SimdisOn => Ok("(c_T + c_S) M N"),
        Scheme::SimdisOn7v => Ok("(c_T + c_S + c_heads) M N"),
        other => Err(Error::Accounting(format!("no cost formula for scheme `{other}`"))),
    }
}

/// Total training cost of `scheme`, in exact integer arithmetic.
pub fn scheme_cost(cost: &CostModel, scheme: Scheme) -> Result<u128> {
    let (c_t, c_s, c_h) = (cost.c_t as u128, cost.c_s as u128, cost.c_heads as u128);
    let per_image = match scheme {
        Scheme::SimdisOff => 2 * c_t + c_s,
        Scheme::SimdisOn => c_t + c_s,
        Scheme::SimdisOn7v => c_t + c_s + c_h,
        other => return Err(Error::Accounting(format!("no cost formula for scheme `{other}`"))),
    };
    Ok(per_image * cost.m as u128 * cost.n as u128)
}

/// Sums `2 × MACs` over a layer list. Normalization, activations, pooling and
/// residual additions contribute no multiply-accumulates.
pub fn count_flops(specs: &[LayerSpec]) -> Result<u64> {
    let mut total: u64 = 0;
    for s in specs {
        let f = match *s {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                out_h,
                out_w,
            } => 2 * (in_ch * out_ch * kernel * kernel * out_h * out_w) as u64,
            LayerSpec::Linear { d_in, d_out } => 2 * (d_in * d_out) as u64,
            LayerSpec::BatchNorm { .. }
            | LayerSpec::Relu { .. }
            | LayerSpec::GlobalAvgPool { .. }
            | LayerSpec::Add { .. } => 0,
            LayerSpec::Other(name) => {
                return Err(Error::Accounting(format!("cannot count FLOPs of layer `{name}`")))
            }
        };
        total = total
            .checked_add(f)
            .ok_or_else(|| Error::Accounting("FLOP count overflows u64".into()))?;
    }
    Ok(total)
}

/// Layer list of one forward pass of the online branch, including every
/// predictor head the model carries.
pub fn forward_specs(model: &SiameseModel, [_, h, w]: [usize; 3]) -> Vec<LayerSpec> {
    let mut specs = model.online.layer_specs(h, w);
    if let Some(head) = &model.extra_predictor {
        specs.extend(head.layer_specs());
    }
    specs
}

/// Forward FLOPs for one image of shape `[C, H, W]`.
pub fn measure_forward_flops(model: &SiameseModel, shape: [usize; 3]) -> Result<u64> {
    if shape[0] != model.online.encoder.spec.in_channels {
        return Err(Error::Accounting(format!(
            "model takes {} channels, not {}",
            model.online.encoder.spec.in_channels, shape[0]
        )));
    }
    count_flops(&forward_specs(model, shape))
}

/// `2 × MACs` of one normalized MSE between `dim`-vectors: three inner
/// products (two norms and the distance).
pub fn normalized_mse_flops(dim: usize) -> u64 {
    2 * 3 * dim as u64
}

/// Per-image cost of the distillation terms beyond the single one the
/// two-view scheme already pays for.
pub fn extra_head_flops(proj_dim: usize, num_targets: usize) -> u64 {
    num_targets.saturating_sub(1) as u64 * normalized_mse_flops(proj_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_counts_two_flops_per_mac() {
        assert_eq!(count_flops(&[LayerSpec::Linear { d_in: 3, d_out: 5 }]).unwrap(), 30);
    }

    #[test]
    fn unknown_layer_is_an_error() {
        assert!(matches!(count_flops(&[LayerSpec::Other("attention")]), Err(Error::Accounting(_))));
    }

    #[test]
    fn schemes_without_formula() {
        let c = CostModel {
            c_t: 1,
            c_s: 1,
            c_heads: 0,
            m: 1,
            n: 1,
        };
        assert!(scheme_cost(&c, Scheme::TeacherOnly).is_err());
        assert!(scheme_cost(&c, Scheme::Custom).is_err());
    }
}

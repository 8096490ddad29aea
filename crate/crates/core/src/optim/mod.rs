//! Optimizers, learning-rate schedules, layerwise decay, freezing and early
//! stopping.

mod adamw;
mod early_stop;
mod freeze;
mod schedule;
mod sgd;

pub use adamw::{adamw_step, AdamW, AdamWConfig};
pub use early_stop::{early_stop_update, EarlyStopDecision, EarlyStopState};
pub use freeze::{apply_freeze, FreezePolicy, Trainable};
pub use schedule::{layer_scale, lr_at, ScheduleConfig};
pub use sgd::{sgd_step, Sgd, SgdConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

fn check_grads<S: Scalar>(params: &ParamSet<S>, grads: &ParamSet<S>) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
            });
        }
    }
    Ok(())
}

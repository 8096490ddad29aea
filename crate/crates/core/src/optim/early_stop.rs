use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStopDecision {
    /// This epoch set a new best; its weights become the run's output.
    pub improved: bool,
    pub stop: bool,
}

/// Tracks the best validation value. A strictly greater value counts as an
/// improvement (ties keep the earlier epoch); training stops on a
/// non-improving epoch once `patience` epochs have passed since the best.
#[derive(Clone, Debug, Serialize)]
pub struct EarlyStopState {
    pub monitored: String,
    pub patience: usize,
    pub best_value: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl EarlyStopState {
    pub fn new(monitored: impl Into<String>, patience: usize) -> Self {
        Self {
            monitored: monitored.into(),
            patience,
            best_value: None,
            best_epoch: None,
        }
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> Result<EarlyStopDecision> {
        if !value.is_finite() {
            return Err(Error::Config(format!(
                "non-finite {} at epoch {epoch}",
                self.monitored
            )));
        }
        let improved = self.best_value.map_or(true, |best| value > best);
        if improved {
            self.best_value = Some(value);
            self.best_epoch = Some(epoch);
            return Ok(EarlyStopDecision {
                improved,
                stop: false,
            });
        }
        let since = epoch.saturating_sub(self.best_epoch.unwrap_or(0));
        Ok(EarlyStopDecision {
            improved,
            stop: since >= self.patience,
        })
    }
}

pub fn early_stop_update(
    state: &mut EarlyStopState,
    epoch: usize,
    value: f64,
) -> Result<EarlyStopDecision> {
    state.update(epoch, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(values: &[f64], patience: usize) -> (Option<usize>, Option<usize>) {
        let mut s = EarlyStopState::new("wacc", patience);
        for (e, &v) in values.iter().enumerate() {
            if s.update(e, v).unwrap().stop {
                return (Some(e), s.best_epoch);
            }
        }
        (None, s.best_epoch)
    }

    #[test]
    fn plateau_stops_after_patience() {
        assert_eq!(run(&[0.5, 0.6, 0.6, 0.6], 2), (Some(3), Some(1)));
    }

    #[test]
    fn increasing_never_stops() {
        let v: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        assert_eq!(run(&v, 0), (None, Some(49)));
    }

    #[test]
    fn zero_patience_stops_on_first_drop() {
        assert_eq!(run(&[0.9, 0.8], 0), (Some(1), Some(0)));
    }

    #[test]
    fn nan_is_rejected() {
        let mut s = EarlyStopState::new("wacc", 3);
        assert!(s.update(0, f64::NAN).is_err());
    }
}

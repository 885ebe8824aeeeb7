use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Running statistics of one batch-norm layer: per-channel mean, biased
/// variance, and the number of samples they summarize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: u64,
}

/// How training-mode forwards fold batch statistics into the buffers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BufferUpdate {
    /// Exact pooled moments of every sample seen in the current epoch.
    #[default]
    Cumulative,
    /// `new = (1 - momentum) * old + momentum * batch`. Breaks the exactness
    /// of buffer aggregation; kept for comparison runs.
    Ema { momentum: f64 },
}

impl BufferStats {
    /// Fresh buffers: mean 0, variance 1, nothing tracked yet.
    pub fn fresh(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], count: 0 }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(Error::Invalid(format!(
                "buffer mean has {} channels but var has {}",
                self.mean.len(),
                self.var.len()
            )));
        }
        if self.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("buffer variance must be non-negative".into()));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("buffer mean must be finite".into()));
        }
        Ok(())
    }

    /// Pooled moments of several groups:
    /// `N = sum n_k`, `mu = sum n_k mu_k / N`,
    /// `var = sum n_k (var_k + (mu - mu_k)^2) / N`.
    ///
    /// Groups with zero count contribute nothing; the total must be positive.
    pub fn pool<'a>(groups: impl IntoIterator<Item = &'a BufferStats>) -> Result<BufferStats> {
        let groups: Vec<&BufferStats> = groups.into_iter().collect();
        let Some(first) = groups.first() else {
            return Err(Error::Invalid("cannot pool zero buffer sets".into()));
        };
        let channels = first.channels();
        for g in &groups {
            g.validate()?;
            if g.channels() != channels {
                return Err(Error::Invalid(format!("channel mismatch: {} vs {}", g.channels(), channels)));
            }
        }
        let total: u64 = groups.iter().map(|g| g.count).sum();
        if total == 0 {
            return Err(Error::Invalid("pooled buffers have zero total count".into()));
        }
        let n = total as f64;
        let mut mean = Vec::with_capacity(channels);
        let mut var = Vec::with_capacity(channels);
        for c in 0..channels {
            let mu: f64 = groups.iter().map(|g| g.count as f64 * g.mean[c] as f64).sum::<f64>() / n;
            let v: f64 = groups
                .iter()
                .map(|g| {
                    let d = mu - g.mean[c] as f64;
                    g.count as f64 * (g.var[c] as f64 + d * d)
                })
                .sum::<f64>()
                / n;
            mean.push(mu as f32);
            var.push(v as f32);
        }
        Ok(BufferStats { mean, var, count: total })
    }
}

/// Folds one batch's statistics into `stats`.
pub fn update_buffers(
    stats: &BufferStats,
    batch_mean: &[f32],
    batch_var: &[f32],
    batch_count: u64,
    rule: BufferUpdate,
) -> Result<BufferStats> {
    if batch_mean.len() != stats.channels() || batch_var.len() != stats.channels() {
        return Err(Error::Invalid(format!(
            "batch statistics have {}/{} channels, buffers have {}",
            batch_mean.len(),
            batch_var.len(),
            stats.channels()
        )));
    }
    if batch_var.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Invalid("batch variance must be non-negative".into()));
    }
    let batch = BufferStats { mean: batch_mean.to_vec(), var: batch_var.to_vec(), count: batch_count };
    match rule {
        BufferUpdate::Cumulative => BufferStats::pool([stats, &batch]),
        BufferUpdate::Ema { momentum } => {
            let blend = |old: &[f32], new: &[f32]| {
                old.iter().zip(new).map(|(&o, &n)| ((1.0 - momentum) * o as f64 + momentum * n as f64) as f32).collect()
            };
            Ok(BufferStats {
                mean: blend(&stats.mean, batch_mean),
                var: blend(&stats.var, batch_var),
                count: stats.count + batch_count,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(mean: f32, var: f32, count: u64) -> BufferStats {
        BufferStats { mean: vec![mean], var: vec![var], count }
    }

    #[test]
    fn first_batch_replaces_empty_buffers() {
        let out = update_buffers(&s(0.0, 0.0, 0), &[5.0], &[2.0], 10, BufferUpdate::Cumulative).unwrap();
        assert_eq!(out, s(5.0, 2.0, 10));
    }

    #[test]
    fn pooled_update_hand_case() {
        let out = update_buffers(&s(1.0, 4.0, 2), &[3.0], &[4.0], 2, BufferUpdate::Cumulative).unwrap();
        assert_eq!(out, s(2.0, 5.0, 4));
    }

    #[test]
    fn update_order_does_not_matter() {
        let start = s(0.3, 1.7, 5);
        let a = update_buffers(&start, &[2.0], &[0.4], 7, BufferUpdate::Cumulative).unwrap();
        let a = update_buffers(&a, &[-1.0], &[3.0], 3, BufferUpdate::Cumulative).unwrap();
        let b = update_buffers(&start, &[-1.0], &[3.0], 3, BufferUpdate::Cumulative).unwrap();
        let b = update_buffers(&b, &[2.0], &[0.4], 7, BufferUpdate::Cumulative).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() <= 1e-6);
        assert!((a.var[0] - b.var[0]).abs() <= 1e-6);
        assert_eq!(a.count, b.count);
    }

    #[test]
    fn negative_batch_variance_errors() {
        assert!(update_buffers(&s(0.0, 1.0, 1), &[0.0], &[-1.0], 2, BufferUpdate::Cumulative).is_err());
    }

    #[test]
    fn ema_blends() {
        let out = update_buffers(&s(0.0, 1.0, 4), &[1.0], &[3.0], 2, BufferUpdate::Ema { momentum: 0.1 }).unwrap();
        assert!((out.mean[0] - 0.1).abs() < 1e-7);
        assert!((out.var[0] - 1.2).abs() < 1e-6);
        assert_eq!(out.count, 6);
    }
}

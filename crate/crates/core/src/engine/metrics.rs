use serde::{Deserialize, Serialize};

use crate::model::Tick;

/// Aggregate counters of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    /// Jobs finished within the horizon.
    pub jobs_total: u64,
    pub jobs_missed: u64,
    /// Jobs released but not finished at the horizon; excluded from ratios.
    pub jobs_unfinished: u64,
    /// Outbound temporary migrations; the return trip is not counted.
    pub temp_migrations: u64,
    pub perm_migrations: u64,
    pub gedf_migrations: u64,
    pub rejections: u64,
    pub lb_aborts: u64,
    pub postponements: u64,
    /// Contending servers that reached their scheduling deadline with
    /// budget left.
    pub server_deadline_misses: u64,
}

impl Metrics {
    pub fn migrations(&self) -> u64 {
        self.temp_migrations + self.perm_migrations + self.gedf_migrations
    }

    pub fn migrations_per_job(&self) -> f64 {
        if self.jobs_total == 0 {
            0.0
        } else {
            self.migrations() as f64 / self.jobs_total as f64
        }
    }

    pub fn miss_ratio(&self) -> f64 {
        if self.jobs_total == 0 {
            0.0
        } else {
            self.jobs_missed as f64 / self.jobs_total as f64
        }
    }
}

/// Exponential average `s <- (1 - alpha) s + alpha x`, starting at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    pub alpha: f64,
    pub value: f64,
}

impl Ema {
    pub fn new(alpha: f64) -> Ema {
        Ema { alpha, value: 0.0 }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        self.value = (1.0 - self.alpha) * self.value + self.alpha * x;
        self.value
    }
}

/// Per-core samples; `active[j][k]` belongs to time `t[k]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t: Vec<Tick>,
    pub active: Vec<Vec<f64>>,
    pub ema: Vec<Vec<f64>>,
    pub miss_ratio: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(cores: usize) -> TimeSeries {
        TimeSeries {
            t: Vec::new(),
            active: vec![Vec::new(); cores],
            ema: vec![Vec::new(); cores],
            miss_ratio: vec![Vec::new(); cores],
        }
    }

    /// Mean of `|ema[a] - ema[b]|` over samples with `from <= t <= to`.
    pub fn mean_ema_gap(&self, a: usize, b: usize, from: Tick, to: Tick) -> Option<f64> {
        let gaps: Vec<f64> = self
            .t
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= from && t <= to)
            .map(|(k, _)| (self.ema[a][k] - self.ema[b][k]).abs())
            .collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_converges_from_below() {
        let mut e = Ema::new(1.0 / 200.0);
        let mut prev = 0.0;
        for _ in 0..5000 {
            let v = e.update(0.5);
            assert!(v >= prev && v <= 0.5);
            prev = v;
        }
        assert!((prev - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ema_unit_alpha_tracks_input() {
        let mut e = Ema::new(1.0);
        assert_eq!(e.update(0.3), 0.3);
        assert_eq!(e.update(0.9), 0.9);
    }

    #[test]
    fn ema_step_closed_form() {
        let alpha = 1.0 / 200.0;
        let mut e = Ema::new(alpha);
        for k in 1..=300 {
            let v = e.update(1.0);
            let expected = 1.0 - (1.0 - alpha).powi(k);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ratios() {
        let m = Metrics {
            jobs_total: 50,
            jobs_missed: 5,
            temp_migrations: 3,
            perm_migrations: 1,
            gedf_migrations: 1,
            ..Default::default()
        };
        assert_eq!(m.miss_ratio(), 0.1);
        assert_eq!(m.migrations_per_job(), 0.1);
        assert_eq!(Metrics::default().migrations_per_job(), 0.0);
    }

    #[test]
    fn ema_gap_average() {
        let s = TimeSeries {
            t: vec![0, 1, 2, 3],
            active: vec![vec![0.0; 4]; 2],
            ema: vec![vec![0.5, 0.5, 0.4, 0.1], vec![0.1, 0.2, 0.3, 0.4]],
            miss_ratio: vec![vec![0.0; 4]; 2],
        };
        let g = s.mean_ema_gap(0, 1, 1, 3).unwrap();
        assert!((g - (0.3 + 0.1 + 0.3) / 3.0).abs() < 1e-12);
        assert!(s.mean_ema_gap(0, 1, 10, 20).is_none());
    }
}

//! Contact feedback emulating a proprioceptive contact estimator.

use contact_mpc::contact::ContactFeedback;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::plant::TrueContact;

/// Estimation error levels, given as the RMSE of the 3-D error vector.
/// Per-axis noise uses `rmse / √3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleNoise {
    pub enabled: bool,
    /// Applied when exactly one contact is reported.
    pub single_position_rmse_m: f64,
    pub single_force_rmse_n: f64,
    /// Applied when two or more contacts are reported.
    pub multi_position_rmse_m: f64,
    pub multi_force_rmse_n: f64,
}

impl OracleNoise {
    pub fn off() -> Self {
        Self {
            enabled: false,
            single_position_rmse_m: 0.0,
            single_force_rmse_n: 0.0,
            multi_position_rmse_m: 0.0,
            multi_force_rmse_n: 0.0,
        }
    }

    /// Accuracy figures of the estimator the oracle stands in for.
    pub fn estimator() -> Self {
        Self {
            enabled: true,
            single_position_rmse_m: 0.0016,
            single_force_rmse_n: 0.01,
            multi_position_rmse_m: 0.0108,
            multi_force_rmse_n: 2.0,
        }
    }
}

pub struct Oracle {
    noise: OracleNoise,
    rng: ChaCha8Rng,
}

impl Oracle {
    pub fn new(noise: OracleNoise, seed: u64) -> Self {
        Self { noise, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// One feedback per link in contact, stamped `time`. When several true
    /// contacts share a link the strongest is reported.
    pub fn tick(&mut self, contacts: &[TrueContact], time: f64) -> Vec<ContactFeedback> {
        let mut strongest: Vec<&TrueContact> = Vec::new();
        for c in contacts {
            match strongest.iter_mut().find(|s| s.link() == c.link()) {
                Some(s) => {
                    if c.force.norm() > s.force.norm() {
                        *s = c;
                    }
                }
                None => strongest.push(c),
            }
        }
        strongest.sort_by_key(|c| c.link());
        let (position_rmse, force_rmse) = match strongest.len() {
            0 | 1 => (self.noise.single_position_rmse_m, self.noise.single_force_rmse_n),
            _ => (self.noise.multi_position_rmse_m, self.noise.multi_force_rmse_n),
        };
        strongest
            .into_iter()
            .map(|c| {
                let mut fb = ContactFeedback { position: c.position, force: c.force, link: c.link(), timestamp: time };
                if self.noise.enabled {
                    fb.position += self.sample(position_rmse);
                    fb.force += self.sample(force_rmse);
                }
                fb
            })
            .collect()
    }

    fn sample(&mut self, rmse: f64) -> Vector3<f64> {
        if rmse <= 0.0 {
            return Vector3::zeros();
        }
        let normal = Normal::new(0.0, rmse / 3f64.sqrt()).expect("finite standard deviation");
        Vector3::new(normal.sample(&mut self.rng), normal.sample(&mut self.rng), normal.sample(&mut self.rng))
    }
}

/// Whether the oracle emits at plant tick `tick` for the given rates. Both
/// rates are in Hz; emission happens on the first tick of each oracle period.
pub fn oracle_due(tick: u64, plant_rate_hz: u64, oracle_rate_hz: u64) -> bool {
    tick == 0 || (tick * oracle_rate_hz) / plant_rate_hz != ((tick - 1) * oracle_rate_hz) / plant_rate_hz
}

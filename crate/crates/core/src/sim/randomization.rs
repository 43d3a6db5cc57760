use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Physical parameters drawn per episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRandomization {
    pub friction: f64,
    /// Mass added to the base, kg.
    pub added_mass: f64,
    /// Center-of-mass shift along the body x axis, m.
    pub com_displacement: f64,
    pub motor_strength: f64,
    pub kp_factor: f64,
    pub kd_factor: f64,
    /// Observation latency, s.
    pub latency: f64,
}

impl DomainRandomization {
    /// Unperturbed parameters with the default latency.
    pub fn nominal() -> Self {
        DomainRandomization {
            friction: 1.0,
            added_mass: 0.0,
            com_displacement: 0.0,
            motor_strength: 1.0,
            kp_factor: 1.0,
            kd_factor: 1.0,
            latency: RandomizationRanges::default().latency,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationRanges {
    pub friction: [f64; 2],
    pub added_mass: [f64; 2],
    pub com_displacement: [f64; 2],
    pub motor_strength: [f64; 2],
    pub kp_factor: [f64; 2],
    pub kd_factor: [f64; 2],
    pub latency: f64,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        RandomizationRanges {
            friction: [0.5, 1.25],
            added_mass: [-1.0, 1.0],
            com_displacement: [-0.15, 0.15],
            motor_strength: [0.9, 1.1],
            kp_factor: [0.8, 1.3],
            kd_factor: [0.5, 1.3],
            latency: 0.03,
        }
    }
}

impl RandomizationRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DomainRandomization {
        let mut u = |r: [f64; 2]| rng.random_range(r[0]..=r[1]);
        DomainRandomization {
            friction: u(self.friction),
            added_mass: u(self.added_mass),
            com_displacement: u(self.com_displacement),
            motor_strength: u(self.motor_strength),
            kp_factor: u(self.kp_factor),
            kd_factor: u(self.kd_factor),
            latency: self.latency,
        }
    }
}

/// One draw from the default ranges, determined by `seed`.
pub fn randomize(seed: u64) -> DomainRandomization {
    RandomizationRanges::default().sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_cover_friction_range() {
        let ranges = RandomizationRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            let d = ranges.sample(&mut rng);
            assert!((0.5..=1.25).contains(&d.friction));
            assert!((-1.0..=1.0).contains(&d.added_mass));
            assert!((-0.15..=0.15).contains(&d.com_displacement));
            assert!((0.9..=1.1).contains(&d.motor_strength));
            assert!((0.8..=1.3).contains(&d.kp_factor));
            assert!((0.5..=1.3).contains(&d.kd_factor));
            assert_eq!(d.latency, 0.03);
            lo = lo.min(d.friction);
            hi = hi.max(d.friction);
        }
        assert!(lo < 0.55 && hi > 1.2);
    }

    #[test]
    fn seeded_draws_repeat() {
        assert_eq!(randomize(7), randomize(7));
        assert_ne!(randomize(7), randomize(8));
    }
}

//! Sticky user-to-region routing.
//!
//! Weighted rendezvous hashing: a user goes to the region maximising
//! `weight / -ln(u)` where `u` is a per-(user, region) hash in `(0, 1)`.
//! Shares are proportional to the weights, and removing a region only
//! moves the users that were mapped to it.

use crate::hashing::{hash2, hash_str, unit};

#[derive(Clone, Debug)]
pub struct Router {
    region_salts: Vec<u64>,
    /// Effective weight per region; zero when evacuated.
    weights: Vec<f64>,
}

impl Router {
    pub fn new(salt: u64, region_ids: &[&str], weights: Vec<f64>) -> Self {
        let region_salts = region_ids.iter().map(|id| hash2(salt, hash_str(id))).collect();
        Self { region_salts, weights }
    }

    pub fn set_weight(&mut self, region: usize, w: f64) {
        self.weights[region] = w;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Region for a user, or `None` when every region has zero weight.
    pub fn route(&self, user: u64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (r, (&salt, &w)) in self.region_salts.iter().zip(&self.weights).enumerate() {
            if w <= 0.0 {
                continue;
            }
            // Shift into (0, 1] so ln never sees zero.
            let u = 1.0 - unit(hash2(user, salt));
            let score = w / -u.ln().min(-f64::MIN_POSITIVE);
            match best {
                Some((_, s)) if s >= score => {}
                _ => best = Some((r, score)),
            }
        }
        best.map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removing_a_region_moves_only_its_users() {
        let ids = ["a", "b", "c"];
        let mut r = Router::new(99, &ids, vec![1.0; 3]);
        let before: Vec<_> = (0..20_000u64).map(|u| r.route(u).unwrap()).collect();
        r.set_weight(1, 0.0);
        for (u, &b) in before.iter().enumerate() {
            let after = r.route(u as u64).unwrap();
            if b != 1 {
                assert_eq!(after, b);
            } else {
                assert_ne!(after, 1);
            }
        }
    }

    #[test]
    fn weights_set_shares() {
        let r = Router::new(5, &["a", "b"], vec![3.0, 1.0]);
        let n = 100_000u64;
        let a = (0..n).filter(|&u| r.route(u) == Some(0)).count() as f64 / n as f64;
        assert!((a - 0.75).abs() < 0.01, "share {a}");
    }

    #[test]
    fn all_zero_routes_nowhere() {
        let r = Router::new(5, &["a", "b"], vec![0.0, 0.0]);
        assert_eq!(r.route(1), None);
    }
}

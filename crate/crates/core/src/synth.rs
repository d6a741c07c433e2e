//! Synthetic long-tail interaction generator for desk-scale experiments.
//!
//! Item popularity follows a Zipf law, user activity is mildly skewed, and
//! users prefer items from their own latent group, so popularity debiasing
//! has actual signal to recover.

use rand::Rng;

use crate::data::RawInteraction;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

/// Share of draws a user spends inside their own item group.
const IN_GROUP: f64 = 0.8;
/// Mild Zipf skew over user activity.
const USER_EXPONENT: f64 = 0.3;

/// Cumulative distribution table for weighted sampling by binary search.
struct Cdf {
    cumulative: Vec<f64>,
}

impl Cdf {
    fn from_weights(weights: &[f64]) -> Self {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights {
            acc += w;
            cumulative.push(acc);
        }
        Cdf { cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("nonempty weights");
        let x = rng.gen::<f64>() * total;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&x).expect("finite"))
        {
            Ok(i) => i,
            Err(i) => i.min(self.cumulative.len() - 1),
        }
    }
}

/// Generate exactly `num_interactions` distinct (user, item) pairs.
pub fn generate(config: &SynthConfig) -> Result<Vec<RawInteraction>> {
    let SynthConfig {
        num_users,
        num_items,
        num_interactions,
        zipf_exponent,
        seed,
    } = *config;
    if num_users < 1 || num_items < 1 || num_interactions < 1 {
        return Err(Error::Config("synth counts must be >= 1".into()));
    }
    if zipf_exponent <= 0.0 {
        return Err(Error::Config("zipf exponent must be > 0".into()));
    }
    if num_interactions > num_users * num_items {
        return Err(Error::Infeasible(format!(
            "{num_interactions} interactions exceed the {num_users}x{num_items} pair space"
        )));
    }

    // Item rank r (1-based over the global index) carries weight r^-s;
    // groups interleave by parity so each group spans the whole popularity
    // range.
    let group_cdfs: Vec<Cdf> = (0..2)
        .map(|g| {
            let weights: Vec<f64> = (0..num_items)
                .map(|i| {
                    if i % 2 == g {
                        1.0 / ((i + 1) as f64).powf(zipf_exponent)
                    } else {
                        0.0
                    }
                })
                .collect();
            Cdf::from_weights(&weights)
        })
        .collect();
    let user_weights: Vec<f64> = (0..num_users)
        .map(|u| 1.0 / ((u + 1) as f64).powf(USER_EXPONENT))
        .collect();
    let user_cdf = Cdf::from_weights(&user_weights);

    let mut rng = rng::stream(seed, "synth", 0);
    let mut seen = std::collections::HashSet::with_capacity(num_interactions);
    let mut out = Vec::with_capacity(num_interactions);
    let max_attempts = num_interactions.saturating_mul(1000).max(1_000_000);
    let mut attempts = 0usize;
    while out.len() < num_interactions {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Infeasible(format!(
                "gave up after {attempts} draws; requested density too high for rejection sampling"
            )));
        }
        let user = user_cdf.sample(&mut rng);
        let own_group = user % 2;
        let group = if rng.gen::<f64>() < IN_GROUP {
            own_group
        } else {
            1 - own_group
        };
        // A one-item group split can leave a group empty; fall back to the
        // other one.
        let cdf = if group_cdfs[group].cumulative.last().copied().unwrap_or(0.0) > 0.0 {
            &group_cdfs[group]
        } else {
            &group_cdfs[1 - group]
        };
        let item = cdf.sample(&mut rng);
        if seen.insert((user, item)) {
            out.push(RawInteraction {
                user_id: format!("u{user:05}"),
                item_id: format!("i{item:05}"),
                rating: None,
                timestamp: None,
            });
        }
    }
    Ok(out)
}

/// Write interactions as tab-separated `user<TAB>item` lines.
pub fn write_interactions(records: &[RawInteraction], path: &std::path::Path) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.user_id);
        buf.push('\t');
        buf.push_str(&r.item_id);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

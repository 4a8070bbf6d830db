//! Row-buffer conflict timing: pairs in different rows of the same bank
//! (DRSB) take longer to access alternately than other pairs.
//!
//! Latencies come from two normal distributions, one per ground-truth class.
//! A sample first picks its side of the threshold with the configured rate
//! and is then drawn from its class distribution truncated to that side, so
//! the threshold-crossing rates are exact while the shapes stay configurable.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dram::{DramError, DramGeometry};
use crate::os::DoubleOwnedBuffer;

pub const DEFAULT_THRESHOLD_CYCLES: u32 = 360;

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("virtual address {0:#x} is not mapped")]
    Unmapped(u64),
    #[error("need at least two buffer pages, have {0}")]
    TooFewPages(u64),
    #[error("no pair classified as same-bank after {0} attempts")]
    AttemptCap(u64),
    #[error("invalid channel model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub threshold_cycles: u32,
    pub p_high_given_drsb: f64,
    pub p_low_given_nondrsb: f64,
    pub drsb_mean: f64,
    pub drsb_sd: f64,
    pub nondrsb_mean: f64,
    pub nondrsb_sd: f64,
}

impl ChannelModel {
    pub fn dell_e6420() -> Self {
        ChannelModel { p_high_given_drsb: 0.927, p_low_given_nondrsb: 0.974, ..Self::perfect() }
    }

    pub fn lenovo_t420() -> Self {
        ChannelModel { p_high_given_drsb: 1.0, p_low_given_nondrsb: 0.990, ..Self::perfect() }
    }

    /// Classifier that is never wrong.
    pub fn perfect() -> Self {
        ChannelModel {
            threshold_cycles: DEFAULT_THRESHOLD_CYCLES,
            p_high_given_drsb: 1.0,
            p_low_given_nondrsb: 1.0,
            drsb_mean: 410.0,
            drsb_sd: 30.0,
            nondrsb_mean: 320.0,
            nondrsb_sd: 25.0,
        }
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        for (name, p) in [("p_high_given_drsb", self.p_high_given_drsb), ("p_low_given_nondrsb", self.p_low_given_nondrsb)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(TimingError::InvalidModel(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, sd) in [("drsb_sd", self.drsb_sd), ("nondrsb_sd", self.nondrsb_sd)] {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(TimingError::InvalidModel(format!("{name} = {sd} must be positive")));
            }
        }
        if self.threshold_cycles == 0 {
            return Err(TimingError::InvalidModel("threshold_cycles must be positive".into()));
        }
        Ok(())
    }

    pub fn classify(&self, cycles: u32) -> bool {
        cycles >= self.threshold_cycles
    }

    /// Latency in cycles for a pair whose true class is `drsb`.
    pub fn sample_cycles<R: Rng + ?Sized>(&self, drsb: bool, rng: &mut R) -> u32 {
        let (mean, sd, p_high) = if drsb {
            (self.drsb_mean, self.drsb_sd, self.p_high_given_drsb)
        } else {
            (self.nondrsb_mean, self.nondrsb_sd, 1.0 - self.p_low_given_nondrsb)
        };
        let normal = Normal::new(mean, sd).expect("validated model");
        let t = self.threshold_cycles as f64;
        let split = normal.cdf(t);
        let high = rng.random::<f64>() < p_high;
        let (lo, hi) = if high { (split, 1.0) } else { (0.0, split) };
        let u = lo + (hi - lo) * rng.random::<f64>();
        let x = normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12));
        // Tail mass can vanish numerically; pin to the chosen side.
        let x = if high { x.max(t) } else { x.min(t - 1.0).max(0.0) };
        x.floor() as u32
    }
}

/// One timed pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub a: u64,
    pub b: u64,
    pub cycles: u32,
    /// Classified as DRSB (`cycles >= threshold`).
    pub drsb: bool,
    /// Ground truth from the DRAM mapping.
    pub truth: bool,
}

/// Whether two physical addresses sit in different rows of the same bank.
pub fn is_drsb(geom: &DramGeometry, a: u64, b: u64) -> Result<bool, DramError> {
    let (ca, cb) = (geom.map(a)?, geom.map(b)?);
    Ok(ca.bank_id() == cb.bank_id() && ca.row != cb.row)
}

/// Time the user addresses `a` and `b` of `buffer`.
pub fn sample_latency<R: Rng + ?Sized>(
    geom: &DramGeometry,
    buffer: &DoubleOwnedBuffer,
    a: u64,
    b: u64,
    model: &ChannelModel,
    rng: &mut R,
) -> Result<LatencySample, TimingError> {
    let pa = buffer.translate(a).ok_or(TimingError::Unmapped(a))?;
    let pb = buffer.translate(b).ok_or(TimingError::Unmapped(b))?;
    let truth = is_drsb(geom, pa, pb)?;
    let cycles = model.sample_cycles(truth, rng);
    Ok(LatencySample { a, b, cycles, drsb: model.classify(cycles), truth })
}

/// A pair accepted for hammering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HammerPair {
    pub sample: LatencySample,
    pub phys: (u64, u64),
    pub attempts: u64,
}

/// Draw random page-aligned pairs from `buffer` until one times as DRSB.
pub fn select_hammer_pair<R: Rng + ?Sized>(
    geom: &DramGeometry,
    buffer: &DoubleOwnedBuffer,
    model: &ChannelModel,
    max_attempts: u64,
    rng: &mut R,
) -> Result<HammerPair, TimingError> {
    let pages = buffer.pages();
    if pages < 2 {
        return Err(TimingError::TooFewPages(pages));
    }
    for attempt in 1..=max_attempts {
        let i = rng.random_range(0..pages);
        let mut j = rng.random_range(0..pages - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (buffer.page_vaddr(i), buffer.page_vaddr(j));
        let sample = sample_latency(geom, buffer, a, b, model, rng)?;
        if sample.drsb {
            let phys = (buffer.translate(a).expect("sampled"), buffer.translate(b).expect("sampled"));
            return Ok(HammerPair { sample, phys, attempts: attempt });
        }
    }
    Err(TimingError::AttemptCap(max_attempts))
}

/// Write samples as CSV with columns `a,b,cycles,drsb,truth`.
pub fn write_samples_csv<W: Write>(samples: &[LatencySample], out: W) -> Result<(), TimingError> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buddy::{BuddyAllocator, PartitionKind, DEFAULT_MAX_ORDER};
    use crate::os::{Kernel, OsConfig};
    use crate::{KIB, PAGE_SIZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> Kernel {
        let g = DramGeometry::dell_e6420();
        let b = BuddyAllocator::catt(&g, 2048, 1, DEFAULT_MAX_ORDER).unwrap();
        Kernel::new(g, b, OsConfig::default())
    }

    #[test]
    fn classification_matches_threshold() {
        let m = ChannelModel::dell_e6420();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..2000 {
            let c = m.sample_cycles(i % 2 == 0, &mut rng);
            assert_eq!(m.classify(c), c >= 360);
        }
    }

    #[test]
    fn identical_addresses_are_not_drsb() {
        let mut k = setup();
        let mut buf = k.open_sg_many(1, 32 * KIB).unwrap();
        k.map_buffer(&mut buf);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = buf.page_vaddr(0);
        let s = sample_latency(k.geometry(), &buf, a, a, &ChannelModel::perfect(), &mut rng).unwrap();
        assert!(!s.truth && !s.drsb);
    }

    #[test]
    fn unmapped_address_is_an_error() {
        let k = setup();
        let buf = k.open_video();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = sample_latency(k.geometry(), &buf, buf.page_vaddr(0), buf.page_vaddr(1), &ChannelModel::perfect(), &mut rng);
        assert!(matches!(r, Err(TimingError::Unmapped(_))));
    }

    #[test]
    fn single_row_buffer_hits_the_cap() {
        let mut k = setup();
        // Four pages sharing one pair of bank rows.
        let block = k.buddy.allocate_exact(PartitionKind::Kernel, 4, crate::buddy::Owner::SgBuffer).unwrap();
        let mut buf = k.open_sg(16 * KIB).unwrap();
        buf.chunks.push(block);
        k.map_buffer(&mut buf);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = select_hammer_pair(k.geometry(), &buf, &ChannelModel::perfect(), 500, &mut rng);
        assert!(matches!(r, Err(TimingError::AttemptCap(500))));
    }

    #[test]
    fn perfect_model_returns_true_drsb_pairs() {
        let mut k = setup();
        let mut buf = k.request_video_buffers(2).unwrap();
        k.map_buffer(&mut buf);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = select_hammer_pair(k.geometry(), &buf, &ChannelModel::perfect(), 10_000, &mut rng).unwrap();
            assert!(p.sample.truth);
            assert_eq!(p.phys.0 % PAGE_SIZE, 0);
        }
    }

    #[test]
    fn seeded_samples_repeat() {
        let m = ChannelModel::lenovo_t420();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|i| m.sample_cycles(i % 3 == 0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn invalid_models_rejected() {
        let bad = ChannelModel { p_high_given_drsb: 1.5, ..ChannelModel::perfect() };
        assert!(bad.validate().is_err());
        let bad = ChannelModel { drsb_sd: 0.0, ..ChannelModel::perfect() };
        assert!(bad.validate().is_err());
        assert!(ChannelModel::dell_e6420().validate().is_ok());
    }

    #[test]
    fn csv_export_has_header() {
        let s = LatencySample { a: 1, b: 2, cycles: 400, drsb: true, truth: false };
        let mut out = Vec::new();
        write_samples_csv(&[s], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "a,b,cycles,drsb,truth\n1,2,400,true,false\n");
    }
}

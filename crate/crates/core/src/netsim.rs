//! Simulated wireless links and round timing.
//!
//! Uplinks run at the Shannon rate `W·log2(1 + snr)` (or a fixed override),
//! the server broadcasts the dense model on the downlink, and a round lasts as
//! long as its slowest worker plus that broadcast.

use serde::{Deserialize, Serialize};

use crate::compressor::{Atom, CompressedGradient};
use crate::error::{FflError, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    pub noise_watts: f64,
    /// Received SNR per worker; a single entry applies to every worker.
    pub snr: Vec<f64>,
    /// Fixed uplink rate that bypasses the SNR formula.
    pub uplink_rate_bps: Option<f64>,
    pub downlink_rate_bps: f64,
    /// Bits for one coordinate atom (index plus coefficient).
    pub bits_per_atom: u32,
    /// Bits for one dense weight; rank-1 atoms cost `(m + n + 1)` of these.
    pub bits_per_weight: u32,
    pub packet_failure_prob: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            bandwidth_hz: 1e6,
            noise_watts: 1e-9,
            snr: vec![required_snr(1e5, 1e6)],
            uplink_rate_bps: None,
            downlink_rate_bps: 1e5,
            bits_per_atom: 96,
            bits_per_weight: 64,
            packet_failure_prob: 0.0,
        }
    }
}

/// SNR at which a link of `bandwidth_hz` carries `rate_bps`.
pub fn required_snr(rate_bps: f64, bandwidth_hz: f64) -> f64 {
    (rate_bps / bandwidth_hz).exp2() - 1.0
}

impl ChannelConfig {
    pub fn validate(&self, workers: usize) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(FflError::config("bandwidth_hz", "must be positive"));
        }
        if !(self.noise_watts > 0.0) {
            return Err(FflError::config("noise_watts", "must be positive"));
        }
        if !(self.downlink_rate_bps > 0.0) {
            return Err(FflError::config("downlink_rate_bps", "must be positive"));
        }
        if self.bits_per_atom < 32 {
            return Err(FflError::config("bits_per_atom", "must be at least 32"));
        }
        if self.bits_per_weight == 0 {
            return Err(FflError::config("bits_per_weight", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.packet_failure_prob) {
            return Err(FflError::config("packet_failure_prob", "must lie in [0, 1]"));
        }
        match self.uplink_rate_bps {
            Some(r) if !(r > 0.0) => {
                return Err(FflError::config("uplink_rate_bps", "must be positive"));
            }
            Some(_) => {}
            None => {
                if self.snr.len() != 1 && self.snr.len() != workers {
                    return Err(FflError::config(
                        "snr",
                        format!("need 1 or {workers} entries, got {}", self.snr.len()),
                    ));
                }
                if self.snr.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                    return Err(FflError::config("snr", "every SNR must be positive (zero gives a dead link)"));
                }
            }
        }
        Ok(())
    }

    fn snr_of(&self, worker: usize) -> f64 {
        if self.snr.len() == 1 {
            self.snr[0]
        } else {
            self.snr[worker]
        }
    }
}

/// Uplink rate of `worker` in bits per second.
pub fn link_rate(cfg: &ChannelConfig, worker: usize) -> f64 {
    match cfg.uplink_rate_bps {
        Some(r) => r,
        None => cfg.bandwidth_hz * (1.0 + cfg.snr_of(worker)).log2(),
    }
}

/// Bits needed to send one atom.
pub fn atom_bits(atom: &Atom, cfg: &ChannelConfig) -> u64 {
    match atom.matrix_dims() {
        None => u64::from(cfg.bits_per_atom),
        Some((m, n)) => u64::from(cfg.bits_per_weight) * (m + n + 1) as u64,
    }
}

pub fn compressed_bits(c: &CompressedGradient, cfg: &ChannelConfig) -> u64 {
    c.entries.iter().map(|e| atom_bits(&e.atom, cfg)).sum()
}

pub fn dense_bits(d: usize, cfg: &ChannelConfig) -> u64 {
    d as u64 * u64::from(cfg.bits_per_weight)
}

/// Time to send `payload_atoms` coordinate atoms.
pub fn uplink_time(payload_atoms: usize, cfg: &ChannelConfig, worker: usize) -> f64 {
    uplink_time_bits(payload_atoms as u64 * u64::from(cfg.bits_per_atom), cfg, worker)
}

pub fn uplink_time_bits(bits: u64, cfg: &ChannelConfig, worker: usize) -> f64 {
    bits as f64 / link_rate(cfg, worker)
}

pub fn downlink_time(bits: u64, cfg: &ChannelConfig) -> f64 {
    bits as f64 / cfg.downlink_rate_bps
}

/// `max_j (compute_j + uplink_j) + downlink`.
pub fn round_time(compute: &[f64], uplinks: &[f64], downlink_bits: u64, cfg: &ChannelConfig) -> Result<f64> {
    if compute.len() != uplinks.len() || compute.is_empty() {
        return Err(FflError::Dimension(format!(
            "{} compute times for {} uplinks",
            compute.len(),
            uplinks.len()
        )));
    }
    let straggler = compute
        .iter()
        .zip(uplinks)
        .map(|(y, u)| y + u)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(straggler + downlink_time(downlink_bits, cfg))
}

/// One Bernoulli draw: `false` with probability `packet_failure_prob`.
pub fn packet_survives(rng: &mut RngStream, cfg: &ChannelConfig) -> bool {
    !rng.bernoulli(cfg.packet_failure_prob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub round: usize,
    pub compute: Vec<f64>,
    pub uplink: Vec<f64>,
    pub downlink: f64,
    pub total: f64,
}

impl RoundTiming {
    pub fn compute_max(&self) -> f64 {
        self.compute.iter().copied().fold(0.0, f64::max)
    }

    pub fn uplink_max(&self) -> f64 {
        self.uplink.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-round timings and the simulated wall clock.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeLedger {
    pub rounds: Vec<RoundTiming>,
    elapsed: f64,
}

impl TimeLedger {
    /// Time the round and advance the clock.
    pub fn record(
        &mut self,
        compute: Vec<f64>,
        uplink: Vec<f64>,
        downlink_bits: u64,
        cfg: &ChannelConfig,
    ) -> Result<&RoundTiming> {
        let total = round_time(&compute, &uplink, downlink_bits, cfg)?;
        if !(total > 0.0) {
            return Err(FflError::invalid("round took no simulated time"));
        }
        self.elapsed += total;
        self.rounds.push(RoundTiming {
            round: self.rounds.len(),
            compute,
            uplink,
            downlink: downlink_time(downlink_bits, cfg),
            total,
        });
        Ok(self.rounds.last().expect("just pushed"))
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }
}

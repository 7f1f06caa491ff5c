//! Experiment configuration: one flat JSON object.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compressor::Basis;
use crate::data::{PartitionMode, PartitionSpec};
use crate::error::{FflError, Result};
use crate::netsim::{required_snr, ChannelConfig};
use crate::nn::{Activation, MlpSpec};
use crate::scheduler::SchedulerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Adaptive τ and s with compression.
    Ffl,
    /// Adaptive τ, dense uplink.
    AdacommLike,
    /// τ = 1, compression at the fixed budget s0.
    AtomoLike,
    /// Constant τ0 and s0 with compression.
    Fixed,
    /// τ = 1, dense uplink.
    Vanilla,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Ffl,
        Scheme::AdacommLike,
        Scheme::AtomoLike,
        Scheme::Fixed,
        Scheme::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ffl => "ffl",
            Scheme::AdacommLike => "adacomm_like",
            Scheme::AtomoLike => "atomo_like",
            Scheme::Fixed => "fixed",
            Scheme::Vanilla => "vanilla",
        }
    }

    pub fn parse(name: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
                FflError::config("scheme", format!("unknown scheme `{name}`; expected one of {}", known.join(", ")))
            })
    }

    pub fn compresses(self) -> bool {
        !matches!(self, Scheme::AdacommLike | Scheme::Vanilla)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cube-root law in the smoothed loss.
    Conclusive,
    /// Minimise the error bound with estimated constants.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Time,
    Rounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisName {
    Elementwise,
    Lowrank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    Iid,
    ClassesPerWorker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheme: Scheme,
    pub schedule: Schedule,

    pub tau0: usize,
    pub tau_ub: usize,
    pub s0: f64,
    pub s_ub: f64,
    pub loss_smoothing: f64,

    pub eta: f64,
    pub server_momentum: f64,
    pub worker_momentum: f64,
    pub batch_size: usize,
    pub workers: usize,

    #[serde(rename = "T_budget_s")]
    pub t_budget_s: f64,
    pub round_cap: usize,
    pub stop: StopRule,
    /// End the run once the smoothed test accuracy reaches `target_accuracy`.
    pub stop_at_target: bool,
    pub target_accuracy: f64,
    pub acc_smoothing: f64,
    pub eval_stride: usize,

    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub basis: BasisName,
    pub lowrank_rank: usize,

    pub dataset: DatasetKind,
    pub mnist_dir: Option<PathBuf>,
    pub subset_n: Option<usize>,
    pub synthetic_per_class: usize,
    pub synthetic_spread: f64,
    pub test_fraction: f64,
    pub partition: PartitionName,
    pub classes_per_worker: Option<usize>,

    pub bandwidth_hz: f64,
    pub noise_watts: f64,
    /// One value for every worker or one per worker.
    pub snr: Vec<f64>,
    pub uplink_rate_bps: Option<f64>,
    pub downlink_rate_bps: f64,
    pub bits_per_atom: u32,
    pub bits_per_weight: u32,
    pub packet_failure_prob: f64,
    pub sec_per_local_step: f64,
    pub sec_per_atom_compress: f64,

    pub lipschitz: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Seconds per atom; derived from the channel when absent.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub f_inf: f64,
    pub probe_rounds: usize,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            scheme: Scheme::Ffl,
            schedule: Schedule::Conclusive,
            tau0: 30,
            tau_ub: 30,
            s0: 5.0,
            s_ub: 9.0,
            loss_smoothing: 0.3,
            eta: 0.01,
            server_momentum: 0.9,
            worker_momentum: 0.0,
            batch_size: 64,
            workers: 8,
            t_budget_s: 600.0,
            round_cap: 100_000,
            stop: StopRule::Time,
            stop_at_target: false,
            target_accuracy: 0.9,
            acc_smoothing: 0.3,
            eval_stride: 1,
            layer_sizes: vec![16, 64, 64, 4],
            activation: Activation::Relu,
            basis: BasisName::Lowrank,
            lowrank_rank: 9,
            dataset: DatasetKind::Synthetic,
            mnist_dir: None,
            subset_n: None,
            synthetic_per_class: 1250,
            synthetic_spread: 0.3,
            test_fraction: 0.2,
            partition: PartitionName::Iid,
            classes_per_worker: None,
            bandwidth_hz: 1e6,
            noise_watts: 1e-9,
            snr: vec![required_snr(1e5, 1e6)],
            uplink_rate_bps: None,
            downlink_rate_bps: 1e5,
            bits_per_atom: 96,
            bits_per_weight: 64,
            packet_failure_prob: 0.0,
            sec_per_local_step: 0.01,
            sec_per_atom_compress: 0.0,
            lipschitz: 1.0,
            sigma1: 1.0,
            sigma2: 0.0,
            alpha: None,
            beta: 0.0,
            f_inf: 0.0,
            probe_rounds: 2,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(FflError::config(key, message))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            // Serde names the field in its message, e.g. "unknown field `x`" or "invalid type ... at `eta`".
            let key = e
                .to_string()
                .split('`')
                .nth(1)
                .map(str::to_owned)
                .unwrap_or_else(|| "<document>".into());
            FflError::config(key, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FflError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.eta > 0.0 && self.eta.is_finite(), "eta", format!("must be positive, got {}", self.eta))?;
        check((0.0..1.0).contains(&self.server_momentum), "server_momentum", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.worker_momentum), "worker_momentum", "must lie in [0, 1)")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.workers >= 1, "workers", "must be at least 1")?;
        check(self.t_budget_s > 0.0, "T_budget_s", "must be positive")?;
        check(self.round_cap >= 1, "round_cap", "must be at least 1")?;
        check(
            self.target_accuracy > 0.0 && self.target_accuracy <= 1.0,
            "target_accuracy",
            "must lie in (0, 1]",
        )?;
        check((0.0..1.0).contains(&self.acc_smoothing), "acc_smoothing", "must lie in [0, 1)")?;
        check(self.eval_stride >= 1, "eval_stride", "must be at least 1")?;
        check(self.lowrank_rank >= 1, "lowrank_rank", "must be at least 1")?;
        check(self.sec_per_local_step >= 0.0, "sec_per_local_step", "must be non-negative")?;
        check(self.sec_per_atom_compress >= 0.0, "sec_per_atom_compress", "must be non-negative")?;
        check(self.lipschitz > 0.0, "lipschitz", "must be positive")?;
        check(self.sigma1 >= 0.0, "sigma1", "must be non-negative")?;
        check(self.alpha.is_none_or(|a| a > 0.0), "alpha", "must be positive")?;
        check(self.f_inf >= 0.0, "f_inf", "must be non-negative")?;
        check(self.synthetic_per_class >= 1, "synthetic_per_class", "must be at least 1")?;
        check(self.subset_n.is_none_or(|n| n >= 2), "subset_n", "must be at least 2")?;
        match self.partition {
            PartitionName::Iid => {}
            PartitionName::ClassesPerWorker => check(
                self.classes_per_worker.is_some(),
                "classes_per_worker",
                "required when partition is classes_per_worker",
            )?,
        }
        if self.dataset == DatasetKind::Mnist {
            check(self.mnist_dir.is_some(), "mnist_dir", "required when dataset is mnist")?;
        }
        self.mlp_spec()?;
        self.scheduler_state(1.0)?;
        self.channel().validate(self.workers)?;

        let margin = self.eta * self.lipschitz * (self.tau_ub as f64 - 1.0);
        if margin >= 0.5 {
            log::warn!("eta·lipschitz·(tau_ub − 1) = {margin:.3} is not small; the error bound is loose");
        }
        Ok(())
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.layer_sizes.clone(), self.activation)
    }

    pub fn scheduler_state(&self, f0: f64) -> Result<SchedulerState> {
        let state = SchedulerState {
            f0,
            tau0: self.tau0,
            s0: self.s0,
            tau_ub: self.tau_ub,
            s_ub: self.s_ub,
            loss_smoothing: self.loss_smoothing,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            bandwidth_hz: self.bandwidth_hz,
            noise_watts: self.noise_watts,
            snr: self.snr.clone(),
            uplink_rate_bps: self.uplink_rate_bps,
            downlink_rate_bps: self.downlink_rate_bps,
            bits_per_atom: self.bits_per_atom,
            bits_per_weight: self.bits_per_weight,
            packet_failure_prob: self.packet_failure_prob,
        }
    }

    pub fn basis(&self) -> Basis {
        match self.basis {
            BasisName::Elementwise => Basis::Elementwise,
            BasisName::Lowrank => Basis::Lowrank {
                rank: self.lowrank_rank,
            },
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let mode = match self.partition {
            PartitionName::Iid => PartitionMode::Iid,
            PartitionName::ClassesPerWorker => PartitionMode::ClassesPerWorker(self.classes_per_worker.unwrap_or(0)),
        };
        PartitionSpec {
            mode,
            workers: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig {
            scheme: Scheme::AtomoLike,
            alpha: Some(0.002),
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn negative_eta_names_the_key() {
        let err = ExperimentConfig::from_json(r#"{"eta": -1}"#).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("eta"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn out_of_range_schedule_values_name_keys() {
        let err = ExperimentConfig::from_json(r#"{"tau0": 40}"#).unwrap_err();
        assert!(err.to_string().contains("tau0"));
        let err = ExperimentConfig::from_json(r#"{"packet_failure_prob": 1.5}"#).unwrap_err();
        assert!(err.to_string().contains("packet_failure_prob"));
        let err = ExperimentConfig::from_json(r#"{"layer_sizes": [16]}"#).unwrap_err();
        assert!(err.to_string().contains("layer_sizes"));
    }

    #[test]
    fn scheme_names_parse() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(s.name()).unwrap(), s);
        }
        assert!(Scheme::parse("fedavg").unwrap_err().is_config());
    }
}

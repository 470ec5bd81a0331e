//! Pipeline configuration: a single JSON document drives the full chain
//! from boundary-model fitting through multi-wave history matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryFitConfig, Period, DEFAULT_MIN_SIGNAL};
use crate::error::{Error, Result};
use crate::history_match::{Combine, OutputSpec, DEFAULT_MC_SAMPLES};
use crate::synthetic::{ToySimulatorConfig, TruthConfig};

/// Stationary squared-exponential covariance settings for the boundary
/// model's spatial and temporal factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceConfig {
    pub spatial_length_scale: f64,
    pub spatial_variance: f64,
    pub temporal_length_scale: f64,
    pub temporal_variance: f64,
    pub nugget: f64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig {
            spatial_length_scale: 4.0,
            spatial_variance: 1.0,
            temporal_length_scale: 5.0,
            temporal_variance: 1.0,
            nugget: 1e-6,
        }
    }
}

/// A rectangular region of the simulator grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionSpec {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

/// What simulator quantity an output id measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputTarget {
    Volume { time: usize },
    Extent { region: RegionSpec, time: usize },
}

/// Prior coefficient-space settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub bounds: Vec<(f64, f64)>,
    pub j: usize,
    pub n_samples: usize,
}

/// One wave: which outputs constrain it and how the rules combine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveConfig {
    pub specs: Vec<String>,
    pub combine: Combine,
    /// Design size for the next wave's resample.
    pub n_design: usize,
    pub frac_best: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: String,
    pub seed: u64,
    pub simulator: ToySimulatorConfig,
    pub ensemble_members: usize,
    pub periods: Vec<(usize, usize)>,
    pub anchors: Vec<usize>,
    pub fit_locations: Vec<usize>,
    pub holdout_locations: Vec<usize>,
    pub n_t_per_period: usize,
    pub n_s_per_period: usize,
    pub min_signal: f64,
    pub covariance: CovarianceConfig,
    pub truth: TruthConfig,
    pub prior: PriorConfig,
    /// Initial Latin-hypercube design size.
    pub n_design: usize,
    pub waves: Vec<WaveConfig>,
    pub outputs: Vec<OutputSpec>,
    /// Simulator quantity per output id.
    pub targets: BTreeMap<String, OutputTarget>,
    /// Append one expert spatial vector (a centred Gaussian bump) to the
    /// final period after fitting.
    pub expert_vector: bool,
    pub mc_samples: usize,
    pub emulator_restarts: usize,
    /// Rank of the region-extent basis used for binary outputs.
    pub extent_basis_rank: usize,
    pub binary_threshold: f64,
}

impl PipelineConfig {
    pub fn fit_config(&self) -> BoundaryFitConfig {
        BoundaryFitConfig {
            periods: self
                .periods
                .iter()
                .map(|&(start, end)| Period { start, end })
                .collect(),
            anchors: self.anchors.clone(),
            fit_locations: self.fit_locations.clone(),
            holdout_locations: self.holdout_locations.clone(),
            n_t_per_period: self.n_t_per_period,
            n_s_per_period: self.n_s_per_period,
            min_signal: self.min_signal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        if self.periods.is_empty() {
            return Err(Error::Config("at least one period required".into()));
        }
        if self.waves.is_empty() {
            return Err(Error::Config("at least one wave required".into()));
        }
        for spec in &self.outputs {
            // Binary-region specs with ell = 0 are placeholders; the
            // pipeline fills in the region size and observed map from the
            // generated truth before running waves.
            if !(matches!(spec.kind, crate::history_match::OutputKind::BinaryRegion) && spec.ell == 0)
            {
                spec.validate()?;
            }
        }
        for (wi, w) in self.waves.iter().enumerate() {
            for id in &w.specs {
                let spec = self
                    .outputs
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("wave {} references unknown output {}", wi + 1, id)))?;
                if !spec.wave_list.contains(&(wi + 1)) {
                    return Err(Error::Config(format!(
                        "output {} is not registered for wave {}",
                        id,
                        wi + 1
                    )));
                }
            }
        }
        if self.mc_samples == 0 || self.n_design < 2 {
            return Err(Error::Config("mc_samples and n_design must be positive".into()));
        }
        for spec in &self.outputs {
            let target = self
                .targets
                .get(&spec.id)
                .ok_or_else(|| Error::Config(format!("no simulator target for output {}", spec.id)))?;
            let time = match target {
                OutputTarget::Volume { time } => *time,
                OutputTarget::Extent { time, region } => {
                    if region.x1 <= region.x0 || region.y1 <= region.y0 {
                        return Err(Error::Config(format!("empty region for output {}", spec.id)));
                    }
                    *time
                }
            };
            if time >= self.simulator.n_timesteps {
                return Err(Error::Config(format!(
                    "output {} targets time {} beyond {} timesteps",
                    spec.id, time, self.simulator.n_timesteps
                )));
            }
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    /// Desk-scale defaults: 20x15 grid, 30 timesteps, 3 periods with 2
    /// temporal + 2 spatial vectors each plus one expert vector, 7 physics
    /// parameters, 3 waves.
    fn default() -> Self {
        let volume_spec = |id: &str, wave_list: Vec<usize>, sigma_e: f64, bound: &str| OutputSpec {
            id: id.into(),
            kind: crate::history_match::OutputKind::Scalar,
            wave_list,
            ell: 1,
            obs: vec![0.0],
            sigma_e: vec![sigma_e],
            sigma_eta: vec![],
            bound: bound.into(),
            binary_summary: None,
        };
        PipelineConfig {
            out_dir: "out".into(),
            seed: 0,
            simulator: ToySimulatorConfig::default(),
            ensemble_members: 12,
            periods: vec![(0, 10), (10, 20), (20, 30)],
            anchors: vec![0],
            fit_locations: vec![],
            holdout_locations: vec![],
            n_t_per_period: 2,
            n_s_per_period: 2,
            min_signal: DEFAULT_MIN_SIGNAL,
            covariance: CovarianceConfig::default(),
            truth: TruthConfig::default(),
            prior: PriorConfig {
                bounds: vec![],
                j: 1,
                n_samples: 2000,
            },
            n_design: 150,
            waves: vec![
                WaveConfig {
                    specs: vec!["vol_a".into(), "sw_extent".into(), "ce_extent".into()],
                    combine: Combine::All,
                    n_design: 150,
                    frac_best: 0.3,
                },
                WaveConfig {
                    specs: vec!["vol_b".into(), "vol_c".into()],
                    combine: Combine::JthMax(1),
                    n_design: 150,
                    frac_best: 0.3,
                },
                WaveConfig {
                    specs: vec!["vol_b".into()],
                    combine: Combine::All,
                    n_design: 150,
                    frac_best: 0.3,
                },
            ],
            outputs: vec![
                volume_spec("vol_a", vec![1], 4.0, "3^2"),
                volume_spec("vol_b", vec![2, 3], 1.416, "2.5^2"),
                volume_spec("vol_c", vec![2], 0.279, "3^2"),
                OutputSpec {
                    id: "sw_extent".into(),
                    kind: crate::history_match::OutputKind::BinaryRegion,
                    wave_list: vec![1],
                    ell: 0,
                    obs: vec![],
                    sigma_e: vec![],
                    sigma_eta: vec![],
                    bound: "0.25*ell".into(),
                    binary_summary: Some(crate::history_match::BinarySummary::Min),
                },
                OutputSpec {
                    id: "ce_extent".into(),
                    kind: crate::history_match::OutputKind::BinaryRegion,
                    wave_list: vec![1],
                    ell: 0,
                    obs: vec![],
                    sigma_e: vec![],
                    sigma_eta: vec![],
                    bound: "0.25*ell".into(),
                    binary_summary: Some(crate::history_match::BinarySummary::Mean),
                },
            ],
            targets: {
                let mut t = BTreeMap::new();
                t.insert("vol_a".into(), OutputTarget::Volume { time: 9 });
                t.insert("vol_b".into(), OutputTarget::Volume { time: 19 });
                t.insert("vol_c".into(), OutputTarget::Volume { time: 29 });
                t.insert(
                    "sw_extent".into(),
                    OutputTarget::Extent {
                        region: RegionSpec { x0: 0, x1: 10, y0: 0, y1: 7 },
                        time: 9,
                    },
                );
                t.insert(
                    "ce_extent".into(),
                    OutputTarget::Extent {
                        region: RegionSpec { x0: 5, x1: 15, y0: 4, y1: 11 },
                        time: 9,
                    },
                );
                t
            },
            expert_vector: true,
            mc_samples: DEFAULT_MC_SAMPLES,
            emulator_restarts: 10,
            extent_basis_rank: 3,
            binary_threshold: 10.0,
        }
    }
}

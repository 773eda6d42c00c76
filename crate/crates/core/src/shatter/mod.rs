//! Gradient shattering on scalar-to-scalar residual networks: gradients
//! over an input grid, their correlation across random initializations,
//! and how often last-module neurons are active.

pub mod svg;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::arch::{build_scalar_net, Network, NodeKind};
use crate::erase::{apply_erase, Location};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::CounterRng;
use crate::tensor::{Scalar, Tape, Tensor};

/// Grid points evaluated per forward pass; bounds tape memory at depth 300.
const CHUNK: usize = 250;
/// Largest grid the covariance estimate is computed on.
pub const MAX_COV_POINTS: usize = 256;
/// Points whose gradient variance is below this are excluded.
pub const MIN_VARIANCE: f64 = 1e-20;
/// Rates below this or above `1 - BIMODAL_TAIL` count as saturated.
pub const BIMODAL_TAIL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -2.0,
            hi: 2.0,
            points: 1000,
        }
    }
}

impl Grid {
    /// `x_i = lo + i·(hi − lo)/(points − 1)`.
    pub fn values(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + i as f64 * step).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarNetConfig {
    /// Number of middle modules.
    pub depth: usize,
    pub width: usize,
    /// Erase the tail ReLU of every module.
    pub erase: bool,
    pub grid: Grid,
    pub replicates: usize,
    pub seed: u64,
}

impl ScalarNetConfig {
    pub fn new(depth: usize, erase: bool, replicates: usize, seed: u64) -> Self {
        Self {
            depth,
            width: 200,
            erase,
            grid: Grid::default(),
            replicates,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("scalar net depth must be >= 1".into()));
        }
        if self.width < 2 {
            return Err(Error::Config(format!("scalar net width must be >= 2, got {}", self.width)));
        }
        if self.grid.points < 2 || self.grid.lo.partial_cmp(&self.grid.hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config(format!("grid needs >= 2 points and lo < hi, got {:?}", self.grid)));
        }
        if self.replicates < 2 {
            return Err(Error::Config(format!("need >= 2 replicates, got {}", self.replicates)));
        }
        Ok(())
    }

    /// Weight stream of replicate `r`. It depends on the depth but not on
    /// `erase`, so both variants of a replicate share their weights.
    pub fn weight_stream(&self, replicate: usize) -> CounterRng {
        CounterRng::substream(self.seed, "shatter")
            .child(self.depth as u64)
            .child(replicate as u64)
    }
}

/// A scalar network instantiated for analysis, with the node whose output
/// is the last module's pre-activation.
pub struct ScalarNet<T: Scalar> {
    pub net: Network<T>,
    pub pre_activation: usize,
}

/// Build replicate `r` of the configured scalar net.
pub fn scalar_net<T: Scalar>(cfg: &ScalarNetConfig, replicate: usize) -> Result<ScalarNet<T>> {
    cfg.validate()?;
    let mut g = build_scalar_net(cfg.depth, cfg.width)?;
    if cfg.erase {
        g = apply_erase(&g, 1.0, Location::Last)?.0;
    }
    let last = g.modules.last().ok_or_else(|| Error::Contract("scalar net without modules".into()))?;
    let pre_activation = last
        .nodes
        .iter()
        .copied()
        .find(|&id| g.node(id).is_some_and(|n| n.kind == NodeKind::AddShortcut))
        .ok_or_else(|| Error::Contract("last module has no shortcut addition".into()))?;
    Ok(ScalarNet {
        net: Network::new(g, &cfg.weight_stream(replicate))?,
        pre_activation,
    })
}

/// Gradients `d f(x_i) / d x_i` at every grid point, and the last module's
/// pre-activations as a row-major `points × width` matrix.
pub fn probe<T: Scalar>(s: &mut ScalarNet<T>, grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
    let xs = grid.values();
    let mut grads = Vec::with_capacity(xs.len());
    let mut pre = Vec::new();
    let mut unused = CounterRng::new(0);
    for chunk in xs.chunks(CHUNK) {
        let mut tape = Tape::<T>::new();
        let data = chunk.iter().map(|&v| T::lit(v)).collect();
        let x = tape.leaf(Tensor::from_vec(&[chunk.len(), 1], data)?.with_requires_grad(true));
        let pass = s.net.forward(&mut tape, x, Mode::Eval, &mut unused, false)?;
        let a = pass
            .node(s.pre_activation)
            .ok_or_else(|| Error::Contract("pre-activation node was not evaluated".into()))?;
        pre.extend(tape.value(a).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
        let total = tape.sum(pass.output);
        tape.backward(total)?;
        let g = tape.grad(x).ok_or_else(|| Error::Contract("input gradient missing".into()))?;
        grads.extend(g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
    }
    Ok((grads, pre))
}

/// Gradients of `f` over the grid.
pub fn grid_gradients<T: Scalar>(s: &mut ScalarNet<T>, grid: &Grid) -> Result<Vec<f64>> {
    probe(s, grid).map(|(g, _)| g)
}

/// Fraction of points at which each neuron is strictly positive, for a
/// row-major `points × width` matrix.
pub fn activation_rates(pre: &[f64], points: usize, width: usize) -> Vec<f64> {
    let mut active = vec![0usize; width];
    for row in pre.chunks_exact(width).take(points) {
        for (a, &v) in active.iter_mut().zip(row) {
            *a += usize::from(v > 0.0);
        }
    }
    active.into_iter().map(|a| a as f64 / points as f64).collect()
}

/// Fraction of rates below 0.05 or above 0.95.
pub fn bimodality_index(rates: &[f64]) -> f64 {
    let extreme = rates.iter().filter(|r| !(BIMODAL_TAIL..=1.0 - BIMODAL_TAIL).contains(*r)).count();
    extreme as f64 / rates.len() as f64
}

/// Activation rates of the last module's neurons and their bimodality.
pub fn activation_stats<T: Scalar>(s: &mut ScalarNet<T>, grid: &Grid) -> Result<(Vec<f64>, f64)> {
    let (_, pre) = probe(s, grid)?;
    let width = pre.len() / grid.points;
    let rates = activation_rates(&pre, grid.points, width);
    let b = bimodality_index(&rates);
    Ok((rates, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub mean_abs_offdiag_corr: f64,
    /// Points of the downsampled grid dropped for near-zero variance.
    pub excluded_points: usize,
    /// Grid stride used for downsampling.
    pub stride: usize,
    /// Indices (into the full grid) of the retained points.
    pub retained: Vec<usize>,
    /// Row-major correlation matrix over the retained points.
    pub corr_matrix: Vec<f64>,
}

/// Correlation of gradients across replicates. Each point is one variable
/// and each replicate one observation; the grid is first thinned to every
/// `ceil(points / 256)`-th point.
pub fn covariance_stats(gradients: &[Vec<f64>]) -> Result<CovarianceSummary> {
    let r = gradients.len();
    if r < 2 {
        return Err(Error::DegenerateStatistics(format!("covariance needs >= 2 replicates, got {r}")));
    }
    let points = gradients[0].len();
    if gradients.iter().any(|g| g.len() != points) || points == 0 {
        return Err(Error::Contract("replicate gradient vectors must share a nonzero length".into()));
    }
    let stride = points.div_ceil(MAX_COV_POINTS);
    let sampled: Vec<usize> = (0..points).step_by(stride).collect();
    let rm1 = (r - 1) as f64;
    // Centered observations: column i holds the deviations at point i.
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(sampled.len());
    let mut retained = Vec::new();
    for &i in &sampled {
        let mean = gradients.iter().map(|g| g[i]).sum::<f64>() / r as f64;
        let dev: Vec<f64> = gradients.iter().map(|g| g[i] - mean).collect();
        let var = dev.iter().map(|d| d * d).sum::<f64>() / rm1;
        if var >= MIN_VARIANCE && var.is_finite() {
            centered.push(dev);
            retained.push(i);
        }
    }
    let excluded = sampled.len() - retained.len();
    let n = retained.len();
    if n < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "{excluded} of {} grid points have zero gradient variance",
            sampled.len()
        )));
    }
    let norms: Vec<f64> = centered.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut corr = vec![0.0; n * n];
    let mut abs_sum = 0.0;
    for i in 0..n {
        corr[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let rho = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            corr[i * n + j] = rho;
            corr[j * n + i] = rho;
            abs_sum += 2.0 * rho.abs();
        }
    }
    Ok(CovarianceSummary {
        mean_abs_offdiag_corr: abs_sum / (n * (n - 1)) as f64,
        excluded_points: excluded,
        stride,
        retained,
        corr_matrix: corr,
    })
}

/// Everything measured for one (depth, erase) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: ScalarNetConfig,
    /// How the covariance was estimated.
    pub estimator: String,
    pub gradients: Vec<Vec<f64>>,
    pub covariance: CovarianceSummary,
    /// Rates of replicate 0.
    pub activation_rates: Vec<f64>,
    /// Mean over replicates of the per-replicate bimodality index.
    pub bimodality_index: f64,
}

pub const ESTIMATOR: &str = "sample covariance across independent initializations at fixed grid points";

/// Run every replicate of one configuration.
pub fn analyze(cfg: &ScalarNetConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    let mut gradients = Vec::with_capacity(cfg.replicates);
    let mut rates0 = Vec::new();
    let mut bimodal = 0.0;
    for r in 0..cfg.replicates {
        let mut s = scalar_net::<f32>(cfg, r)?;
        let (g, pre) = probe(&mut s, &cfg.grid)?;
        let rates = activation_rates(&pre, cfg.grid.points, cfg.width);
        bimodal += bimodality_index(&rates);
        if r == 0 {
            rates0 = rates;
        }
        gradients.push(g);
    }
    let covariance = covariance_stats(&gradients)?;
    Ok(AnalysisReport {
        config: cfg.clone(),
        estimator: ESTIMATOR.into(),
        gradients,
        covariance,
        activation_rates: rates0,
        bimodality_index: bimodal / cfg.replicates as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub width: usize,
    pub replicates: usize,
    pub grid: Grid,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(depths: Vec<usize>, replicates: usize, seed: u64) -> Self {
        Self {
            depths,
            width: 200,
            replicates,
            grid: Grid::default(),
            seed,
        }
    }
}

/// One row of the sweep table. `report` is `None` when the cell failed.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub depth: usize,
    pub erase: bool,
    pub replicates: usize,
    pub report: std::result::Result<AnalysisReport, String>,
}

impl SweepCell {
    pub fn mean_abs_offdiag_corr(&self) -> f64 {
        self.report.as_ref().map_or(f64::NAN, |r| r.covariance.mean_abs_offdiag_corr)
    }

    pub fn bimodality_index(&self) -> f64 {
        self.report.as_ref().map_or(f64::NAN, |r| r.bimodality_index)
    }

    pub fn excluded_points(&self) -> Option<usize> {
        self.report.as_ref().ok().map(|r| r.covariance.excluded_points)
    }
}

/// Analyze every depth with and without erasure, in (depth, erase) order.
/// A failing cell is recorded and the sweep continues.
pub fn run_depth_sweep(cfg: &SweepConfig) -> Result<Vec<SweepCell>> {
    if cfg.depths.is_empty() {
        return Err(Error::Config("depth sweep needs at least one depth".into()));
    }
    let mut cells = Vec::with_capacity(cfg.depths.len() * 2);
    for &depth in &cfg.depths {
        for erase in [false, true] {
            let cell_cfg = ScalarNetConfig {
                depth,
                width: cfg.width,
                erase,
                grid: cfg.grid,
                replicates: cfg.replicates,
                seed: cfg.seed,
            };
            let report = analyze(&cell_cfg).map_err(|e| {
                warn!("cell depth={depth} erase={erase} failed: {e}");
                e.to_string()
            });
            if let Ok(r) = &report {
                info!(
                    "depth {depth} erase {erase}: corr {:.4} bimodality {:.4}",
                    r.covariance.mean_abs_offdiag_corr, r.bimodality_index
                );
            }
            cells.push(SweepCell {
                depth,
                erase,
                replicates: cfg.replicates,
                report,
            });
        }
    }
    Ok(cells)
}

pub const SWEEP_HEADER: &str = "depth,erase,replicates,mean_abs_offdiag_corr,excluded_points,bimodality_index";

/// The sweep table as CSV. Failed cells have empty metric fields.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for c in cells {
        let (corr, excl, bim) = match &c.report {
            Ok(r) => (
                r.covariance.mean_abs_offdiag_corr.to_string(),
                r.covariance.excluded_points.to_string(),
                r.bimodality_index.to_string(),
            ),
            Err(_) => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!("{},{},{},{corr},{excl},{bim}\n", c.depth, c.erase, c.replicates));
    }
    out
}

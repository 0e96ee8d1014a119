//! Batch experiments: build or load an instance, sweep ε, run the checkers and
//! write reports, rate fits and plots.
//!
//! See `docs/config.md` for the JSON layout of [`ExperimentConfig`] and
//! [`GeneratorSpec`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{pushforward, scaled_ball_grid, DiscreteMeasure, MongeMapKind, MongeMapSpec, DEFAULT_ATOM_CAP};
use crate::plot::write_rate_svg;
use crate::qot_solver::SolverConfig;
use crate::verify::{
    annotate_trends, check_rate_floor, fit_rate, prepare, run_checks, run_epsilon, write_jsonl, BoundId, BoundReport,
    Instance, Prepared, RateFit,
};

/// Synthetic instance families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// `δ_0` transported to itself.
    Singleton {
        #[serde(default = "one")]
        dim: usize,
    },
    /// `½δ_{-1} + ½δ_1` on the line, transported to itself.
    TwoPoint,
    /// Equal-weight lattice `hZ^d ∩ B(0,1)` transported to itself.
    Grid { dim: usize, spacing: f64 },
    /// Lattice on `B(0, min(1, 1/a))` pushed forward by `x ↦ a x`.
    Affine { dim: usize, spacing: f64, scale: f64 },
    /// Uniform random atoms in the unit ball with random weights.
    Random {
        dim: usize,
        atoms: usize,
        #[serde(default)]
        target_atoms: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn one() -> usize {
    1
}

impl GeneratorSpec {
    pub fn name(&self) -> String {
        match self {
            GeneratorSpec::Singleton { dim } => format!("singleton_d{dim}"),
            GeneratorSpec::TwoPoint => "two_point".into(),
            GeneratorSpec::Grid { dim, spacing } => format!("grid_d{dim}_h{spacing}"),
            GeneratorSpec::Affine { dim, spacing, scale } => format!("affine_d{dim}_h{spacing}_a{scale}"),
            GeneratorSpec::Random {
                dim,
                atoms,
                target_atoms,
                ..
            } => format!("random_d{dim}_n{atoms}_m{}", target_atoms.unwrap_or(*atoms)),
        }
    }

    /// Builds the instance; `default_seed` drives the random family when it has no seed of its own.
    pub fn build(&self, default_seed: u64) -> Result<Instance> {
        let name = self.name();
        let self_transport = |mu: DiscreteMeasure| {
            let dim = mu.dim();
            Instance {
                name: name.clone(),
                nu: mu.clone(),
                mu,
                monge: Some(MongeMapSpec::identity(dim)),
            }
        };
        match *self {
            GeneratorSpec::Singleton { dim } => {
                check_dim(dim)?;
                Ok(self_transport(DiscreteMeasure::dirac(&vec![0.0; dim])?))
            }
            GeneratorSpec::TwoPoint => Ok(self_transport(DiscreteMeasure::new(
                &[vec![-1.0], vec![1.0]],
                &[0.5, 0.5],
            )?)),
            GeneratorSpec::Grid { dim, spacing } => {
                check_dim(dim)?;
                Ok(self_transport(scaled_ball_grid(dim, spacing, 1.0, DEFAULT_ATOM_CAP)?))
            }
            GeneratorSpec::Affine { dim, spacing, scale } => {
                check_dim(dim)?;
                if !(scale > 0.0) || !scale.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "affine scale must be positive, got {scale}"
                    )));
                }
                let radius = (1.0 / scale).min(1.0);
                let mu = scaled_ball_grid(dim, spacing, radius, DEFAULT_ATOM_CAP)?;
                let map = MongeMapSpec::scaling(dim, scale)?;
                let nu = pushforward(&mu, &map)?;
                Ok(Instance {
                    name,
                    mu,
                    nu,
                    monge: Some(map),
                })
            }
            GeneratorSpec::Random {
                dim,
                atoms,
                target_atoms,
                seed,
            } => {
                check_dim(dim)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(default_seed));
                let mu = random_measure(&mut rng, dim, atoms)?;
                let nu = random_measure(&mut rng, dim, target_atoms.unwrap_or(atoms))?;
                Ok(Instance {
                    name,
                    mu,
                    nu,
                    monge: None,
                })
            }
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if (1..=3).contains(&dim) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("dimension must be 1, 2 or 3, got {dim}")))
    }
}

fn random_measure(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::InvalidConfig("random family needs at least one atom".into()));
    }
    let mut atoms = Vec::with_capacity(n);
    while atoms.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
            atoms.push(p);
        }
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    DiscreteMeasure::new(&atoms, &weights)
}

/// Re-runs construction checks on a deserialised map and recomputes its Lipschitz constant.
fn rebuild_map(spec: MongeMapSpec, mu: &DiscreteMeasure) -> Result<MongeMapSpec> {
    if spec.dim != mu.dim() {
        return Err(Error::DimensionMismatch {
            left: mu.dim(),
            right: spec.dim,
        });
    }
    match spec.kind {
        MongeMapKind::Identity => Ok(MongeMapSpec::identity(spec.dim)),
        MongeMapKind::Affine { matrix, shift } => MongeMapSpec::affine(spec.dim, matrix, shift),
        MongeMapKind::Tabulated { images, potential } => MongeMapSpec::tabulated(mu, images, potential),
    }
}

/// Where the marginals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSource {
    Generator(GeneratorSpec),
    /// Measure JSON files; `nu` defaults to `mu`. Relative paths resolve against the config file.
    Files {
        mu: PathBuf,
        #[serde(default)]
        nu: Option<PathBuf>,
        #[serde(default)]
        map: Option<PathBuf>,
        #[serde(default)]
        name: Option<String>,
    },
}

impl InstanceSource {
    pub fn load(&self, base: &Path, seed: u64) -> Result<Instance> {
        match self {
            InstanceSource::Generator(g) => g.build(seed),
            InstanceSource::Files { mu, nu, map, name } => {
                let read = |p: &Path| -> Result<String> { Ok(fs::read_to_string(base.join(p))?) };
                let mu_m = DiscreteMeasure::from_json(&read(mu)?)?;
                let nu_m = match nu {
                    Some(p) => DiscreteMeasure::from_json(&read(p)?)?,
                    None => mu_m.clone(),
                };
                if mu_m.dim() != nu_m.dim() {
                    return Err(Error::DimensionMismatch {
                        left: mu_m.dim(),
                        right: nu_m.dim(),
                    });
                }
                let monge = match map {
                    Some(p) => Some(rebuild_map(serde_json::from_str(&read(p)?)?, &mu_m)?),
                    None if nu.is_none() => Some(MongeMapSpec::identity(mu_m.dim())),
                    None => None,
                };
                let name = name.clone().unwrap_or_else(|| {
                    mu.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "instance".into())
                });
                Ok(Instance {
                    name,
                    mu: mu_m,
                    nu: nu_m,
                    monge,
                })
            }
        }
    }

    /// Lattice dimension and spacing, when the instance is a generated grid.
    fn lattice(&self) -> Option<(usize, f64)> {
        match self {
            InstanceSource::Generator(GeneratorSpec::Grid { dim, spacing })
            | InstanceSource::Generator(GeneratorSpec::Affine { dim, spacing, .. }) => Some((*dim, *spacing)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSource,
    /// Positive and strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Solver settings; its `epsilon` is replaced by each entry of `eps_list`.
    #[serde(default)]
    pub solver: SolverConfig,
    /// Defaults to every bound.
    #[serde(default = "all_checks")]
    pub checks: Vec<BoundId>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn all_checks() -> Vec<BoundId> {
    BoundId::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("qotlab-out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_list.is_empty() {
            return Err(Error::InvalidConfig("eps_list is empty".into()));
        }
        if let Some(e) = self.eps_list.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "every ε must be positive and finite, got {e}"
            )));
        }
        if self.eps_list.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidConfig("eps_list must be strictly decreasing".into()));
        }
        if self.checks.is_empty() {
            return Err(Error::InvalidConfig("checks is empty".into()));
        }
        for &eps in &self.eps_list {
            SolverConfig {
                epsilon: eps,
                ..self.solver
            }
            .validate()?;
        }
        Ok(())
    }
}

/// A fit of one universal-constant observable over the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub bound_id: BoundId,
    pub instance: String,
    pub variant: String,
    pub fit: RateFit,
    /// Whether the lattice resolves the smallest ε; `None` off-lattice.
    pub resolved: Option<bool>,
    pub plot: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<BoundReport>,
    pub rates: Vec<RateSummary>,
}

impl RunOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &BoundReport> {
        self.reports.iter().filter(|r| !r.passed())
    }
}

/// Runs the sweep and returns the sorted, trend-annotated reports.
pub fn sweep(cfg: &ExperimentConfig, inst: &Instance, prep: &Prepared) -> Result<Vec<BoundReport>> {
    let per_eps = cfg
        .eps_list
        .par_iter()
        .map(|&eps| {
            let solver = SolverConfig {
                epsilon: eps,
                ..cfg.solver
            };
            let run = run_epsilon(inst, prep, &solver)?;
            run_checks(inst, prep, &run, &cfg.checks)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports: Vec<BoundReport> = per_eps.into_iter().flatten().collect();
    annotate_trends(&mut reports);
    Ok(reports)
}

/// Power-law fits of every universal-constant series with enough positive points.
pub fn fit_series(reports: &[BoundReport]) -> Vec<(BoundId, String, String, RateFit)> {
    let mut out = Vec::new();
    let mut start = 0;
    // reports are sorted by bound first, so each series is a run of one bound id
    while start < reports.len() {
        let id = reports[start].bound_id;
        let end = start + reports[start..].iter().take_while(|r| r.bound_id == id).count();
        if !id.explicit() {
            let mut keys: Vec<(String, String)> = reports[start..end]
                .iter()
                .map(|r| (r.context.instance.clone(), r.context.variant.clone()))
                .collect();
            keys.sort();
            keys.dedup();
            for (inst, variant) in keys {
                let series: Vec<&BoundReport> = reports[start..end]
                    .iter()
                    .filter(|r| r.context.instance == inst && r.context.variant == variant)
                    .filter(|r| r.context.extra.get("interior_pairs") != Some(&0.0))
                    .collect();
                let eps: Vec<f64> = series.iter().map(|r| r.context.epsilon).collect();
                let lhs: Vec<f64> = series.iter().map(|r| r.lhs).collect();
                if let Ok(fit) = fit_rate(&eps, &lhs) {
                    out.push((id, inst, variant, fit));
                }
            }
        }
        start = end;
    }
    out
}

fn plot_name(id: BoundId, variant: &str) -> String {
    if variant.is_empty() {
        format!("rate_{id:?}.svg")
    } else {
        format!("rate_{id:?}_{variant}.svg")
    }
}

/// Full pipeline: load, sweep, fit, and write every artifact into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let inst = cfg.instance.load(base, cfg.seed)?;
    let prep = prepare(&inst, &cfg.checks)?;
    let reports = sweep(cfg, &inst, &prep)?;

    let out_dir = base.join(&cfg.output_dir);
    fs::create_dir_all(&out_dir)?;
    write_jsonl(
        &reports,
        BufWriter::new(fs::File::create(out_dir.join("reports.jsonl"))?),
    )?;

    let min_eps = cfg.eps_list.last().copied().unwrap_or(1.0);
    let resolved = cfg
        .instance
        .lattice()
        .map(|(dim, h)| check_rate_floor(h, dim, min_eps).is_ok());
    let mut rates = Vec::new();
    for (bound_id, instance, variant, fit) in fit_series(&reports) {
        let plot = plot_name(bound_id, &variant);
        let title = format!("{bound_id:?} on {instance}");
        write_rate_svg(&fit, &title, BufWriter::new(fs::File::create(out_dir.join(&plot))?))?;
        rates.push(RateSummary {
            bound_id,
            instance,
            variant,
            fit,
            resolved,
            plot,
        });
    }

    let mut csv = BufWriter::new(fs::File::create(out_dir.join("rates.csv"))?);
    writeln!(
        csv,
        "bound_id,instance,variant,points,slope,intercept,r_squared,resolved"
    )?;
    for r in &rates {
        writeln!(
            csv,
            "{:?},{},{},{},{},{},{},{}",
            r.bound_id,
            r.instance,
            r.variant,
            r.fit.eps_grid.len(),
            r.fit.slope,
            r.fit.intercept,
            r.fit.r_squared,
            r.resolved.map(|b| b.to_string()).unwrap_or_default()
        )?;
    }
    csv.flush()?;
    fs::write(out_dir.join("rates.json"), serde_json::to_string_pretty(&rates)?)?;

    prep.spread
        .write_csv(BufWriter::new(fs::File::create(out_dir.join("spread.csv"))?))?;
    Ok(RunOutcome { reports, rates })
}

/// Spec file for `gen`: one family or a list of them.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GenerateSpec {
    One(GeneratorSpec),
    Many(Vec<GeneratorSpec>),
}

/// Writes `<name>_mu.json`, `<name>_nu.json` and, when known, `<name>_map.json`.
/// Returns the instance names.
pub fn generate(spec: &GenerateSpec, out_dir: &Path) -> Result<Vec<String>> {
    let specs = match spec {
        GenerateSpec::One(g) => std::slice::from_ref(g),
        GenerateSpec::Many(v) => v.as_slice(),
    };
    let instances = specs.iter().map(|g| g.build(0)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    for inst in &instances {
        fs::write(out_dir.join(format!("{}_mu.json", inst.name)), inst.mu.to_json())?;
        fs::write(out_dir.join(format!("{}_nu.json", inst.name)), inst.nu.to_json())?;
        if let Some(map) = &inst.monge {
            fs::write(
                out_dir.join(format!("{}_map.json", inst.name)),
                serde_json::to_string(map)?,
            )?;
        }
    }
    Ok(instances.into_iter().map(|i| i.name).collect())
}

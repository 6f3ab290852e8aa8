//! Monte Carlo engine: scenarios × methods × missing-data strategies over many
//! replications, summarised per cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, Method};
use crate::data::{AnalysisSpec, EffectEstimate, Scale};
use crate::datagen::{simulate_trial, ScenarioConfig};
use crate::error::{Error, Result};
use crate::gee::fit_gee;
use crate::mmi::{mmi_from_stream, ImputationConfig, ImputationStream};
use crate::rng::SeedSpec;

/// Offset separating truth-estimation streams from replication streams.
const TRUTH_SEED_OFFSET: u64 = 0x7457_5254_4831;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Cra,
    Mmi,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Cra => "cra",
            Strategy::Mmi => "mmi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationSettings {
    pub n_imputations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub prior_variance_shape: f64,
    pub prior_variance_scale: f64,
    /// Defaults to whether the scenario has an intervention-by-covariate interaction.
    pub include_interaction: Option<bool>,
}

impl Default for ImputationSettings {
    fn default() -> Self {
        let d = ImputationConfig::default();
        ImputationSettings {
            n_imputations: d.n_imputations,
            burn_in: d.burn_in,
            thinning: d.thinning,
            prior_variance_shape: d.prior_variance_shape,
            prior_variance_scale: d.prior_variance_scale,
            include_interaction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub scenario_name: String,
    pub scenario: ScenarioConfig,
    pub k_values: Vec<usize>,
    pub m: usize,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub strategies: Vec<Strategy>,
    pub imputation: ImputationSettings,
    pub ci_level: f64,
    pub master_seed: u64,
    pub truth_overrides: BTreeMap<Scale, f64>,
    pub truth_replications: usize,
    /// Analysis-model interaction; defaults to the scenario's.
    pub analysis_interaction: Option<bool>,
}

impl SimulationPlan {
    pub fn new(scenario_name: impl Into<String>, scenario: ScenarioConfig) -> Self {
        SimulationPlan {
            scenario_name: scenario_name.into(),
            k_values: vec![scenario.k],
            m: scenario.m,
            scenario,
            replications: 1000,
            methods: vec![Method::ClURd],
            strategies: vec![Strategy::Full, Strategy::Cra],
            imputation: ImputationSettings::default(),
            ci_level: 0.95,
            master_seed: 1,
            truth_overrides: BTreeMap::new(),
            truth_replications: 1000,
            analysis_interaction: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        let infeasible = |m: &str| Err(Error::PlanInfeasible(m.to_string()));
        if self.replications == 0 {
            return infeasible("replications must be at least 1");
        }
        if self.methods.is_empty() {
            return infeasible("no methods requested");
        }
        if self.strategies.is_empty() {
            return infeasible("no strategies requested");
        }
        if self.k_values.is_empty() {
            return infeasible("no cluster counts requested");
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return infeasible("ci_level must lie strictly between 0 and 1");
        }
        for &k in &self.k_values {
            self.scenario.clone().with_design(k, self.m).check()?;
        }
        if self.strategies.contains(&Strategy::Mmi) {
            self.imputation_config(SeedSpec::default()).check()?;
        }
        Ok(())
    }

    pub fn analysis_spec(&self) -> AnalysisSpec {
        let spec = AnalysisSpec::adjusted(&["x"]);
        if self.analysis_interaction.unwrap_or(self.scenario.has_interaction()) {
            spec.with_interaction()
        } else {
            spec
        }
    }

    pub fn imputation_config(&self, seed: SeedSpec) -> ImputationConfig {
        let s = &self.imputation;
        ImputationConfig {
            n_imputations: s.n_imputations,
            burn_in: s.burn_in,
            thinning: s.thinning,
            include_interaction: s.include_interaction.unwrap_or(self.scenario.has_interaction()),
            adjust_for: vec!["x".into()],
            prior_variance_shape: s.prior_variance_shape,
            prior_variance_scale: s.prior_variance_scale,
            seed,
        }
    }

    /// Streams for replication `r` at `k` clusters per arm.
    pub fn seed(&self, k: usize, r: usize) -> SeedSpec {
        SeedSpec::new(self.master_seed, ((k as u64) << 32) | r as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub k: usize,
    pub replication: usize,
    pub method: Method,
    pub strategy: Strategy,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn new(k: usize, replication: usize, method: Method, strategy: Strategy, outcome: Result<EffectEstimate>) -> Self {
        match outcome {
            Ok(e) => ReplicationRecord {
                k,
                replication,
                method,
                strategy,
                estimate: Some(e.estimate),
                se: Some(e.se),
                ci_lower: Some(e.ci_lower),
                ci_upper: Some(e.ci_upper),
                converged: e.converged,
                error: None,
            },
            Err(err) => ReplicationRecord {
                k,
                replication,
                method,
                strategy,
                estimate: None,
                se: None,
                ci_lower: None,
                ci_upper: None,
                converged: false,
                error: Some(err.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub value: f64,
    pub mc_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: String,
    pub k: usize,
    pub method: Method,
    pub strategy: Strategy,
    pub scale: Scale,
    pub truth: f64,
    pub avg_estimate: f64,
    pub avg_se: f64,
    /// Percentage of successful replications whose interval covers the truth.
    pub coverage: f64,
    pub mc_error_estimate: f64,
    pub mc_error_se: f64,
    /// Replications where the method failed; excluded from the averages.
    pub failed: usize,
    /// Replications that succeeded only after a fallback (GEE independence).
    pub fallbacks: usize,
    pub used: usize,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub cells: Vec<CellSummary>,
}

impl SimulationSummary {
    pub fn cell(&self, k: usize, method: Method, strategy: Strategy) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.k == k && c.method == method && c.strategy == strategy)
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub summary: SimulationSummary,
    pub records: Vec<ReplicationRecord>,
    /// Truth per `(k, scale)`.
    pub truths: BTreeMap<(usize, Scale), Truth>,
}

fn mean_and_error(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Population value of an effect measure for a scenario, estimated from
/// `replications` full-data trials with their own streams.
pub fn empirical_truth(
    scenario: &ScenarioConfig,
    k: usize,
    m: usize,
    replications: usize,
    scale: Scale,
    master_seed: u64,
) -> Result<Truth> {
    if replications == 0 {
        return Err(Error::PlanInfeasible("truth needs at least one replication".into()));
    }
    let config = scenario.clone().with_design(k, m);
    let seed = |r: usize| SeedSpec::new(master_seed.wrapping_add(TRUTH_SEED_OFFSET), ((k as u64) << 32) | r as u64);
    match scale {
        Scale::LogOrConditional => Ok(Truth { value: scenario.beta1, mc_error: 0.0 }),
        Scale::Rd | Scale::LogRr => {
            let probs: Vec<[f64; 2]> = (0..replications)
                .into_par_iter()
                .map(|r| simulate_trial(&config, seed(r)).map(|t| t.mean_probability))
                .collect::<Result<_>>()?;
            let p0: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let p1: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            if scale == Scale::Rd {
                let diffs: Vec<f64> = probs.iter().map(|p| p[1] - p[0]).collect();
                let (value, mc_error) = mean_and_error(&diffs);
                Ok(Truth { value, mc_error })
            } else {
                let (m0, e0) = mean_and_error(&p0);
                let (m1, e1) = mean_and_error(&p1);
                let value = (m1 / m0).ln();
                let mc_error = ((e0 / m0).powi(2) + (e1 / m1).powi(2)).sqrt();
                Ok(Truth { value, mc_error })
            }
        }
        Scale::LogOrMarginal => {
            let spec = if scenario.has_interaction() {
                AnalysisSpec::adjusted(&["x"]).with_interaction()
            } else {
                AnalysisSpec::adjusted(&["x"])
            };
            let estimates: Vec<Option<f64>> = (0..replications)
                .into_par_iter()
                .map(|r| {
                    let t = simulate_trial(&config, seed(r))?;
                    Ok(fit_gee(&t.full, &spec).ok().map(|f| f.intervention().0))
                })
                .collect::<Result<_>>()?;
            let ok: Vec<f64> = estimates.into_iter().flatten().collect();
            if ok.is_empty() {
                return Err(Error::NoConvergence { iterations: 0 });
            }
            let (value, mc_error) = mean_and_error(&ok);
            Ok(Truth { value, mc_error })
        }
    }
}

fn run_replication(plan: &SimulationPlan, k: usize, r: usize) -> Result<Vec<ReplicationRecord>> {
    let config = plan.scenario.clone().with_design(k, plan.m);
    let seed = plan.seed(k, r);
    let trial = simulate_trial(&config, seed)?;
    let spec = plan.analysis_spec();
    let mut out = Vec::new();
    for &strategy in &plan.strategies {
        match strategy {
            Strategy::Full | Strategy::Cra => {
                let data = if strategy == Strategy::Full { &trial.full } else { &trial.incomplete };
                for &method in &plan.methods {
                    let outcome = analyze(data, method, &spec, plan.ci_level);
                    out.push(ReplicationRecord::new(k, r, method, strategy, outcome));
                }
            }
            Strategy::Mmi => {
                if !trial.incomplete.has_missing() {
                    return Err(Error::PlanInfeasible(format!(
                        "multiple imputation requested but replication {r} at k={k} has no missing outcomes"
                    )));
                }
                let cfg = plan.imputation_config(seed);
                let results = ImputationStream::new(&trial.incomplete, &cfg).and_then(|mut stream| {
                    mmi_from_stream(
                        &mut stream,
                        cfg.n_imputations,
                        &trial.incomplete,
                        &plan.methods,
                        &spec,
                        plan.ci_level,
                    )
                });
                match results {
                    Ok(per_method) => {
                        for (&method, res) in plan.methods.iter().zip(per_method) {
                            out.push(ReplicationRecord::new(k, r, method, strategy, res.map(|m| m.estimate)));
                        }
                    }
                    Err(e) => {
                        for &method in &plan.methods {
                            out.push(ReplicationRecord::new(k, r, method, strategy, Err(e.clone())));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Truth for each `(k, scale)` the plan needs, honouring overrides.
pub fn plan_truths(plan: &SimulationPlan) -> Result<BTreeMap<(usize, Scale), Truth>> {
    let mut truths = BTreeMap::new();
    let scales: std::collections::BTreeSet<Scale> = plan.methods.iter().map(|m| m.scale()).collect();
    for &k in &plan.k_values {
        for &scale in &scales {
            let truth = match plan.truth_overrides.get(&scale) {
                Some(&value) => Truth { value, mc_error: 0.0 },
                None => empirical_truth(&plan.scenario, k, plan.m, plan.truth_replications, scale, plan.master_seed)?,
            };
            truths.insert((k, scale), truth);
        }
    }
    Ok(truths)
}

/// Runs every replication on the current rayon pool.
pub fn run_plan(plan: &SimulationPlan) -> Result<SimulationOutput> {
    plan.check()?;
    let truths = plan_truths(plan)?;
    let mut records = Vec::new();
    for &k in &plan.k_values {
        let per_rep: Vec<Vec<ReplicationRecord>> =
            (0..plan.replications).into_par_iter().map(|r| run_replication(plan, k, r)).collect::<Result<_>>()?;
        records.extend(per_rep.into_iter().flatten());
    }
    let summary = summarize(plan, &records, &truths);
    Ok(SimulationOutput { summary, records, truths })
}

/// Runs on a dedicated pool of `threads` workers.
pub fn run_plan_with_threads(plan: &SimulationPlan, threads: usize) -> Result<SimulationOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_plan(plan))
}

pub fn summarize(
    plan: &SimulationPlan,
    records: &[ReplicationRecord],
    truths: &BTreeMap<(usize, Scale), Truth>,
) -> SimulationSummary {
    let mut cells = Vec::new();
    for &k in &plan.k_values {
        for &method in &plan.methods {
            for &strategy in &plan.strategies {
                let scale = method.scale();
                let truth = truths[&(k, scale)].value;
                let rows: Vec<&ReplicationRecord> =
                    records.iter().filter(|r| r.k == k && r.method == method && r.strategy == strategy).collect();
                let ok: Vec<&ReplicationRecord> = rows.iter().copied().filter(|r| r.estimate.is_some()).collect();
                let est: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
                let se: Vec<f64> = ok.iter().map(|r| r.se.unwrap()).collect();
                let covered =
                    ok.iter().filter(|r| r.ci_lower.unwrap() <= truth && truth <= r.ci_upper.unwrap()).count();
                let (avg_estimate, mc_error_estimate) =
                    if est.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_error(&est) };
                let (avg_se, mc_error_se) = if se.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_error(&se) };
                let fallbacks = match method {
                    Method::GeeLogit | Method::GeeLog => ok.iter().filter(|r| !r.converged).count(),
                    _ => 0,
                };
                cells.push(CellSummary {
                    scenario: plan.scenario_name.clone(),
                    k,
                    method,
                    strategy,
                    scale,
                    truth,
                    avg_estimate,
                    avg_se,
                    coverage: if ok.is_empty() { f64::NAN } else { 100.0 * covered as f64 / ok.len() as f64 },
                    mc_error_estimate,
                    mc_error_se,
                    failed: rows.len() - ok.len(),
                    fallbacks,
                    used: ok.len(),
                    replications: rows.len(),
                });
            }
        }
    }
    SimulationSummary { cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

const HEADER: [&str; 14] = [
    "scenario",
    "k",
    "method",
    "strategy",
    "scale",
    "truth",
    "estimate",
    "se",
    "coverage",
    "mc_error_estimate",
    "mc_error_se",
    "nonconv",
    "fallback",
    "reps",
];

fn fmt_estimate(scale: Scale, v: f64) -> String {
    match scale {
        Scale::Rd => format!("{:.1}", 100.0 * v),
        _ => format!("{v:.3}"),
    }
}

fn row(c: &CellSummary) -> [String; 14] {
    [
        c.scenario.clone(),
        c.k.to_string(),
        c.method.name().to_string(),
        c.strategy.name().to_string(),
        c.scale.name().to_string(),
        fmt_estimate(c.scale, c.truth),
        fmt_estimate(c.scale, c.avg_estimate),
        format!("{:.3}", c.avg_se),
        format!("{:.1}", c.coverage),
        format!("{:.4}", c.mc_error_estimate),
        format!("{:.4}", c.mc_error_se),
        c.failed.to_string(),
        c.fallbacks.to_string(),
        c.replications.to_string(),
    ]
}

/// Renders a summary; risk differences appear as percentages.
pub fn emit_table(summary: &SimulationSummary, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER).expect("in-memory write");
            for c in &summary.cells {
                w.write_record(row(c)).expect("in-memory write");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 table");
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", HEADER.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(HEADER.len()));
            for c in &summary.cells {
                let _ = writeln!(out, "| {} |", row(c).join(" | "));
            }
        }
    }
    out
}

/// Writes one JSON object per replication and cell.
pub fn write_log<W: Write>(records: &[ReplicationRecord], mut w: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::builtin_scenario;

    fn small_plan() -> SimulationPlan {
        let mut plan = SimulationPlan::new("S1", builtin_scenario("S1").unwrap());
        plan.k_values = vec![4];
        plan.m = 15;
        plan.replications = 6;
        plan.methods = vec![Method::ClURd, Method::ClARr, Method::GeeLogit];
        plan.strategies = vec![Strategy::Full, Strategy::Cra, Strategy::Mmi];
        plan.imputation.n_imputations = 3;
        plan.imputation.burn_in = 10;
        plan.imputation.thinning = 2;
        plan.truth_replications = 20;
        plan
    }

    #[test]
    fn single_replication_has_zero_mc_error() {
        let mut plan = small_plan();
        plan.replications = 1;
        plan.methods = vec![Method::ClURd];
        plan.strategies = vec![Strategy::Full];
        let out = run_plan(&plan).unwrap();
        let cell = &out.summary.cells[0];
        let rec = &out.records[0];
        assert_eq!(cell.avg_estimate, rec.estimate.unwrap());
        assert_eq!(cell.avg_se, rec.se.unwrap());
        assert_eq!((cell.mc_error_estimate, cell.mc_error_se), (0.0, 0.0));
        let csv = emit_table(&out.summary, TableFormat::Csv);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("scenario,k,method,strategy"));
    }

    #[test]
    fn parallel_equals_serial_and_reruns_are_identical() {
        let plan = small_plan();
        let serial = run_plan_with_threads(&plan, 1).unwrap();
        let parallel = run_plan_with_threads(&plan, 3).unwrap();
        assert_eq!(serial.records, parallel.records);
        let a = emit_table(&serial.summary, TableFormat::Markdown);
        let b = emit_table(&run_plan_with_threads(&plan, 2).unwrap().summary, TableFormat::Markdown);
        assert_eq!(a, b);
        assert_eq!(serial.summary.cells.len(), 9);
        let mut log = Vec::new();
        write_log(&serial.records, &mut log).unwrap();
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), serial.records.len());
    }

    #[test]
    fn infeasible_plans_are_rejected() {
        let mut plan = small_plan();
        plan.methods.clear();
        assert!(matches!(run_plan(&plan), Err(Error::PlanInfeasible(_))));
        let mut plan = small_plan();
        plan.scenario.psi_control = -60.0;
        plan.scenario.psi_treat = -60.0;
        plan.scenario.phi_control = 0.0;
        plan.scenario.phi_treat = 0.0;
        plan.truth_overrides.insert(Scale::Rd, 0.2);
        plan.truth_overrides.insert(Scale::LogRr, 0.3);
        plan.truth_overrides.insert(Scale::LogOrMarginal, 1.3);
        assert!(matches!(run_plan(&plan), Err(Error::PlanInfeasible(_))));
    }

    #[test]
    fn overrides_replace_empirical_truth() {
        let mut plan = small_plan();
        plan.truth_overrides.insert(Scale::Rd, 0.25);
        let t = plan_truths(&plan).unwrap();
        assert_eq!(t[&(4, Scale::Rd)].value, 0.25);
        assert!(t[&(4, Scale::LogRr)].mc_error > 0.0);
    }
}

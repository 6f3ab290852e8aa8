//! TOML plan files for the simulation harness.
//!
//! ```toml
//! [scenario]
//! builtin = "S1"
//! sigma_b2 = 0.3          # any scenario field may be overridden
//!
//! [design]
//! k_values = [10, 50]
//! m = 50
//! replications = 1000
//! master_seed = 2024
//!
//! [methods]
//! methods = ["CL_U-RD", "CL_A-RD"]
//! strategies = ["full", "cra", "mmi"]
//!
//! [imputation]
//! n_imputations = 15
//!
//! [output]
//! format = "csv"
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::Method;
use crate::data::{Link, Scale};
use crate::datagen::{builtin_scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::sim::{ImputationSettings, SimulationPlan, Strategy, TableFormat};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    /// Label used in tables; defaults to the builtin name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2_control: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2_treat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_b2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_alpha2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_u2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_control: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_treat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_control: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_treat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_link: Option<Link>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    pub k_values: Vec<usize>,
    pub m: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub ci_level: f64,
    pub truth_replications: usize,
    pub truth_overrides: BTreeMap<Scale, f64>,
}

impl Default for DesignSection {
    fn default() -> Self {
        DesignSection {
            k_values: vec![50],
            m: 50,
            replications: 1000,
            master_seed: 1,
            ci_level: 0.95,
            truth_replications: 1000,
            truth_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodsSection {
    pub methods: Vec<Method>,
    pub strategies: Vec<Strategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interaction: Option<bool>,
}

impl Default for MethodsSection {
    fn default() -> Self {
        MethodsSection {
            methods: vec![Method::ClURd],
            strategies: vec![Strategy::Full, Strategy::Cra],
            interaction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub format: TableFormat,
    pub table: String,
    pub log: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { format: TableFormat::Csv, table: "summary".into(), log: "replications.jsonl".into() }
    }
}

impl OutputSection {
    /// Table file name with the extension implied by the format.
    pub fn table_file(&self) -> String {
        let ext = match self.format {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
        };
        if Path::new(&self.table).extension().is_some() {
            self.table.clone()
        } else {
            format!("{}.{ext}", self.table)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub methods: MethodsSection,
    #[serde(default)]
    pub imputation: ImputationSettings,
    #[serde(default)]
    pub output: OutputSection,
}

macro_rules! apply {
    ($cfg:ident, $sec:ident, $missing:ident, $($field:ident),*) => {
        $(
            match $sec.$field {
                Some(v) => $cfg.$field = v,
                None => $missing.push(stringify!($field)),
            }
        )*
    };
}

impl PlanFile {
    pub fn parse(text: &str) -> Result<PlanFile> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<PlanFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        PlanFile::parse(&text)
    }

    pub fn scenario(&self) -> Result<(String, ScenarioConfig)> {
        let s = &self.scenario;
        let (mut cfg, from_builtin) = match &s.builtin {
            Some(name) => (builtin_scenario(name)?, true),
            None => (builtin_scenario("S1")?, false),
        };
        let mut missing = Vec::new();
        apply!(
            cfg,
            s,
            missing,
            beta0,
            beta1,
            beta2_control,
            beta2_treat,
            sigma_b2,
            mu_x,
            sigma_alpha2,
            sigma_u2,
            psi_control,
            psi_treat,
            phi_control,
            phi_treat
        );
        if let Some(link) = s.outcome_link {
            cfg.outcome_link = link;
        }
        if !from_builtin && !missing.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "[scenario] without `builtin` must set every parameter; missing: {}",
                missing.join(", ")
            )));
        }
        let name = s.name.clone().or_else(|| s.builtin.clone()).unwrap_or_else(|| "custom".into());
        Ok((name, cfg.with_design(*self.design.k_values.first().unwrap_or(&1), self.design.m)))
    }

    pub fn to_plan(&self) -> Result<SimulationPlan> {
        let (name, scenario) = self.scenario()?;
        let d = &self.design;
        let plan = SimulationPlan {
            scenario_name: name,
            scenario,
            k_values: d.k_values.clone(),
            m: d.m,
            replications: d.replications,
            methods: self.methods.methods.clone(),
            strategies: self.methods.strategies.clone(),
            imputation: self.imputation.clone(),
            ci_level: d.ci_level,
            master_seed: d.master_seed,
            truth_overrides: d.truth_overrides.clone(),
            truth_replications: d.truth_replications,
            analysis_interaction: self.methods.interaction,
        };
        plan.check()?;
        Ok(plan)
    }

    /// Plan file with every default written out, reproducing the same run.
    pub fn resolved(&self, plan: &SimulationPlan) -> PlanFile {
        let c = &plan.scenario;
        PlanFile {
            scenario: ScenarioSection {
                builtin: None,
                name: Some(plan.scenario_name.clone()),
                beta0: Some(c.beta0),
                beta1: Some(c.beta1),
                beta2_control: Some(c.beta2_control),
                beta2_treat: Some(c.beta2_treat),
                sigma_b2: Some(c.sigma_b2),
                mu_x: Some(c.mu_x),
                sigma_alpha2: Some(c.sigma_alpha2),
                sigma_u2: Some(c.sigma_u2),
                psi_control: Some(c.psi_control),
                psi_treat: Some(c.psi_treat),
                phi_control: Some(c.phi_control),
                phi_treat: Some(c.phi_treat),
                outcome_link: Some(c.outcome_link),
            },
            design: DesignSection {
                k_values: plan.k_values.clone(),
                m: plan.m,
                replications: plan.replications,
                master_seed: plan.master_seed,
                ci_level: plan.ci_level,
                truth_replications: plan.truth_replications,
                truth_overrides: plan.truth_overrides.clone(),
            },
            methods: MethodsSection {
                methods: plan.methods.clone(),
                strategies: plan.strategies.clone(),
                interaction: Some(plan.analysis_interaction.unwrap_or(plan.scenario.has_interaction())),
            },
            imputation: ImputationSettings {
                include_interaction: Some(plan.imputation_config(Default::default()).include_interaction),
                ..plan.imputation.clone()
            },
            output: self.output.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serialises")
    }
}

//! Strategy persistence: the six strategy values plus the layout, budget,
//! objective value, toolkit version, and search seed. Feasibility is
//! revalidated on every load.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flowprune::{atomic_write, average_retention, PruningStrategy, StageLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyFile {
    pub strategy: PruningStrategy,
    pub layout: StageLayout,
    pub budget: f64,
    pub objective: f64,
    pub seed: u64,
    pub version: String,
}

impl StrategyFile {
    pub fn render(&self) -> String {
        let s = &self.strategy;
        format!(
            "version = {}\nr1 = {}\nr2 = {}\nr3 = {}\nt = {}\nalpha = {}\na = {}\n\
             layout = {},{},{}\nbudget = {}\nobjective = {}\nseed = {}\n",
            self.version,
            s.r1,
            s.r2,
            s.r3,
            s.t,
            s.alpha,
            s.a,
            self.layout.l1,
            self.layout.l2,
            self.layout.l3,
            self.budget,
            self.objective,
            self.seed
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.render().as_bytes())
            .with_context(|| format!("writing strategy file {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading strategy file {}", path.display()))?;
        let mut fields = std::collections::BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("strategy file line {}: expected `key = value`", lineno + 1);
            };
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            fields
                .get(key)
                .ok_or_else(|| anyhow::anyhow!("strategy file missing `{key}`"))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .with_context(|| format!("bad number for `{key}`"))
        };
        let layout_parts: Vec<usize> = get("layout")?
            .split(',')
            .map(|p| p.trim().parse().context("bad layout entry"))
            .collect::<Result<_>>()?;
        if layout_parts.len() != 3 {
            bail!("layout needs three comma-separated layer counts");
        }
        let file = Self {
            strategy: PruningStrategy {
                r1: num("r1")?,
                r2: num("r2")?,
                r3: num("r3")?,
                t: num("t")?,
                alpha: num("alpha")?,
                a: num("a")? as usize,
            },
            layout: StageLayout::new(layout_parts[0], layout_parts[1], layout_parts[2])?,
            budget: num("budget")?,
            objective: num("objective")?,
            seed: get("seed")?.parse().context("bad seed")?,
            version: get("version")?.clone(),
        };
        file.revalidate()?;
        Ok(file)
    }

    /// The recorded strategy must be well-formed and meet the recorded
    /// budget under the recorded layout.
    pub fn revalidate(&self) -> Result<()> {
        self.strategy.validate()?;
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            bail!("budget {} outside (0, 1]", self.budget);
        }
        let achieved = average_retention(&self.strategy, &self.layout);
        if (achieved - self.budget).abs() > 1e-9 {
            bail!(
                "strategy is infeasible: average retention {achieved} does not meet budget {}",
                self.budget
            );
        }
        Ok(())
    }
}

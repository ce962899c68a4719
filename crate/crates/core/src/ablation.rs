//! On/off grid over the guidance terms.

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::metrics::{self, MetricsConfig, MetricsReport, PropertySamples};
use crate::simulate::{self, GuidedPlanner, NamedScenario, SimConfig, SimLog};

/// Which guidance terms a row keeps at their configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub bc: bool,
    pub dv: bool,
    pub as_: bool,
    pub or: bool,
}

impl Terms {
    pub const NONE: Terms = Terms {
        bc: false,
        dv: false,
        as_: false,
        or: false,
    };
    pub const ALL: Terms = Terms {
        bc: true,
        dv: true,
        as_: true,
        or: true,
    };

    /// Zero the weights of disabled terms.
    pub fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        let pick = |on: bool, w: f64| if on { w } else { 0.0 };
        GuidanceConfig {
            omega_b: pick(self.bc, base.omega_b),
            omega_d: pick(self.dv, base.omega_d),
            omega_a: pick(self.as_, base.omega_a),
            omega_o: pick(self.or, base.omega_o),
            ..base.clone()
        }
    }

    /// Row label such as `AB+DV`, or `none`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        match (self.bc, self.or) {
            (true, true) => parts.push("AB"),
            (true, false) => parts.push("BC"),
            (false, true) => parts.push("OR"),
            _ => {}
        }
        if self.dv {
            parts.push("DV");
        }
        if self.as_ {
            parts.push("AS");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// The eight AB/DV/AS combinations, AB meaning BC and OR together.
///
/// With `split`, BC and OR vary independently (sixteen rows).
pub fn grid(split: bool) -> Vec<Terms> {
    let mut rows = Vec::new();
    if split {
        for mask in 0..16u8 {
            rows.push(Terms {
                bc: mask & 1 != 0,
                or: mask & 2 != 0,
                dv: mask & 4 != 0,
                as_: mask & 8 != 0,
            });
        }
        rows.sort_by_key(|t| t.bc as u8 + t.or as u8 + t.dv as u8 + t.as_ as u8);
    } else {
        for (ab, dv, as_) in [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, false, true),
            (false, true, true),
            (true, true, true),
        ] {
            rows.push(Terms { bc: ab, dv, as_, or: ab });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub terms: Terms,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,bc,dv,as,or,cr,ir,ss,rd,offroad_fraction,episodes,invalid_episodes\n");
        for r in &self.rows {
            let t = r.terms;
            let m = &r.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                t.bc as u8,
                t.dv as u8,
                t.as_ as u8,
                t.or as u8,
                m.cr,
                m.ir,
                m.ss,
                m.rd,
                m.offroad_fraction,
                m.episodes,
                m.invalid_episodes
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "" };
        let mut out = format!(
            "{:<10} {:>3} {:>3} {:>3} {:>3} {:>7} {:>7} {:>7} {:>7} {:>8}\n",
            "row", "BC", "DV", "AS", "OR", "CR", "IR", "SS", "RD", "offroad"
        );
        for r in &self.rows {
            let t = r.terms;
            let m = &r.report;
            out.push_str(&format!(
                "{:<10} {:>3} {:>3} {:>3} {:>3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>8.4}\n",
                r.label,
                mark(t.bc),
                mark(t.dv),
                mark(t.as_),
                mark(t.or),
                m.cr,
                m.ir,
                m.ss,
                m.rd,
                m.offroad_fraction
            ));
        }
        out
    }
}

/// Everything a row of the grid shares.
pub struct AblationSetup<'a> {
    pub model: &'a DiffusionModel,
    pub scenarios: &'a [NamedScenario],
    pub seeds: &'a [u64],
    pub guidance: &'a GuidanceConfig,
    pub sim: &'a SimConfig,
    pub metrics: &'a MetricsConfig,
    pub reference: &'a PropertySamples,
}

/// Simulate and score one row.
pub fn run_row(setup: &AblationSetup, terms: Terms) -> Result<(AblationRow, Vec<SimLog>)> {
    let planner = GuidedPlanner {
        model: setup.model,
        guidance: terms.apply(setup.guidance),
    };
    let logs = simulate::run_battery(setup.scenarios, setup.seeds, &planner, setup.sim)?;
    let report = metrics::evaluate(&logs, setup.reference, setup.metrics)
        .map_err(|e| Error::Metric(format!("row {}: {e}", terms.label())))?;
    Ok((
        AblationRow {
            label: terms.label(),
            terms,
            report,
        },
        logs,
    ))
}

/// Run every row in order; `on_row` sees each finished row before the next starts.
///
/// On failure the rows completed so far have already been passed to `on_row`.
pub fn run_ablation(
    setup: &AblationSetup,
    rows: &[Terms],
    on_row: &mut dyn FnMut(&AblationRow, &[SimLog]) -> Result<()>,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &terms in rows {
        log::info!("ablation row {}", terms.label());
        let (row, logs) = run_row(setup, terms)?;
        on_row(&row, &logs)?;
        table.rows.push(row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes_and_labels() {
        let g = grid(false);
        assert_eq!(g.len(), 8);
        let labels: Vec<String> = g.iter().map(|t| t.label()).collect();
        assert_eq!(labels, ["none", "AB", "DV", "AS", "AB+DV", "AB+AS", "DV+AS", "AB+DV+AS"]);
        assert!(g.iter().all(|t| t.bc == t.or));
        let s = grid(true);
        assert_eq!(s.len(), 16);
        assert!(s.iter().any(|t| t.label() == "BC"));
        assert!(s.iter().any(|t| t.label() == "OR+DV"));
    }

    #[test]
    fn none_row_is_inactive() {
        let base = GuidanceConfig::default();
        assert!(!Terms::NONE.apply(&base).is_active());
        assert_eq!(Terms::ALL.apply(&base), base);
    }
}

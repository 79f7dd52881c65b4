//! Measurement report documents and trace dumps.
//!
//! Reports are JSON with every time expressed as an integer number of
//! femtoseconds, which round-trips exactly and leaves headroom under the
//! picosecond claims the measurements make. The stored total is the exact
//! sum of the stored per-section values. An optional timestamp is the one
//! field allowed to differ between otherwise identical runs; it is absent
//! unless explicitly requested, so default outputs are byte-identical for a
//! fixed scenario and seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::ClockModel;
use crate::protocol::{MeasurementReport, SectionDelay, TraceDump};
use crate::scenario::CampaignKind;

/// Seconds to integer femtoseconds.
pub fn s_to_fs(seconds: f64) -> i64 {
    (seconds * 1e15).round() as i64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionDoc {
    pub id: String,
    pub kind: String,
    pub source: String,
    pub one_way_delay_fs: i64,
    pub uncertainty_fs: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockDoc {
    pub offset_ppb: f64,
    pub jitter_rms_fs: i64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetDoc {
    pub clock_term_fs: i64,
    pub temperature_term_fs: i64,
    pub fit_term_fs: i64,
    pub total_rss_fs: i64,
}

/// The serialized measurement report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub campaign: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub clock: ClockDoc,
    pub sections: Vec<SectionDoc>,
    pub total_one_way_fs: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reverse_sections: Option<Vec<SectionDoc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reverse_total_one_way_fs: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymmetry_fs: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymmetry_error_bound_fs: Option<i64>,
    pub error_budget: BudgetDoc,
}

fn section_doc(s: &SectionDelay) -> SectionDoc {
    SectionDoc {
        id: s.section_id.clone(),
        kind: match s.kind {
            crate::protocol::SectionKind::Fiber => "fiber".into(),
            crate::protocol::SectionKind::Node => "node".into(),
        },
        source: match s.source {
            crate::protocol::DelaySource::Reflective => "reflective".into(),
            crate::protocol::DelaySource::Transmissive => "transmissive".into(),
        },
        one_way_delay_fs: s_to_fs(s.one_way_delay),
        uncertainty_fs: s_to_fs(s.uncertainty),
    }
}

fn clock_doc(c: &ClockModel) -> ClockDoc {
    ClockDoc {
        offset_ppb: c.fractional_offset * 1e9,
        jitter_rms_fs: s_to_fs(c.jitter_rms_s),
        seed: c.seed,
    }
}

impl ReportDoc {
    /// Build the document for a campaign result. `fit_tol` feeds the
    /// asymmetry bound when both directions were measured.
    pub fn from_report(
        campaign: CampaignKind,
        report: &MeasurementReport,
        fit_tol_s: f64,
        generated_at: Option<String>,
    ) -> Self {
        let sections: Vec<SectionDoc> = report.sections.iter().map(section_doc).collect();
        // The stored total is the exact sum of the stored section values, so
        // the identity survives the femtosecond quantization. Budget-only
        // reports have no sections and quote the nominal total directly.
        let total_fs = if sections.is_empty() {
            s_to_fs(report.total_one_way)
        } else {
            sections.iter().map(|s| s.one_way_delay_fs).sum()
        };
        let reverse_sections = report
            .reverse_sections
            .as_ref()
            .map(|v| v.iter().map(section_doc).collect::<Vec<_>>());
        let reverse_total_fs = reverse_sections
            .as_ref()
            .map(|v| v.iter().map(|s| s.one_way_delay_fs).sum());
        let asymmetry_fs = report.asymmetry.map(s_to_fs);
        let asymmetry_error_bound_fs = report.asymmetry.map(|a| {
            s_to_fs(crate::budget::asymmetry_error_bound(
                a.abs(),
                report.clock.fractional_offset,
                fit_tol_s,
            ))
        });
        ReportDoc {
            campaign: campaign.as_str().to_string(),
            generated_at,
            clock: clock_doc(&report.clock),
            sections,
            total_one_way_fs: total_fs,
            reverse_sections,
            reverse_total_one_way_fs: reverse_total_fs,
            asymmetry_fs,
            asymmetry_error_bound_fs,
            error_budget: BudgetDoc {
                clock_term_fs: s_to_fs(report.error_budget.clock_term),
                temperature_term_fs: s_to_fs(report.error_budget.temperature_term),
                fit_term_fs: s_to_fs(report.error_budget.fit_term),
                total_rss_fs: s_to_fs(report.error_budget.total_rss),
            },
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Io(format!("report parse: {e}")))
    }

    /// Flat CSV rendering: one row per section, then total/asymmetry rows.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("record,id,kind,source,one_way_delay_fs,uncertainty_fs\n");
        for s in &self.sections {
            out.push_str(&format!(
                "section,{},{},{},{},{}\n",
                s.id, s.kind, s.source, s.one_way_delay_fs, s.uncertainty_fs
            ));
        }
        if let Some(rev) = &self.reverse_sections {
            for s in rev {
                out.push_str(&format!(
                    "reverse_section,{},{},{},{},{}\n",
                    s.id, s.kind, s.source, s.one_way_delay_fs, s.uncertainty_fs
                ));
            }
        }
        out.push_str(&format!("total,,,,{},\n", self.total_one_way_fs));
        if let Some(t) = self.reverse_total_one_way_fs {
            out.push_str(&format!("reverse_total,,,,{t},\n"));
        }
        if let Some(a) = self.asymmetry_fs {
            out.push_str(&format!("asymmetry,,,,{a},\n"));
        }
        out.push_str(&format!(
            "budget_clock,,,,{},\nbudget_temperature,,,,{},\nbudget_fit,,,,{},\nbudget_total_rss,,,,{},\n",
            self.error_budget.clock_term_fs,
            self.error_budget.temperature_term_fs,
            self.error_budget.fit_term_fs,
            self.error_budget.total_rss_fs
        ));
        out
    }
}

/// Write a trace dump as CSV for plot overlays: the raw correlation samples
/// around the fitted peak plus the fitted lobe at ten times the trace
/// resolution, tagged by series.
pub fn write_trace_dump<W: Write>(dump: &TraceDump, out: &mut W) -> Result<()> {
    writeln!(out, "series,lag_ps,value")?;
    for (lag, v) in dump.segment.lags().zip(dump.segment.values()) {
        writeln!(out, "trace,{},{}", lag * 1e12, v)?;
    }
    for (lag, v) in &dump.overlay {
        writeln!(out, "fit,{},{}", lag * 1e12, v)?;
    }
    Ok(())
}

/// File-name-safe version of a dump label.
pub fn dump_file_name(label: &str) -> String {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("trace_{safe}.csv")
}

/// Write every dump of a run into `dir`.
pub fn write_trace_dumps(dumps: &[TraceDump], dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (i, dump) in dumps.iter().enumerate() {
        let name = format!("{i:02}_{}", dump_file_name(&dump.label));
        let path = dir.join(&name);
        let mut file = std::fs::File::create(&path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        write_trace_dump(dump, &mut file)?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::ErrorBudget;
    use crate::protocol::{DelaySource, SectionKind};

    fn sample_report() -> MeasurementReport {
        let sections = vec![
            SectionDelay {
                section_id: "span-0".into(),
                kind: SectionKind::Fiber,
                one_way_delay: 50.0000001e-6,
                source: DelaySource::Reflective,
                uncertainty: 0.4e-12,
            },
            SectionDelay {
                section_id: "node-1".into(),
                kind: SectionKind::Node,
                one_way_delay: 50e-9,
                source: DelaySource::Transmissive,
                uncertainty: 0.7e-12,
            },
        ];
        let total = sections.iter().map(|s| s.one_way_delay).sum();
        MeasurementReport {
            sections,
            total_one_way: total,
            reverse_sections: None,
            reverse_total_one_way: None,
            asymmetry: None,
            clock: ClockModel::with_offset(100e-6),
            error_budget: ErrorBudget::new(5e-9, 35e-12, 1e-12),
        }
    }

    #[test]
    fn femtosecond_conversion_rounds_to_integers() {
        assert_eq!(s_to_fs(1e-15), 1);
        assert_eq!(s_to_fs(50e-9), 50_000_000);
        assert_eq!(s_to_fs(500e-6), 500_000_000_000);
        assert_eq!(s_to_fs(0.4e-15), 0);
        assert_eq!(s_to_fs(-1.5e-15), -2);
    }

    #[test]
    fn totals_are_exact_sums_of_stored_sections() {
        let doc = ReportDoc::from_report(CampaignKind::Link, &sample_report(), 5e-12, None);
        let sum: i64 = doc.sections.iter().map(|s| s.one_way_delay_fs).sum();
        assert_eq!(doc.total_one_way_fs, sum);
    }

    #[test]
    fn json_round_trips_and_is_stable() {
        let doc = ReportDoc::from_report(CampaignKind::Link, &sample_report(), 5e-12, None);
        let text = doc.to_json_string();
        let parsed = ReportDoc::from_json_str(&text).unwrap();
        assert_eq!(doc, parsed);
        assert_eq!(text, parsed.to_json_string());
        // No timestamp field unless requested.
        assert!(!text.contains("generated_at"));
        let stamped = ReportDoc::from_report(
            CampaignKind::Link,
            &sample_report(),
            5e-12,
            Some("2026-01-01T00:00:00Z".into()),
        );
        assert!(stamped.to_json_string().contains("generated_at"));
    }

    #[test]
    fn csv_lists_sections_and_totals() {
        let doc = ReportDoc::from_report(CampaignKind::Link, &sample_report(), 5e-12, None);
        let csv = doc.to_csv_string();
        assert!(csv.starts_with("record,id,kind,source"));
        assert!(csv.contains("section,span-0,fiber,reflective,50000000100,"));
        assert!(csv.contains("total,,,,"));
        assert!(csv.contains("budget_total_rss"));
    }

    #[test]
    fn asymmetry_fields_carry_the_bound() {
        let mut report = sample_report();
        report.asymmetry = Some(-100e-9);
        report.reverse_sections = Some(report.sections.clone());
        report.reverse_total_one_way = Some(report.total_one_way + 100e-9);
        let doc = ReportDoc::from_report(CampaignKind::Asymmetry, &report, 5e-12, None);
        assert_eq!(doc.asymmetry_fs, Some(-100_000_000));
        // 100 ns * 100 ppm + 2 * 5 ps = 20 ps.
        assert_eq!(doc.asymmetry_error_bound_fs, Some(20_000));
    }
}

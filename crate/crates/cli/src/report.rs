//! Report documents and their table exports.

use std::path::{Path, PathBuf};

use laspet_core::evaluation::{build_report, group_by_eval, EvalConfig, EvalReport, GroupKey, PatientRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Stage, StageExt};
use crate::manifest::write_json;

pub const DOCUMENT_SCHEMA_VERSION: u32 = 1;

/// Table files written next to a report, in this order.
pub const TABLE_FILES: [&str; 5] = [
    "summary.txt",
    "detection.csv",
    "correlations.csv",
    "ds_agreement.csv",
    "patients.csv",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub report: EvalReport,
}

/// Cohort report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    /// File name of the manifest of the run that produced this report.
    pub run_manifest: String,
    pub config_hash: String,
    pub report: EvalReport,
    #[serde(default)]
    pub groups: Vec<GroupReport>,
}

impl ReportDocument {
    /// Builds the cohort report and, when `group_by` is set, one per group.
    pub fn build(
        records: &[PatientRecord],
        cfg: &EvalConfig,
        group_by: Option<GroupKey>,
        run_manifest: String,
        config_hash: String,
    ) -> CliResult<ReportDocument> {
        let report = build_report(records, cfg).stage(Stage::Eval)?;
        let groups = match group_by {
            Some(k) => group_by_eval(records, k, cfg)
                .stage(Stage::Eval)?
                .into_iter()
                .map(|(group, report)| GroupReport { group, report })
                .collect(),
            None => Vec::new(),
        };
        Ok(ReportDocument {
            schema_version: DOCUMENT_SCHEMA_VERSION,
            run_manifest,
            config_hash,
            report,
            groups,
        })
    }

    pub fn load(path: &Path) -> CliResult<ReportDocument> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::msg(Stage::Report, format!("reading {}: {e}", path.display())))?;
        let doc: ReportDocument = serde_json::from_str(&text).stage(Stage::Report)?;
        if doc.schema_version != DOCUMENT_SCHEMA_VERSION {
            return Err(CliError::msg(
                Stage::Report,
                format!("unsupported report schema_version {}", doc.schema_version),
            ));
        }
        doc.check()?;
        Ok(doc)
    }

    /// Internal consistency of a loaded report.
    pub fn check(&self) -> CliResult<()> {
        let r = &self.report;
        if r.n_patients == 0 || r.patients.len() != r.n_patients {
            return Err(CliError::msg(
                Stage::Report,
                format!("report lists {} patients but declares {}", r.patients.len(), r.n_patients),
            ));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_json(path, self, Stage::Report)
    }

    /// Human-readable summary: the cohort block followed by one block per group.
    pub fn summary(&self) -> String {
        let mut s = self.report.summary();
        for g in &self.groups {
            s.push_str(&format!("\n[{}]\n", g.group));
            s.push_str(&g.report.summary());
        }
        s
    }

    /// Contents of [`TABLE_FILES`], in the same order.
    pub fn tables(&self) -> [String; 5] {
        let r = &self.report;
        [
            self.summary(),
            r.detection_csv(),
            r.correlations_csv(),
            r.ds_csv(),
            r.patients_csv(),
        ]
    }

    /// Writes the table files into `dir` and returns their paths.
    pub fn write_tables(&self, dir: &Path) -> CliResult<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).stage(Stage::Report)?;
        let mut out = Vec::new();
        for (name, text) in TABLE_FILES.iter().zip(self.tables()) {
            let p = dir.join(name);
            std::fs::write(&p, text).stage(Stage::Report)?;
            out.push(p);
        }
        Ok(out)
    }
}

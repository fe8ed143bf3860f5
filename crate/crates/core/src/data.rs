//! Capture-recapture dataset ingestion and panel construction.
//!
//! The dataset is a CSV with fixed columns `tag,site,sex,lm,weight` followed
//! by one column per disease; disease cells are `N`, `P` or `x`
//! (case-insensitive on input), an empty weight cell means missing. Each
//! vole's panel runs on a local grid of consecutive lunar months from its
//! first to its last capture, with explicit all-missing slots for months it
//! was not caught.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::design::CovariateRecord;
use crate::error::{Error, Result};
use crate::hmm::ObservationSymbol;

pub const FIXED_COLUMNS: [&str; 5] = ["tag", "site", "sex", "lm", "weight"];

/// One capture event, one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRecord {
    pub tag: String,
    pub site: u8,
    pub male: bool,
    pub lm: u32,
    pub weight: Option<f64>,
    /// One symbol per dataset disease column, in dataset order.
    pub observations: Vec<ObservationSymbol>,
}

/// A parsed dataset: the disease column names plus all capture rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub diseases: Vec<String>,
    pub records: Vec<CaptureRecord>,
}

/// One subject's local panel. Index 0 is the first capture month; every
/// lunar month up to the last capture has a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct VolePanel {
    pub tag: String,
    pub site: u8,
    pub male: bool,
    pub first_lm: u32,
    /// Per disease, per local time (all-missing where not captured or not
    /// ascertained).
    pub observations: Vec<Vec<ObservationSymbol>>,
    /// Whether the vole was caught at each slot.
    pub captured: Vec<bool>,
    /// Per-slot covariates; weight may be missing until imputation.
    pub covariates: Vec<CovariateRecord>,
}

impl VolePanel {
    pub fn len(&self) -> usize {
        self.captured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captured.is_empty()
    }

    pub fn lm(&self, t: usize) -> u32 {
        self.first_lm + t as u32
    }

    /// Number of uncaptured slots.
    pub fn missing_slots(&self) -> usize {
        self.captured.iter().filter(|&&c| !c).count()
    }
}

fn parse_error(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Loads and validates a dataset. Rejects duplicate (tag, lm) rows and tags
/// whose sex or site varies between captures.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .clone();
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    for (want, got) in FIXED_COLUMNS.iter().zip(&names) {
        if want != got {
            return Err(Error::Schema(format!(
                "expected column `{want}`, found `{got}`"
            )));
        }
    }
    if names.len() <= FIXED_COLUMNS.len() {
        return Err(Error::Schema("no disease columns".into()));
    }
    let diseases: Vec<String> = names[FIXED_COLUMNS.len()..].to_vec();
    for (i, d) in diseases.iter().enumerate() {
        if diseases[..i].contains(d) {
            return Err(Error::Schema(format!("duplicate disease column `{d}`")));
        }
    }

    let mut records = Vec::new();
    let mut seen: BTreeMap<(String, u32), ()> = BTreeMap::new();
    for (i, raw) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let raw = raw.map_err(|e| parse_error(row, "-", e.to_string()))?;
        if raw.len() != names.len() {
            return Err(parse_error(row, "-", "wrong number of fields"));
        }
        let tag = raw[0].to_string();
        if tag.is_empty() {
            return Err(parse_error(row, "tag", "empty tag"));
        }
        let site: u8 = raw[1]
            .parse()
            .ok()
            .filter(|s| (1..=4).contains(s))
            .ok_or_else(|| parse_error(row, "site", "expected 1..4"))?;
        let male = match &raw[2] {
            "M" | "m" => true,
            "F" | "f" => false,
            other => return Err(parse_error(row, "sex", format!("expected M/F, got `{other}`"))),
        };
        let lm: u32 = raw[3]
            .parse()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| parse_error(row, "lm", "expected positive integer"))?;
        let weight = if raw[4].is_empty() {
            None
        } else {
            let w: f64 = raw[4]
                .parse()
                .map_err(|_| parse_error(row, "weight", "expected number"))?;
            if w <= 0.0 {
                return Err(parse_error(row, "weight", "must be positive"));
            }
            Some(w)
        };
        let mut observations = Vec::with_capacity(diseases.len());
        for (j, disease) in diseases.iter().enumerate() {
            let cell = &raw[FIXED_COLUMNS.len() + j];
            let sym = ObservationSymbol::parse(cell)
                .ok_or_else(|| parse_error(row, disease, format!("expected N/P/x, got `{cell}`")))?;
            observations.push(sym);
        }
        if seen.insert((tag.clone(), lm), ()).is_some() {
            return Err(Error::DuplicateCapture { tag, lm });
        }
        records.push(CaptureRecord {
            tag,
            site,
            male,
            lm,
            weight,
            observations,
        });
    }

    validate_static_covariates(&records)?;
    Ok(Dataset { diseases, records })
}

fn validate_static_covariates(records: &[CaptureRecord]) -> Result<()> {
    let mut statics: BTreeMap<&str, (u8, bool)> = BTreeMap::new();
    for r in records {
        match statics.get(r.tag.as_str()) {
            None => {
                statics.insert(&r.tag, (r.site, r.male));
            }
            Some(&(site, male)) => {
                if site != r.site {
                    return Err(Error::InconsistentRecord {
                        tag: r.tag.clone(),
                        field: "site",
                    });
                }
                if male != r.male {
                    return Err(Error::InconsistentRecord {
                        tag: r.tag.clone(),
                        field: "sex",
                    });
                }
            }
        }
    }
    Ok(())
}

fn format_weight(w: f64) -> String {
    // Weights are recorded to the nearest 0.5 g; shortest round-trip keeps
    // files byte-stable.
    format!("{w}")
}

/// Writes a dataset in the canonical schema and symbol encoding.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{},{}", FIXED_COLUMNS.join(","), dataset.diseases.join(","))?;
    for r in &dataset.records {
        write!(
            out,
            "{},{},{},{},{}",
            r.tag,
            r.site,
            if r.male { "M" } else { "F" },
            r.lm,
            r.weight.map(format_weight).unwrap_or_default()
        )?;
        for obs in &r.observations {
            write!(out, ",{}", obs.as_str())?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Builds one panel per tag on a gap-free local lunar-month grid. Panels are
/// ordered by tag so downstream RNG substreams do not depend on row order.
pub fn build_panels(dataset: &Dataset) -> Result<Vec<VolePanel>> {
    validate_static_covariates(&dataset.records)?;
    let n_diseases = dataset.diseases.len();
    let mut by_tag: BTreeMap<&str, Vec<&CaptureRecord>> = BTreeMap::new();
    for r in &dataset.records {
        by_tag.entry(&r.tag).or_default().push(r);
    }

    let mut panels = Vec::with_capacity(by_tag.len());
    for (tag, mut records) in by_tag {
        records.sort_by_key(|r| r.lm);
        let first_lm = records[0].lm;
        let last_lm = records[records.len() - 1].lm;
        let t_len = (last_lm - first_lm + 1) as usize;
        let mut observations = vec![vec![ObservationSymbol::Missing; t_len]; n_diseases];
        let mut captured = vec![false; t_len];
        let mut weights = vec![None; t_len];
        for r in &records {
            let t = (r.lm - first_lm) as usize;
            captured[t] = true;
            weights[t] = r.weight;
            for (d, &obs) in r.observations.iter().enumerate() {
                observations[d][t] = obs;
            }
        }
        let site = records[0].site;
        let male = records[0].male;
        let covariates = (0..t_len)
            .map(|t| CovariateRecord::new(f64::from(first_lm + t as u32), weights[t], male, site))
            .collect();
        let mut panel = VolePanel {
            tag: tag.to_string(),
            site,
            male,
            first_lm,
            observations,
            captured,
            covariates,
        };
        derive_covariates(&mut panel);
        panels.push(panel);
    }
    Ok(panels)
}

/// Fills the lunar-month trend and the seasonal sin/cos columns from the
/// local grid. Idempotent; `build_panels` already applies it.
pub fn derive_covariates(panel: &mut VolePanel) {
    for (t, rec) in panel.covariates.iter_mut().enumerate() {
        let lm = f64::from(panel.first_lm + t as u32);
        let fresh = CovariateRecord::new(lm, rec.weight, panel.male, panel.site);
        *rec = fresh;
    }
}

/// Imputes missing weights once, before sampling: interior gaps by linear
/// interpolation between the two nearest observed values, leading and
/// trailing gaps by the nearest observed value.
pub fn impute_weights(panel: &mut VolePanel) -> Result<()> {
    let observed: Vec<(usize, f64)> = panel
        .covariates
        .iter()
        .enumerate()
        .filter_map(|(t, r)| r.weight.map(|w| (t, w)))
        .collect();
    if observed.is_empty() {
        return Err(Error::NoWeightObserved(panel.tag.clone()));
    }
    for t in 0..panel.covariates.len() {
        if panel.covariates[t].weight.is_some() {
            continue;
        }
        let before = observed.iter().rev().find(|(o, _)| *o < t);
        let after = observed.iter().find(|(o, _)| *o > t);
        let value = match (before, after) {
            (Some(&(t0, w0)), Some(&(t1, w1))) => {
                w0 + (w1 - w0) * ((t - t0) as f64) / ((t1 - t0) as f64)
            }
            (Some(&(_, w)), None) | (None, Some(&(_, w))) => w,
            (None, None) => unreachable!("observed is non-empty"),
        };
        panel.covariates[t].weight = Some(value);
    }
    Ok(())
}

/// What to do with voles that have no observed weight at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingWeightPolicy {
    /// Fill the whole panel with the dataset-wide mean observed weight.
    DatasetMean,
    /// Refuse the dataset.
    Reject,
}

#[derive(Debug, Clone, Copy)]
pub struct PanelOptions {
    pub missing_weight: MissingWeightPolicy,
    /// Center and scale weight by the observed mean/sd. Off by default:
    /// weight enters in grams.
    pub standardize_weight: bool,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self {
            missing_weight: MissingWeightPolicy::DatasetMean,
            standardize_weight: false,
        }
    }
}

/// Full preprocessing pipeline: panels, weight imputation and derived
/// covariates, ready for fitting.
pub fn prepare_panels(dataset: &Dataset, options: PanelOptions) -> Result<Vec<VolePanel>> {
    let mut panels = build_panels(dataset)?;
    let observed: Vec<f64> = dataset.records.iter().filter_map(|r| r.weight).collect();
    let mean = if observed.is_empty() {
        None
    } else {
        Some(observed.iter().sum::<f64>() / observed.len() as f64)
    };
    for panel in &mut panels {
        match impute_weights(panel) {
            Ok(()) => {}
            Err(Error::NoWeightObserved(tag)) => match (options.missing_weight, mean) {
                (MissingWeightPolicy::DatasetMean, Some(m)) => {
                    for rec in &mut panel.covariates {
                        rec.weight = Some(m);
                    }
                }
                _ => return Err(Error::NoWeightObserved(tag)),
            },
            Err(e) => return Err(e),
        }
    }
    if options.standardize_weight {
        let (Some(mean), true) = (mean, observed.len() > 1) else {
            return Err(Error::Config("cannot standardize weight without observed weights".into()));
        };
        let var = observed.iter().map(|w| (w - mean).powi(2)).sum::<f64>()
            / (observed.len() - 1) as f64;
        let sd = var.sqrt().max(1e-12);
        for panel in &mut panels {
            for rec in &mut panel.covariates {
                rec.weight = rec.weight.map(|w| (w - mean) / sd);
            }
        }
    }
    Ok(panels)
}

/// Frequency of uncaptured slots per vole as a function of the local span
/// (months from first to last capture).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MissingnessSummary {
    /// span -> (missing slot count -> voles)
    pub rows: BTreeMap<usize, BTreeMap<usize, u64>>,
}

impl MissingnessSummary {
    pub fn total_voles(&self) -> u64 {
        self.rows.values().flat_map(|m| m.values()).sum()
    }
}

impl fmt::Display for MissingnessSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "span  missing:0      1      2      3    >=4")?;
        for (span, counts) in &self.rows {
            let mut bins = [0u64; 5];
            for (&missing, &n) in counts {
                bins[missing.min(4)] += n;
            }
            writeln!(
                f,
                "{span:>4}  {:>9} {:>6} {:>6} {:>6} {:>6}",
                bins[0], bins[1], bins[2], bins[3], bins[4]
            )?;
        }
        Ok(())
    }
}

pub fn missingness_summary(panels: &[VolePanel]) -> MissingnessSummary {
    let mut summary = MissingnessSummary::default();
    for p in panels {
        *summary
            .rows
            .entry(p.len() - 1)
            .or_default()
            .entry(p.missing_slots())
            .or_default() += 1;
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use ObservationSymbol::{Missing, Negative, Positive};

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let file = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(file.path(), content).unwrap();
        file
    }

    const HEADER: &str = "tag,site,sex,lm,weight,dosh,grah,tay,bab,cow,ana";

    #[test]
    fn loads_well_formed_rows() {
        let file = write_temp(&format!(
            "{HEADER}\nv1,1,M,5,21.5,N,P,x,N,N,P\nv1,1,M,7,22,N,N,N,N,N,N\nv2,3,F,5,,P,P,P,P,P,P\n"
        ));
        let ds = load_dataset(file.path()).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert_eq!(ds.diseases.len(), 6);
        assert_eq!(ds.records[0].observations[2], Missing);
        assert_eq!(ds.records[2].weight, None);
    }

    #[test]
    fn lowercase_x_and_case_insensitive_symbols() {
        let file = write_temp(&format!("{HEADER}\nv1,1,M,5,20,n,p,X,N,P,x\n"));
        let ds = load_dataset(file.path()).unwrap();
        assert_eq!(
            ds.records[0].observations,
            vec![Negative, Positive, Missing, Negative, Positive, Missing]
        );
    }

    #[test]
    fn rejects_duplicates_and_inconsistent_statics() {
        let dup = write_temp(&format!("{HEADER}\nv1,1,M,5,20,N,N,N,N,N,N\nv1,1,M,5,21,N,N,N,N,N,N\n"));
        assert!(matches!(
            load_dataset(dup.path()),
            Err(Error::DuplicateCapture { .. })
        ));
        let sex = write_temp(&format!("{HEADER}\nv1,1,M,5,20,N,N,N,N,N,N\nv1,1,F,6,21,N,N,N,N,N,N\n"));
        match load_dataset(sex.path()) {
            Err(Error::InconsistentRecord { tag, field }) => {
                assert_eq!(tag, "v1");
                assert_eq!(field, "sex");
            }
            other => panic!("expected inconsistency error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_cells() {
        let bad = write_temp(&format!("{HEADER}\nv1,1,M,5,20,Q,N,N,N,N,N\n"));
        assert!(matches!(load_dataset(bad.path()), Err(Error::Parse { .. })));
        let bad_site = write_temp(&format!("{HEADER}\nv1,9,M,5,20,N,N,N,N,N,N\n"));
        assert!(matches!(load_dataset(bad_site.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn panel_grid_fills_gaps() {
        let file = write_temp(&format!(
            "{HEADER}\nv1,1,M,5,20,N,N,N,N,N,N\nv1,1,M,8,23,P,N,N,N,N,N\n"
        ));
        let ds = load_dataset(file.path()).unwrap();
        let panels = build_panels(&ds).unwrap();
        assert_eq!(panels.len(), 1);
        let p = &panels[0];
        assert_eq!(p.len(), 4);
        assert_eq!(p.captured, vec![true, false, false, true]);
        assert_eq!(p.observations[0], vec![Negative, Missing, Missing, Positive]);
        assert_eq!(p.covariates[1].lm, 6.0);
        assert_eq!(p.covariates[1].weight, None);
    }

    #[test]
    fn profile_with_interior_missing_slots() {
        // Captures at months 1,2,5,6,8 of an 8-month span: local slots 3, 4
        // and 7 are all-missing.
        let rows: Vec<String> = [(1, "N"), (2, "P"), (5, "P"), (6, "N"), (8, "P")]
            .iter()
            .map(|(lm, s)| format!("v1,2,F,{lm},20,{s},x,x,x,x,x"))
            .collect();
        let file = write_temp(&format!("{HEADER}\n{}\n", rows.join("\n")));
        let ds = load_dataset(file.path()).unwrap();
        let panels = build_panels(&ds).unwrap();
        let p = &panels[0];
        assert_eq!(p.len(), 8);
        let profile: String = p.observations[0]
            .iter()
            .map(|o| o.as_str())
            .collect::<Vec<_>>()
            .join("");
        assert_eq!(profile, "NPxxPNxP");
    }

    #[test]
    fn single_capture_panel_is_retained() {
        let file = write_temp(&format!("{HEADER}\nv1,1,M,5,20,N,N,N,N,N,N\n"));
        let panels = build_panels(&load_dataset(file.path()).unwrap()).unwrap();
        assert_eq!(panels[0].len(), 1);
    }

    #[test]
    fn weight_imputation_examples() {
        let mk = |weights: Vec<Option<f64>>| {
            let t_len = weights.len();
            VolePanel {
                tag: "v".into(),
                site: 1,
                male: false,
                first_lm: 1,
                observations: vec![vec![Missing; t_len]],
                captured: vec![true; t_len],
                covariates: weights
                    .into_iter()
                    .enumerate()
                    .map(|(t, w)| CovariateRecord::new((t + 1) as f64, w, false, 1))
                    .collect(),
            }
        };
        let weights = |p: &VolePanel| -> Vec<f64> {
            p.covariates.iter().map(|r| r.weight.unwrap()).collect()
        };

        let mut p = mk(vec![Some(20.0), None, Some(24.0)]);
        impute_weights(&mut p).unwrap();
        assert_eq!(weights(&p), vec![20.0, 22.0, 24.0]);

        let mut p = mk(vec![None, Some(20.0), Some(21.0)]);
        impute_weights(&mut p).unwrap();
        assert_eq!(weights(&p), vec![20.0, 20.0, 21.0]);

        let mut p = mk(vec![Some(20.0), None, None, Some(26.0)]);
        impute_weights(&mut p).unwrap();
        assert_eq!(weights(&p), vec![20.0, 22.0, 24.0, 26.0]);

        let mut none = mk(vec![None, None]);
        assert!(matches!(
            impute_weights(&mut none),
            Err(Error::NoWeightObserved(_))
        ));
    }

    #[test]
    fn imputation_is_idempotent() {
        let file = write_temp(&format!(
            "{HEADER}\nv1,1,M,5,20,N,N,N,N,N,N\nv1,1,M,9,26,P,N,N,N,N,N\n"
        ));
        let ds = load_dataset(file.path()).unwrap();
        let mut panels = build_panels(&ds).unwrap();
        impute_weights(&mut panels[0]).unwrap();
        let once = panels[0].clone();
        impute_weights(&mut panels[0]).unwrap();
        assert_eq!(panels[0], once);
    }

    #[test]
    fn derived_covariates_have_period_thirteen() {
        let file = write_temp(&format!("{HEADER}\nv1,1,M,13,20,N,N,N,N,N,N\n"));
        let panels = build_panels(&load_dataset(file.path()).unwrap()).unwrap();
        let rec = &panels[0].covariates[0];
        assert!(rec.sin.abs() < 1e-12);
        assert!((rec.cos - 1.0).abs() < 1e-12);
        let angle = 2.0 * std::f64::consts::PI * 6.0 / 13.0;
        let rec6 = CovariateRecord::new(6.0, None, false, 1);
        assert!((rec6.sin - angle.sin()).abs() < 1e-15);
        assert!((rec6.cos - angle.cos()).abs() < 1e-15);
    }

    #[test]
    fn round_trip_is_content_identical() {
        let file = write_temp(&format!(
            "{HEADER}\nv1,1,m,5,21.5,n,P,x,N,N,P\nv2,3,F,7,,P,p,P,P,P,x\n"
        ));
        let ds = load_dataset(file.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&ds, out.path()).unwrap();
        let reloaded = load_dataset(out.path()).unwrap();
        assert_eq!(ds, reloaded);
    }

    #[test]
    fn missingness_summary_counts_voles() {
        let file = write_temp(&format!(
            "{HEADER}\nv1,1,M,5,20,N,N,N,N,N,N\nv1,1,M,8,23,P,N,N,N,N,N\nv2,2,F,4,18,N,N,N,N,N,N\n"
        ));
        let panels = build_panels(&load_dataset(file.path()).unwrap()).unwrap();
        let summary = missingness_summary(&panels);
        assert_eq!(summary.total_voles(), 2);
        assert_eq!(summary.rows[&3][&2], 1);
        assert_eq!(summary.rows[&0][&0], 1);
    }
}

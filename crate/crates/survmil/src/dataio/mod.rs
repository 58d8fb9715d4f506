//! Cohort manifests, patch-feature files, and the synthetic-cohort generator.

mod psf;
mod synth;

pub use psf::{read_patch_features, write_patch_features};
pub use synth::{generate_synthetic_cohort, sample_log_logistic, SyntheticSpec};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One slide: feature matrix (n x d), patch-center coordinates (n x 2), and
/// the survival label. `censor == 1` means the event was observed.
#[derive(Debug, Clone)]
pub struct PatchBag {
    pub slide_id: String,
    pub features: Vec<f64>,
    pub coords: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub time: f64,
    pub censor: u8,
}

impl PatchBag {
    pub fn new(
        slide_id: impl Into<String>,
        n: usize,
        d: usize,
        features: Vec<f64>,
        coords: Vec<f64>,
        time: f64,
        censor: u8,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Contract(format!(
                "patch bag needs n >= 1 and d >= 1, got n={n}, d={d}"
            )));
        }
        if features.len() != n * d || coords.len() != n * 2 {
            return Err(Error::Contract(format!(
                "bag shape mismatch: n={n}, d={d}, {} feature values, {} coord values",
                features.len(),
                coords.len()
            )));
        }
        if !(time > 0.0) {
            return Err(Error::Contract(format!("time must be positive, got {time}")));
        }
        if censor > 1 {
            return Err(Error::Contract(format!("censor must be 0 or 1, got {censor}")));
        }
        Ok(PatchBag {
            slide_id: slide_id.into(),
            features,
            coords,
            n,
            d,
            time,
            censor,
        })
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub feature_file: PathBuf,
    pub time: f64,
    pub censor: u8,
}

/// Cohort listing; one row per slide. Slide ids are unique.
#[derive(Debug, Clone, Default)]
pub struct CohortManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "slide_id,feature_file,time_months,censor";

/// Parses and validates a manifest CSV (UTF-8, header required).
pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Manifest(format!(
                "bad header {header:?}, expected {MANIFEST_HEADER:?}"
            )))
        }
        None => return Err(Error::Manifest("empty manifest".into())),
    }
    let mut manifest = CohortManifest::default();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in lines {
        let row = lineno + 1; // 1-based, header is row 1
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Manifest(format!(
                "row {row}: expected 4 columns, got {}",
                cols.len()
            )));
        }
        let slide_id = cols[0].trim().to_string();
        if slide_id.is_empty() {
            return Err(Error::Manifest(format!("row {row}: empty slide_id")));
        }
        if !seen.insert(slide_id.clone()) {
            return Err(Error::Manifest(format!(
                "row {row}: duplicate slide_id {slide_id:?}"
            )));
        }
        let time: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::Manifest(format!("row {row}: unparseable time {:?}", cols[2])))?;
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::Manifest(format!(
                "row {row}: time must be positive, got {time}"
            )));
        }
        let censor: u8 = match cols[3].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Manifest(format!(
                    "row {row}: censor must be 0 or 1, got {other:?}"
                )))
            }
        };
        let raw = Path::new(cols[1].trim());
        let feature_file = if raw.is_absolute() {
            raw.to_path_buf()
        } else {
            dir.join(raw)
        };
        if !feature_file.exists() {
            return Err(Error::Manifest(format!(
                "row {row}: feature file {} does not exist",
                feature_file.display()
            )));
        }
        manifest.entries.push(ManifestEntry {
            slide_id,
            feature_file,
            time,
            censor,
        });
    }
    Ok(manifest)
}

/// Serializes a manifest back to CSV with paths relative to `dir` when
/// possible, so cohorts stay relocatable.
pub fn write_manifest(manifest: &CohortManifest, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for e in &manifest.entries {
        let rel = e
            .feature_file
            .strip_prefix(dir)
            .unwrap_or(&e.feature_file);
        writeln!(
            out,
            "{},{},{},{}",
            e.slide_id,
            rel.display(),
            e.time,
            e.censor
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads the bag behind one manifest entry.
pub fn load_bag(entry: &ManifestEntry) -> Result<PatchBag> {
    let (n, d, features, coords) = read_patch_features(&entry.feature_file)?;
    PatchBag::new(
        entry.slide_id.clone(),
        n,
        d,
        features,
        coords,
        entry.time,
        entry.censor,
    )
}

/// Splits a cohort into k (train, test) pairs. Test folds partition the
/// cohort with sizes differing by at most one; deterministic under `seed`.
pub fn kfold_split(
    manifest: &CohortManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<(CohortManifest, CohortManifest)>> {
    let n = manifest.entries.len();
    if k < 2 {
        return Err(Error::Contract(format!(
            "k-fold needs k >= 2 (k=1 would train on the test set), got {k}"
        )));
    }
    if k > n {
        return Err(Error::Contract(format!("k={k} exceeds cohort size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test_idx: Vec<usize> = order.iter().copied().skip(f).step_by(k).collect();
        let in_test: std::collections::BTreeSet<usize> = test_idx.iter().copied().collect();
        let test = CohortManifest {
            entries: test_idx
                .iter()
                .map(|&i| manifest.entries[i].clone())
                .collect(),
        };
        let train = CohortManifest {
            entries: (0..n)
                .filter(|i| !in_test.contains(i))
                .map(|i| manifest.entries[i].clone())
                .collect(),
        };
        folds.push((train, test));
    }
    Ok(folds)
}

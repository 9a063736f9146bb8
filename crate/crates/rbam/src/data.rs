//! Dataset manifests, train/test splitting, and the texture-rich /
//! texture-poor evaluation partition.
//!
//! A manifest is one record per line: `image_id<TAB>path<TAB>split<TAB>partition`.
//! Missing trailing fields default to `train` / `unassigned`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{bicubic_resample, GrayImage};
use crate::metrics::psnr;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Unassigned,
    Rich,
    Poor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Contract(format!("duplicate image_id {}", r.id)));
            }
        }
        Ok(Manifest { records })
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn split_to_str(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn partition_to_str(p: Partition) -> &'static str {
    match p {
        Partition::Unassigned => "unassigned",
        Partition::Rich => "rich",
        Partition::Poor => "poor",
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(Error::Contract(format!(
                "manifest line {}: expected 2-4 tab-separated fields",
                lineno + 1
            )));
        }
        let split = match fields.get(2).copied().unwrap_or("train") {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Contract(format!(
                    "manifest line {}: unknown split '{other}'",
                    lineno + 1
                )))
            }
        };
        let partition = match fields.get(3).copied().unwrap_or("unassigned") {
            "unassigned" => Partition::Unassigned,
            "rich" => Partition::Rich,
            "poor" => Partition::Poor,
            other => {
                return Err(Error::Contract(format!(
                    "manifest line {}: unknown partition '{other}'",
                    lineno + 1
                )))
            }
        };
        records.push(Record {
            id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            split,
            partition,
        });
    }
    Manifest::new(records)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    for r in &manifest.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.id,
            r.path.display(),
            split_to_str(r.split),
            partition_to_str(r.partition)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Seeded shuffle; the first `floor(fraction * n)` records become the
/// train split, the rest the test split. Record order is preserved.
pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if manifest.records.is_empty() {
        return Err(Error::Contract("cannot split an empty manifest".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "train fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let n = manifest.records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    let mut records = manifest.records.clone();
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    Manifest::new(records)
}

#[derive(Clone, Debug)]
pub struct PartitionReport {
    /// Per test image: (image_id, bicubic restoration PSNR, label).
    pub rows: Vec<(String, f64, Partition)>,
    /// Arithmetic mean of the finite per-image PSNR scores.
    pub threshold: f64,
}

impl PartitionReport {
    pub fn format(&self) -> String {
        let mut out = String::from("image_id\tbicubic_psnr_db\tpartition\n");
        for (id, p, label) in &self.rows {
            out.push_str(&format!("{id}\t{p:.4}\t{}\n", partition_to_str(*label)));
        }
        out.push_str(&format!("threshold\t{:.4}\t-\n", self.threshold));
        out
    }
}

/// Score each test image by bicubic down-then-up restoration PSNR and
/// label it `rich` iff its score is strictly below the mean score.
/// Returns the relabeled manifest and the report.
pub fn partition_by_texture<S: Scalar>(
    manifest: &Manifest,
    r: usize,
    load: &mut dyn FnMut(&Path) -> Result<GrayImage<S>>,
) -> Result<(Manifest, PartitionReport)> {
    let test_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, rec)| rec.split == Split::Test)
        .map(|(i, _)| i)
        .collect();
    if test_idx.is_empty() {
        return Err(Error::Contract("manifest has no test records".into()));
    }
    let mut scores = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let rec = &manifest.records[i];
        let hr = load(&rec.path)?;
        if hr.height() % r != 0 || hr.width() % r != 0 {
            return Err(Error::Contract(format!(
                "{}: extents {}x{} not divisible by {r}",
                rec.id,
                hr.height(),
                hr.width()
            )));
        }
        let down = bicubic_resample(&hr, hr.height() / r, hr.width() / r)?;
        let up = bicubic_resample(&down, hr.height(), hr.width())?;
        scores.push(psnr(&up, &hr)?);
    }
    let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    if finite.len() < scores.len() {
        eprintln!(
            "warning: {} image(s) with infinite PSNR excluded from the partition threshold",
            scores.len() - finite.len()
        );
    }
    if finite.is_empty() {
        return Err(Error::DegenerateInput(
            "every test image restores perfectly; no threshold can be formed".into(),
        ));
    }
    // Sum in sorted order so the threshold depends only on the score
    // multiset, not on manifest ordering.
    let mut sorted = finite.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let mut records = manifest.records.clone();
    let mut rows = Vec::with_capacity(test_idx.len());
    let mut any_rich = false;
    for (&i, &score) in test_idx.iter().zip(scores.iter()) {
        let label = if score < threshold {
            Partition::Rich
        } else {
            Partition::Poor
        };
        any_rich |= label == Partition::Rich;
        records[i].partition = label;
        rows.push((records[i].id.clone(), score, label));
    }
    if !any_rich {
        eprintln!("warning: texture-rich partition is empty (all scores at or above the mean)");
    }
    Ok((Manifest::new(records)?, PartitionReport { rows, threshold }))
}

//! Dataset handling: manifest ingestion, stratified k-fold splits,
//! limited-label subsampling, and a seeded synthetic fine-grained dataset
//! generator for desk-scale verification.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{save_png, RawImage};
use crate::rng::SeedRng;

// ── manifest ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: String,
    pub label: String,
    pub source: String,
}

/// Labeled image records with a deterministic label-index mapping (labels
/// sorted by name, indices contiguous from zero).
#[derive(Debug, Clone)]
pub struct SampleManifest {
    pub records: Vec<SampleRecord>,
    pub labels: Vec<String>,
    base_dir: PathBuf,
}

impl SampleManifest {
    pub fn from_records(records: Vec<SampleRecord>, base_dir: PathBuf) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("manifest", "no records".to_string()));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.label.is_empty() {
                return Err(Error::invalid("manifest", format!("empty label for {}", r.path)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(Error::invalid("manifest", format!("duplicate path {}", r.path)));
            }
        }
        let labels: Vec<String> = records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(SampleManifest { records, labels, base_dir })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Label index of record `i`.
    pub fn label_of(&self, i: usize) -> usize {
        self.label_index(&self.records[i].label)
            .expect("labels vector covers every record label")
    }

    /// Image path of record `i`, resolved against the manifest location.
    pub fn resolved_path(&self, i: usize) -> PathBuf {
        let p = Path::new(&self.records[i].path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Paths of records that do not exist on disk (callers may warn).
    pub fn missing_files(&self) -> Vec<String> {
        (0..self.len())
            .filter(|&i| !self.resolved_path(i).exists())
            .map(|i| self.records[i].path.clone())
            .collect()
    }

    /// Record indices per label index.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut by_label = vec![Vec::new(); self.num_labels()];
        for i in 0..self.len() {
            by_label[self.label_of(i)].push(i);
        }
        by_label
    }
}

/// Parses a `path,label,source` CSV manifest (header required, `source`
/// optional per row). Fields must not contain commas.
pub fn load_manifest(path: &Path) -> Result<SampleManifest> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::Manifest {
            path: display.clone(),
            line: 1,
            details: "empty file".to_string(),
        })?
        .1
        .trim();
    if header != "path,label,source" && header != "path,label" {
        return Err(Error::Manifest {
            path: display,
            line: 1,
            details: format!("expected header 'path,label,source', got '{header}'"),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::Manifest {
                path: display,
                line: idx + 1,
                details: format!("expected 2 or 3 fields, got {}", fields.len()),
            });
        }
        records.push(SampleRecord {
            path: fields[0].trim().to_string(),
            label: fields[1].trim().to_string(),
            source: fields.get(2).map(|s| s.trim().to_string()).unwrap_or_default(),
        });
    }
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    SampleManifest::from_records(records, base_dir).map_err(|e| match e {
        Error::Invalid { details, .. } => Error::Manifest { path: path.display().to_string(), line: 0, details },
        other => other,
    })
}

pub fn save_manifest(manifest: &SampleManifest, path: &Path) -> Result<()> {
    let mut out = String::from("path,label,source\n");
    for r in &manifest.records {
        writeln!(out, "{},{},{}", r.path, r.label, r.source).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── stratified k-fold ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Train,
    Val,
    Test,
}

/// One fold of a stratified K-fold split: every record is assigned to
/// train, val, or test.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold: usize,
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<Assignment>,
}

impl FoldSplit {
    fn indices_with(&self, which: Assignment) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_with(Assignment::Train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.indices_with(Assignment::Val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_with(Assignment::Test)
    }
}

pub const VAL_FRACTION: f64 = 0.15;

/// Stratified K-fold split: per label, a seeded shuffle followed by
/// contiguous K-way slicing for the test parts; 15% of each label's
/// remaining records become validation. The K test parts partition the
/// dataset.
pub fn stratified_kfold(manifest: &SampleManifest, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid("stratified_kfold", format!("need k >= 2, got {k}")));
    }
    let by_label = manifest.indices_by_label();
    for (label_idx, members) in by_label.iter().enumerate() {
        if members.len() < k {
            return Err(Error::invalid(
                "stratified_kfold",
                format!(
                    "label '{}' has {} samples, fewer than k={k}",
                    manifest.labels[label_idx],
                    members.len()
                ),
            ));
        }
    }
    // One shuffle per label, shared by all folds.
    let shuffled: Vec<Vec<usize>> = by_label
        .iter()
        .enumerate()
        .map(|(label_idx, members)| {
            let mut order = members.clone();
            SeedRng::for_stream(seed, "split", &[label_idx as u64]).shuffle(&mut order);
            order
        })
        .collect();

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut assignment = vec![Assignment::Train; manifest.len()];
        for order in &shuffled {
            let n = order.len();
            let base = n / k;
            let rem = n % k;
            // Fold f's test slice: the first `rem` folds get one extra.
            let start = fold * base + fold.min(rem);
            let len = base + usize::from(fold < rem);
            for &rec in &order[start..start + len] {
                assignment[rec] = Assignment::Test;
            }
            // Validation: 15% of the remaining records of this label, taken
            // from the front of the shuffled order (skipping the test slice).
            let remaining: Vec<usize> = order[..start]
                .iter()
                .chain(&order[start + len..])
                .copied()
                .collect();
            let val_count = (remaining.len() as f64 * VAL_FRACTION).round() as usize;
            for &rec in &remaining[..val_count] {
                assignment[rec] = Assignment::Val;
            }
        }
        folds.push(FoldSplit { fold, k, seed, assignment });
    }
    Ok(folds)
}

/// Writes `fold{f}_{train|val|test}.csv` next to the given directory with
/// the manifest schema plus a `split` column.
pub fn save_fold_files(manifest: &SampleManifest, split: &FoldSplit, dir: &Path) -> Result<()> {
    for (name, indices) in [
        ("train", split.train_indices()),
        ("val", split.val_indices()),
        ("test", split.test_indices()),
    ] {
        let mut out = String::from("path,label,source,split\n");
        for i in indices {
            let r = &manifest.records[i];
            writeln!(out, "{},{},{},{name}", r.path, r.label, r.source).expect("string write");
        }
        std::fs::write(dir.join(format!("fold{}_{name}.csv", split.fold)), out)?;
    }
    Ok(())
}

// ── limited-label subsampling ──────────────────────────────────────────

/// Per-label sample budget: `max(1, round(p·n))` records of each label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBudget {
    pub fraction: f64,
    /// Count per label index.
    pub counts: Vec<usize>,
}

impl LabelBudget {
    /// Budget for the given training records of a manifest.
    pub fn new(manifest: &SampleManifest, train_part: &[usize], fraction: f64) -> Result<Self> {
        if !(0.0 < fraction && fraction <= 1.0) {
            return Err(Error::invalid(
                "label_budget",
                format!("fraction {fraction} outside (0,1]"),
            ));
        }
        let mut totals = vec![0usize; manifest.num_labels()];
        for &i in train_part {
            totals[manifest.label_of(i)] += 1;
        }
        let counts = totals
            .iter()
            .map(|&n| if n == 0 { 0 } else { ((fraction * n as f64).round() as usize).max(1) })
            .collect();
        Ok(LabelBudget { fraction, counts })
    }
}

/// Seeded per-label sample without replacement from a training part.
/// For a fixed seed, subsets are nested across fractions: the budget for a
/// smaller fraction is a prefix of the same per-label shuffle.
pub fn sample_label_subset(
    manifest: &SampleManifest,
    train_part: &[usize],
    budget: &LabelBudget,
    seed: u64,
) -> Vec<usize> {
    let mut by_label = vec![Vec::new(); manifest.num_labels()];
    for &i in train_part {
        by_label[manifest.label_of(i)].push(i);
    }
    let mut subset = Vec::new();
    for (label_idx, mut members) in by_label.into_iter().enumerate() {
        SeedRng::for_stream(seed, "subset", &[label_idx as u64]).shuffle(&mut members);
        let take = budget.counts[label_idx].min(members.len());
        subset.extend_from_slice(&members[..take]);
    }
    subset.sort_unstable();
    subset
}

// ── synthetic dataset generator ────────────────────────────────────────

/// Shape family of a synthetic organism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    EllipseChain,
    SpikeStar,
    SegmentedRod,
}

/// Label-determined shape parameters before per-image jitter. Labels cycle
/// through the three families; within a family, adjacent labels differ by a
/// one-unit count offset and a small continuous offset shrunk by
/// `difficulty`.
#[derive(Debug, Clone)]
struct OrganismParams {
    family: Family,
    count: usize,
    aspect: f64,
    accent: f64,
}

fn label_params(label: usize, difficulty: f64) -> OrganismParams {
    let family = match label % 3 {
        0 => Family::EllipseChain,
        1 => Family::SpikeStar,
        _ => Family::SegmentedRod,
    };
    let k = (label / 3) as f64;
    let gap = 1.0 / difficulty.max(0.1);
    match family {
        Family::EllipseChain => OrganismParams {
            family,
            count: 3 + label / 3,
            aspect: 1.5 + 0.12 * k * gap,
            accent: 0.30,
        },
        Family::SpikeStar => OrganismParams {
            family,
            count: 5 + label / 3,
            aspect: 1.0,
            accent: 0.45 + 0.05 * k * gap,
        },
        Family::SegmentedRod => OrganismParams {
            family,
            count: 4 + label / 3,
            aspect: 0.16 + 0.02 * k * gap,
            accent: 0.25,
        },
    }
}

fn smooth_alpha(signed: f64, soft: f64) -> f64 {
    (signed / soft + 0.5).clamp(0.0, 1.0)
}

/// Renders one organism image: a light background with a gentle
/// illumination gradient and mild pixel noise, and a dark shaded organism
/// with randomized pose.
pub fn render_organism(
    label: usize,
    image_size: usize,
    difficulty: f64,
    rng: &mut SeedRng,
) -> RawImage {
    let p = label_params(label, difficulty);
    let s = image_size as f64;

    // Per-image nuisance.
    let theta = rng.range_f64(0.0, 2.0 * std::f64::consts::PI);
    let cx = s * (0.5 + rng.range_f64(-0.08, 0.08));
    let cy = s * (0.5 + rng.range_f64(-0.08, 0.08));
    let length = s * rng.range_f64(0.70, 0.92);
    let fg = rng.range_f64(0.18, 0.42);
    let aspect = p.aspect * (1.0 + 0.05 * rng.normal());
    let accent = p.accent * (1.0 + 0.05 * rng.normal());
    let phase = rng.range_f64(0.0, 2.0 * std::f64::consts::PI);

    // Background: base level, a random linear illumination gradient, and
    // mild per-pixel noise.
    let bg_level = rng.range_f64(0.82, 0.92);
    let grad_angle = rng.range_f64(0.0, 2.0 * std::f64::consts::PI);
    let grad_amp = rng.range_f64(0.02, 0.05);
    let noise_std = 1.5 / 255.0;

    let (sin_t, cos_t) = theta.sin_cos();
    let mut pixels = Vec::with_capacity(image_size * image_size);
    for py in 0..image_size {
        for px in 0..image_size {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let u = (x / s - 0.5) * grad_angle.cos() + (y / s - 0.5) * grad_angle.sin();
            let mut value = bg_level + grad_amp * u + noise_std * rng.normal();

            // Object coordinates: translate to center, rotate by −θ.
            let dx = x - cx;
            let dy = y - cy;
            let ox = dx * cos_t + dy * sin_t;
            let oy = -dx * sin_t + dy * cos_t;

            let (alpha, shade) = match p.family {
                Family::EllipseChain => {
                    let n = p.count as f64;
                    let a = length / (2.0 * n) * 1.18;
                    let b = a / aspect;
                    let mut qmin = f64::INFINITY;
                    for i in 0..p.count {
                        let cxi = -length / 2.0 + (i as f64 + 0.5) * length / n;
                        let qx = (ox - cxi) / a;
                        let qy = oy / b;
                        let q = qx * qx + qy * qy;
                        if q < qmin {
                            qmin = q;
                        }
                    }
                    let soft = 3.0 / b.max(1.0);
                    (smooth_alpha(1.0 - qmin, soft), qmin.min(1.0))
                }
                Family::SpikeStar => {
                    let r = (ox * ox + oy * oy).sqrt();
                    let phi = oy.atan2(ox);
                    let body = length * 0.30;
                    let lobe = (p.count as f64 * phi + phase).cos().max(0.0).powi(3);
                    let boundary = body * (1.0 + accent * lobe);
                    let alpha = ((boundary - r) / 1.5 + 0.5).clamp(0.0, 1.0);
                    (alpha, (r / boundary).min(1.0))
                }
                Family::SegmentedRod => {
                    let n = p.count as f64;
                    let seg_len = length / n;
                    let half = seg_len * 0.38;
                    let w_half = length * aspect / 2.0;
                    let mut dist = f64::INFINITY;
                    for i in 0..p.count {
                        let cxi = -length / 2.0 + (i as f64 + 0.5) * seg_len;
                        let ex = ((ox - cxi).abs() - half).max(0.0);
                        let d = (ex * ex + oy * oy).sqrt() - w_half;
                        if d < dist {
                            dist = d;
                        }
                    }
                    let alpha = ((-dist) / 1.5 + 0.5).clamp(0.0, 1.0);
                    (alpha, (1.0 + dist / w_half.max(1.0)).clamp(0.0, 1.0))
                }
            };

            if alpha > 0.0 {
                // Radial shading: darker core, lighter rim.
                let organism = (fg * (0.7 + 0.6 * shade)).clamp(0.0, 1.0);
                value = value * (1.0 - alpha) + organism * alpha;
            }
            pixels.push((value * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage { width: image_size, height: image_size, channels: 1, pixels }
}

/// Generates `num_labels × per_label` grayscale organism images under
/// `dir/images/` plus a `manifest.csv`, deterministic from the seed. Labels
/// differ only by small shape-parameter offsets; `difficulty` shrinks those
/// offsets (1.0 is the calibrated default).
pub fn generate_synthetic_dataset(
    num_labels: usize,
    per_label: usize,
    image_size: usize,
    difficulty: f64,
    seed: u64,
    dir: &Path,
) -> Result<SampleManifest> {
    if num_labels < 2 {
        return Err(Error::invalid(
            "generate_synthetic_dataset",
            format!("need at least 2 labels, got {num_labels}"),
        ));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut records = Vec::with_capacity(num_labels * per_label);
    for label in 0..num_labels {
        let label_name = format!("species_{label:03}");
        for idx in 0..per_label {
            let mut rng = SeedRng::for_stream(seed, "synth", &[label as u64, idx as u64]);
            let img = render_organism(label, image_size, difficulty, &mut rng);
            let file = format!("images/{label_name}_{idx:05}.png");
            save_png(&img, &dir.join(&file))?;
            records.push(SampleRecord {
                path: file,
                label: label_name.clone(),
                source: "synth".to_string(),
            });
        }
    }
    let manifest = SampleManifest::from_records(records, dir.to_path_buf())?;
    save_manifest(&manifest, &dir.join("manifest.csv"))?;
    Ok(manifest)
}

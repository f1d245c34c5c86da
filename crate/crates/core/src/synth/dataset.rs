use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_sample, overlay_annotations, ScanSample, Truth};
use crate::error::{Error, Result};
use crate::geometry::EllipseParams;
use crate::network::OrganClass;
use crate::pgm;
use crate::util::write_atomic;

pub const MANIFEST_HEADER: [&str; 6] = ["stem", "organ", "subject_id", "truth", "spacing_mm", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub stem: String,
    pub organ: OrganClass,
    pub subject_id: u32,
    pub truth: Truth,
    pub spacing_mm: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    pub n_subjects: usize,
    pub scans_per_subject: usize,
    pub size: usize,
    pub seed: u64,
    pub annotate: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            n_subjects: 50,
            scans_per_subject: 6,
            size: 64,
            seed: 0,
            annotate: false,
        }
    }
}

/// Samples plus their manifest rows, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub samples: Vec<ScanSample>,
}

impl Dataset {
    /// Generates everything in memory; nothing touches the disk.
    pub fn generate(opts: &GenOptions) -> Result<Self> {
        if opts.n_subjects < 5 {
            return Err(Error::invalid(format!(
                "need at least 5 subjects, got {}",
                opts.n_subjects
            )));
        }
        if opts.scans_per_subject == 0 {
            return Err(Error::invalid("scans_per_subject must be ≥ 1"));
        }
        let splits = split_subjects(opts.n_subjects, opts.seed);
        let mut entries = Vec::new();
        let mut samples = Vec::new();
        for subject in 0..opts.n_subjects {
            for scan in 0..opts.scans_per_subject {
                let organ = OrganClass::from_index((subject * opts.scans_per_subject + scan) % OrganClass::COUNT)?;
                let mut rng = sample_rng(opts.seed, subject as u32, scan as u32);
                let mut s = generate_sample(organ, opts.size, &mut rng)?;
                s.stem = format!("s{subject:04}_{scan:02}");
                s.subject_id = subject as u32;
                // the manifest stores 6 decimals; keep memory and disk in agreement
                s.truth = round_truth(&s.truth);
                s.mask = s.truth.rasterize(opts.size, opts.size)?;
                s.image = s.image.quantized();
                entries.push(ManifestEntry {
                    stem: s.stem.clone(),
                    organ,
                    subject_id: s.subject_id,
                    truth: s.truth,
                    spacing_mm: s.pixel_spacing_mm,
                    split: splits[subject],
                });
                samples.push(s);
            }
        }
        Ok(Dataset { entries, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&ScanSample> {
        self.entries
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.size())
    }

    /// Writes `images/`, `masks/`, optionally `annot/`, and `manifest.csv`.
    pub fn save(&self, dir: &Path, annotate: bool) -> Result<()> {
        let mut subdirs = vec!["images", "masks"];
        if annotate {
            subdirs.push("annot");
        }
        for sub in subdirs {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for s in &self.samples {
            pgm::write_image(&dir.join("images").join(format!("{}.pgm", s.stem)), &s.image)?;
            pgm::write_mask(&dir.join("masks").join(format!("{}.pgm", s.stem)), &s.mask)?;
            if annotate {
                pgm::write_image(
                    &dir.join("annot").join(format!("{}.pgm", s.stem)),
                    &overlay_annotations(s),
                )?;
            }
        }
        write_atomic(&dir.join("manifest.csv"), &write_manifest(&self.entries)?)
    }
}

/// Per-sample stream keyed by (seed, subject, scan), so generation order
/// never affects the result.
pub fn sample_rng(seed: u64, subject: u32, scan: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 32) | scan as u64);
    rng
}

/// Shuffles subjects, holds out 20% for test, then 10% of the rest for val.
pub fn split_subjects(n_subjects: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_test = (0.2 * n_subjects as f64).round() as usize;
    let n_val = (0.1 * (n_subjects - n_test) as f64).round() as usize;
    let mut splits = vec![Split::Train; n_subjects];
    for (rank, &subject) in order.iter().enumerate() {
        if rank < n_test {
            splits[subject] = Split::Test;
        } else if rank < n_test + n_val {
            splits[subject] = Split::Val;
        }
    }
    splits
}

fn round_truth(t: &Truth) -> Truth {
    let r = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted float");
    match *t {
        Truth::Ellipse(e) => Truth::Ellipse(EllipseParams {
            cx: r(e.cx),
            cy: r(e.cy),
            a: r(e.a),
            b: r(e.b),
            // keep theta in [0, π) after rounding so reloading is exact
            theta: Some(r(e.theta)).filter(|&t| t < std::f64::consts::PI).unwrap_or(0.0),
        }),
        Truth::Segment { p1, p2, width } => Truth::Segment {
            p1: (r(p1.0), r(p1.1)),
            p2: (r(p2.0), r(p2.1)),
            width: r(width),
        },
    }
}

pub fn generate_dataset(dir: &Path, opts: &GenOptions) -> Result<Dataset> {
    let d = Dataset::generate(opts)?;
    d.save(dir, opts.annotate)?;
    Ok(d)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let werr = |e: csv::Error| Error::Consistency(format!("manifest serialization: {e}"));
    w.write_record(MANIFEST_HEADER).map_err(werr)?;
    for e in entries {
        let truth = e.truth.values().map(|v| format!("{v:.6}")).join(";");
        w.write_record([
            e.stem.clone(),
            e.organ.name().to_string(),
            e.subject_id.to_string(),
            truth,
            format!("{:.6}", e.spacing_mm),
            e.split.name().to_string(),
        ])
        .map_err(werr)?;
    }
    w.into_inner()
        .map_err(|e| Error::Consistency(format!("manifest serialization: {e}")))
}

/// Parses manifest CSV text. Row numbers in errors are 1-based file lines.
pub fn parse_manifest(path: &Path, bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    let perr = |row: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| perr(row, e.to_string()))?;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(perr(
                row,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), rec.len()),
            ));
        }
        if row == 1 {
            if rec.iter().ne(MANIFEST_HEADER) {
                return Err(perr(row, format!("header must be {}", MANIFEST_HEADER.join(","))));
            }
            continue;
        }
        let organ: OrganClass = rec[1].parse().map_err(|e: Error| perr(row, e.to_string()))?;
        let subject_id: u32 = rec[2]
            .parse()
            .map_err(|_| perr(row, format!("bad subject_id {:?}", &rec[2])))?;
        let vals: Vec<f64> = rec[3]
            .split(';')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(row, format!("bad truth {:?}", &rec[3])))?;
        if vals.len() != 5 {
            return Err(perr(row, format!("truth needs 5 values, found {}", vals.len())));
        }
        let truth = if organ.is_elliptical() {
            Truth::Ellipse(
                EllipseParams::new(vals[0], vals[1], vals[2], vals[3], vals[4])
                    .map_err(|e| perr(row, e.to_string()))?,
            )
        } else {
            Truth::Segment {
                p1: (vals[0], vals[1]),
                p2: (vals[2], vals[3]),
                width: vals[4],
            }
        };
        let spacing_mm: f64 = rec[4]
            .parse()
            .ok()
            .filter(|s: &f64| *s > 0.0)
            .ok_or_else(|| perr(row, format!("bad spacing_mm {:?}", &rec[4])))?;
        let split: Split = rec[5].parse().map_err(|e: Error| perr(row, e.to_string()))?;
        entries.push(ManifestEntry {
            stem: rec[0].to_string(),
            organ,
            subject_id,
            truth,
            spacing_mm,
            split,
        });
    }
    if entries.is_empty() {
        return Err(perr(1, "manifest has no samples".into()));
    }
    Ok(entries)
}

/// Loads `manifest.csv` and the referenced images and masks. `path` may be
/// the manifest itself or the dataset directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest: PathBuf = if path.is_dir() {
        path.join("manifest.csv")
    } else {
        path.to_path_buf()
    };
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let bytes = std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let entries = parse_manifest(&manifest, &bytes)?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut size: Option<usize> = None;
    for e in &entries {
        let image = pgm::read_image(&root.join("images").join(format!("{}.pgm", e.stem)))?;
        let mask = pgm::read_mask(&root.join("masks").join(format!("{}.pgm", e.stem)))?;
        if image.width() != image.height() {
            return Err(Error::Consistency(format!(
                "{}: image is {}×{}, scans must be square",
                e.stem,
                image.width(),
                image.height()
            )));
        }
        if (mask.width(), mask.height()) != (image.width(), image.height()) {
            return Err(Error::Consistency(format!(
                "{}: mask is {}×{} but image is {}×{}",
                e.stem,
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        match size {
            None => size = Some(image.width()),
            Some(s) if s != image.width() => {
                return Err(Error::Consistency(format!(
                    "{}: image size {} differs from the dataset's {s}",
                    e.stem,
                    image.width()
                )))
            }
            _ => {}
        }
        samples.push(ScanSample {
            stem: e.stem.clone(),
            image,
            mask,
            organ: e.organ,
            truth: e.truth,
            subject_id: e.subject_id,
            pixel_spacing_mm: e.spacing_mm,
        });
    }
    Ok(Dataset { entries, samples })
}

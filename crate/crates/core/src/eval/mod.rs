//! Biometric estimation from masks, MAE / accuracy, and report rows.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{
    ellipse_circumference, femur_length_endpoints, fit_ellipse_mask, fit_min_rect, largest_component,
    mask_extreme_points, rect_perimeter, BinaryMask, Connectivity,
};
use crate::network::{Model, OrganClass};
use crate::synth::ScanSample;
use crate::tensor::Tensor;

/// Which class decides the post-processing of a predicted mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Routing {
    #[default]
    Predicted,
    TrueClass,
}

impl FromStr for Routing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(Routing::Predicted),
            "true" | "true-class" => Ok(Routing::TrueClass),
            other => Err(Error::invalid(format!("routing must be predicted|true, got {other:?}"))),
        }
    }
}

/// How femur length is read off a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FemurMethod {
    /// Long side of the minimum-area rectangle.
    #[default]
    RectLength,
    /// Perimeter of the minimum-area rectangle.
    RectPerimeter,
    /// Distance between the two farthest mask pixels.
    Endpoints,
}

impl FromStr for FemurMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect-length" => Ok(FemurMethod::RectLength),
            "rect-perimeter" => Ok(FemurMethod::RectPerimeter),
            "endpoints" => Ok(FemurMethod::Endpoints),
            other => Err(Error::invalid(format!(
                "femur method must be rect-length|rect-perimeter|endpoints, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub stem: String,
    pub organ_true: OrganClass,
    pub organ_pred: OrganClass,
    pub biometric_true_mm: f64,
    /// `None` when the mask could not be measured.
    pub biometric_pred_mm: Option<f64>,
}

impl EvalRecord {
    pub fn failed(&self) -> bool {
        self.biometric_pred_mm.is_none()
    }

    pub fn abs_error(&self) -> Option<f64> {
        self.biometric_pred_mm.map(|p| (p - self.biometric_true_mm).abs())
    }
}

/// Circumference (brain, abdomen) or length (femur) in mm.
pub fn estimate_biometric(mask: &BinaryMask, organ: OrganClass, spacing_mm: f64) -> Result<f64> {
    estimate_biometric_with(mask, organ, spacing_mm, FemurMethod::default())
}

pub fn estimate_biometric_with(
    mask: &BinaryMask,
    organ: OrganClass,
    spacing_mm: f64,
    femur: FemurMethod,
) -> Result<f64> {
    if !(spacing_mm > 0.0) {
        return Err(Error::invalid(format!("pixel spacing must be > 0, got {spacing_mm}")));
    }
    if mask.is_empty() {
        return Err(Error::Fit("empty mask".into()));
    }
    let px = if organ.is_elliptical() {
        ellipse_circumference(&fit_ellipse_mask(mask)?)?
    } else {
        let bar = largest_component(mask, Connectivity::Eight);
        match femur {
            FemurMethod::RectLength => fit_min_rect(&bar)?.length,
            FemurMethod::RectPerimeter => rect_perimeter(&fit_min_rect(&bar)?),
            FemurMethod::Endpoints => {
                let (p, q) = mask_extreme_points(&bar)?;
                femur_length_endpoints(p, q)
            }
        }
    };
    Ok(px * spacing_mm)
}

/// Mean and population standard deviation of the absolute error over
/// unfailed records.
pub fn mae(records: &[EvalRecord]) -> Result<(f64, f64)> {
    let errs: Vec<f64> = records.iter().filter_map(EvalRecord::abs_error).collect();
    if errs.is_empty() {
        return Err(Error::invalid("MAE needs at least one unfailed record"));
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Percentage of records whose predicted class is the true one.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("accuracy of an empty record set"));
    }
    let hits = records.iter().filter(|r| r.organ_pred == r.organ_true).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    /// `None` when every record of the class failed.
    pub mae_mm: Option<f64>,
    pub std_mm: Option<f64>,
    pub failed: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub lambda: f64,
    pub accuracy_pct: f64,
    /// Indexed by [`OrganClass::index`].
    pub per_class: [ClassStats; 3],
}

impl ReportRow {
    pub const CSV_HEADER: &'static str =
        "lambda,accuracy_pct,brain_mae_mm,brain_std_mm,abdomen_mae_mm,abdomen_std_mm,femur_mae_mm,femur_std_mm";

    /// Records are grouped by their true class.
    pub fn from_records(lambda: f64, records: &[EvalRecord]) -> Result<Self> {
        let accuracy_pct = accuracy(records)?;
        let per_class = OrganClass::ALL.map(|organ| {
            let rs: Vec<EvalRecord> = records.iter().filter(|r| r.organ_true == organ).cloned().collect();
            let failed = rs.iter().filter(|r| r.failed()).count();
            let (mae_mm, std_mm) = match mae(&rs) {
                Ok((m, s)) => (Some(m), Some(s)),
                Err(_) => (None, None),
            };
            ClassStats {
                mae_mm,
                std_mm,
                failed,
                count: rs.len(),
            }
        });
        Ok(ReportRow {
            lambda,
            accuracy_pct,
            per_class,
        })
    }

    pub fn class(&self, organ: OrganClass) -> &ClassStats {
        &self.per_class[organ.index()]
    }

    /// Missing values (and an unset NaN lambda) print as empty fields.
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let lambda = if self.lambda.is_nan() {
            String::new()
        } else {
            self.lambda.to_string()
        };
        let mut line = format!("{lambda},{:.6}", self.accuracy_pct);
        for c in &self.per_class {
            line.push_str(&format!(",{},{}", opt(c.mae_mm), opt(c.std_mm)));
        }
        line
    }
}

impl fmt::Display for ReportRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lambda={} accuracy={:.2}%", self.lambda, self.accuracy_pct)?;
        for organ in OrganClass::ALL {
            let c = self.class(organ);
            match (c.mae_mm, c.std_mm) {
                (Some(m), Some(s)) => write!(f, " {organ}={m:.3}±{s:.3}mm")?,
                _ => write!(f, " {organ}=n/a")?,
            }
            if c.failed > 0 {
                write!(f, " ({} failed)", c.failed)?;
            }
        }
        Ok(())
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(ReportRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub const RECORDS_HEADER: &str = "stem,organ_true,organ_pred,true_mm,pred_mm,failed";

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let pred = r.biometric_pred_mm.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.6},{pred},{}\n",
            r.stem,
            r.organ_true,
            r.organ_pred,
            r.biometric_true_mm,
            u8::from(r.failed())
        ));
    }
    out
}

/// Anything that maps `[N,1,S,S]` images to `(seg_logits, class_logits)`.
pub trait Predictor {
    fn input_size(&self) -> usize;
    fn predict_batch(&self, images: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl Predictor for Model {
    fn input_size(&self) -> usize {
        self.config().input_size
    }

    fn predict_batch(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.predict(images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub routing: Routing,
    pub femur: FemurMethod,
    pub batch_size: usize,
    /// Copied into the report row.
    pub lambda: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            routing: Routing::Predicted,
            femur: FemurMethod::RectLength,
            batch_size: 16,
            lambda: f64::NAN,
        }
    }
}

/// Eval-mode inference, mask binarization at probability 0.5 (logit 0)
/// and biometric estimation for every sample.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    samples: &[&ScanSample],
    opts: &EvalOptions,
) -> Result<(Vec<EvalRecord>, ReportRow)> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let s = model.input_size();
    if let Some(bad) = samples.iter().find(|x| x.image.width() != s || x.image.height() != s) {
        return Err(Error::shape(format!(
            "model input size {s} does not match image {} ({}×{})",
            bad.stem,
            bad.image.width(),
            bad.image.height()
        )));
    }
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * s * s);
        for x in chunk {
            data.extend_from_slice(x.image.data());
        }
        let images = Tensor::new(&[chunk.len(), 1, s, s], data)?;
        let (seg, cls) = model.predict_batch(&images)?;
        for (i, sample) in chunk.iter().enumerate() {
            let logits = &cls.data()[i * 3..i * 3 + 3];
            // first maximum wins
            let pred = (0..3).fold(0, |best, k| if logits[k] > logits[best] { k } else { best });
            let organ_pred = OrganClass::from_index(pred)?;
            let mask = BinaryMask::from_threshold(s, s, &seg.data()[i * s * s..(i + 1) * s * s], 0.0)?;
            let route = match opts.routing {
                Routing::Predicted => organ_pred,
                Routing::TrueClass => sample.organ,
            };
            let pred_mm = estimate_biometric_with(&mask, route, sample.pixel_spacing_mm, opts.femur).ok();
            records.push(EvalRecord {
                stem: sample.stem.clone(),
                organ_true: sample.organ,
                organ_pred,
                biometric_true_mm: sample.biometric_mm(),
                biometric_pred_mm: pred_mm,
            });
        }
    }
    let row = ReportRow::from_records(opts.lambda, &records)?;
    Ok((records, row))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, p: Option<f64>) -> EvalRecord {
        EvalRecord {
            stem: "x".into(),
            organ_true: OrganClass::Brain,
            organ_pred: OrganClass::Brain,
            biometric_true_mm: t,
            biometric_pred_mm: p,
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[rec(3.0, Some(3.0)), rec(5.0, Some(5.0))]).unwrap(), (0.0, 0.0));
        let (m, s) = mae(&[rec(1.0, Some(2.0)), rec(2.0, Some(4.0)), rec(9.0, None)]).unwrap();
        assert!((m - 1.5).abs() < 1e-15 && (s - 0.5).abs() < 1e-15);
        assert!(mae(&[rec(1.0, None)]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let mut rs = vec![rec(1.0, Some(1.0)); 3];
        assert_eq!(accuracy(&rs).unwrap(), 100.0);
        rs[1].organ_pred = OrganClass::Femur;
        assert!((accuracy(&rs).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn empty_mask_fails() {
        let m = BinaryMask::new(8, 8);
        for organ in OrganClass::ALL {
            assert!(matches!(estimate_biometric(&m, organ, 0.5), Err(Error::Fit(_))));
        }
    }

    #[test]
    fn report_formats() {
        let rows = [ReportRow::from_records(0.5, &[rec(1.0, Some(2.0))]).unwrap()];
        let csv = report_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap(), "0.5,100.000000,1.000000,0.000000,,,,");
        assert!(records_csv(&[rec(1.0, None)]).ends_with("x,brain,brain,1.000000,,1\n"));
        assert!("bogus".parse::<Routing>().is_err());
    }
}

//! JSON file formats shared by the library and the command-line tool:
//! complex scalars as `[re, im]` pairs, matrices as row-major
//! `{rows, cols, entries}` objects, and the solution / dual-pair /
//! fiber-sample files.
//!
//! Floats are written in serde_json's shortest-round-trip form, so every
//! f64 survives a write/read cycle bit-identically. Data matrices accept
//! plain reals as a shorthand (`3` promotes to `[3.0, 0.0]`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::de::{self, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::critsys::CriticalPoint;
use crate::duality::DualPair;
use crate::models::ModelSpec;
use crate::monodromy::SolutionSet;
use crate::numkit::{unvec_rowmajor, validate_finite, vec_rowmajor, CMat};
use crate::{Error, Result};

/// One complex scalar in file form: always written `[re, im]`, read back
/// from either `[re, im]` or a bare real.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexEntry(pub Complex64);

impl From<Complex64> for ComplexEntry {
    fn from(z: Complex64) -> Self {
        ComplexEntry(z)
    }
}

impl Serialize for ComplexEntry {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        (self.0.re, self.0.im).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ComplexEntry {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntryVisitor;

        impl<'de> Visitor<'de> for EntryVisitor {
            type Value = ComplexEntry;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a real number or a two-element [re, im] array")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                Ok(ComplexEntry(Complex64::new(v, 0.0)))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                Ok(ComplexEntry(Complex64::new(v as f64, 0.0)))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(ComplexEntry(Complex64::new(v as f64, 0.0)))
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let re: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let im: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<f64>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(ComplexEntry(Complex64::new(re, im)))
            }
        }

        deserializer.deserialize_any(EntryVisitor)
    }
}

/// Row-major matrix payload: `{rows, cols, entries: [[re, im], …]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<ComplexEntry>,
}

impl MatrixJson {
    pub fn from_cmat(a: &CMat) -> Self {
        let v = vec_rowmajor(a);
        MatrixJson {
            rows: a.nrows(),
            cols: a.ncols(),
            entries: v.iter().map(|&z| ComplexEntry(z)).collect(),
        }
    }

    pub fn to_cmat(&self) -> Result<CMat> {
        if self.entries.len() != self.rows * self.cols {
            return Err(Error::Dimension(format!(
                "matrix declares {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.entries.len()
            )));
        }
        let v = crate::numkit::CVec::from_fn(self.entries.len(), |k, _| self.entries[k].0);
        let a = unvec_rowmajor(&v, self.rows, self.cols);
        validate_finite(&a)?;
        Ok(a)
    }
}

/// One critical point in file form, matching the solution schema
/// `{P, lambda, residual, rank, loglik}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointJson {
    #[serde(rename = "P")]
    pub p: MatrixJson,
    pub lambda: ComplexEntry,
    pub residual: f64,
    pub rank: usize,
    pub loglik: ComplexEntry,
}

impl PointJson {
    pub fn from_point(point: &CriticalPoint) -> Self {
        PointJson {
            p: MatrixJson::from_cmat(&point.p),
            lambda: ComplexEntry(point.lambda),
            residual: point.residual,
            rank: point.num_rank,
            loglik: ComplexEntry(point.loglik),
        }
    }

    pub fn to_point(&self, spec: ModelSpec) -> Result<CriticalPoint> {
        let p = self.p.to_cmat()?;
        if (p.nrows(), p.ncols()) != (spec.m, spec.n) {
            return Err(Error::Dimension(format!(
                "point is {}x{}, model {spec} expects {}x{}",
                p.nrows(),
                p.ncols(),
                spec.m,
                spec.n
            )));
        }
        Ok(CriticalPoint {
            spec,
            p,
            lambda: self.lambda.0,
            residual: self.residual,
            num_rank: self.rank,
            degenerate: self.rank != spec.r,
            loglik: self.loglik.0,
        })
    }
}

/// Completeness certificate in file form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CertificateJson {
    pub loops: usize,
    pub quiet_loops: usize,
    pub trace_residual: f64,
    pub pass: bool,
}

/// Reproducibility metadata embedded in every written report: the seed and
/// tolerances the run used, and the library version that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub seed: u64,
    pub dedup_tol: f64,
    pub residual_tol: f64,
    pub version: String,
}

impl Meta {
    pub fn new(seed: u64, dedup_tol: f64, residual_tol: f64) -> Self {
        Meta {
            seed,
            dedup_tol,
            residual_tol,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Solution-set file:
/// `{model, U, points: [{P, lambda, residual, rank, loglik}], certificate, meta}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub model: ModelSpec,
    #[serde(rename = "U")]
    pub u: MatrixJson,
    pub points: Vec<PointJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

impl SolutionFile {
    pub fn from_set(set: &SolutionSet, dedup_tol: f64, residual_tol: f64) -> Self {
        SolutionFile {
            model: set.spec,
            u: MatrixJson::from_cmat(&set.u),
            points: set.points.iter().map(PointJson::from_point).collect(),
            certificate: set.certificate.as_ref().map(|c| CertificateJson {
                loops: set.loops_run,
                quiet_loops: set.loops_since_new,
                trace_residual: c.residual,
                pass: c.pass,
            }),
            meta: Some(Meta::new(set.seed, dedup_tol, residual_tol)),
        }
    }

    pub fn data(&self) -> Result<CMat> {
        let u = self.u.to_cmat()?;
        self.model.validate_data(&u)?;
        Ok(u)
    }

    pub fn to_points(&self) -> Result<Vec<CriticalPoint>> {
        self.points.iter().map(|p| p.to_point(self.model)).collect()
    }
}

/// One primal/dual pair in file form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairJson {
    pub primal: PointJson,
    pub dual: PointJson,
    /// log ℓ_U(primal) + log ℓ_U(dual); constant over a complete set up to
    /// 2πi branch choices.
    pub log_product: ComplexEntry,
    /// True when the dual's numerical rank misses the dual model's rank.
    pub degenerate: bool,
}

/// Dual-pair file: every point of a solution file pushed through the
/// duality map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualFile {
    pub model: ModelSpec,
    pub dual_model: ModelSpec,
    #[serde(rename = "U")]
    pub u: MatrixJson,
    pub pairs: Vec<PairJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

impl DualFile {
    pub fn from_pairs(
        model: ModelSpec,
        u: &CMat,
        pairs: &[DualPair],
        meta: Option<Meta>,
    ) -> Result<Self> {
        let dual_model = pairs
            .first()
            .map(|p| p.dual_spec)
            .ok_or_else(|| Error::Invalid("dualize needs at least one point".into()))?;
        Ok(DualFile {
            model,
            dual_model,
            u: MatrixJson::from_cmat(u),
            pairs: pairs
                .iter()
                .map(|pair| PairJson {
                    primal: PointJson::from_point(&pair.primal),
                    dual: PointJson::from_point(&pair.dual),
                    log_product: ComplexEntry(pair.log_product),
                    degenerate: pair.dual.degenerate,
                })
                .collect(),
            meta,
        })
    }
}

/// Fiber-sample file: a model point with data in its critical fiber.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberSampleFile {
    pub model: ModelSpec,
    #[serde(rename = "P")]
    pub p: MatrixJson,
    #[serde(rename = "U")]
    pub u: MatrixJson,
    pub lambda: ComplexEntry,
    pub residual: f64,
    pub fiber_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

/// Write any serializable report as pretty JSON (with trailing newline).
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Read any deserializable payload from a JSON file.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Read a bare data matrix (`{rows, cols, entries}`) from a JSON file.
pub fn load_matrix(path: &Path) -> Result<CMat> {
    let m: MatrixJson = load_json(path)?;
    m.to_cmat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::numkit::gaussian_cmat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn complex_entry_round_trips_bits() {
        let values = [
            c(1.0 / 3.0, -2.0 / 7.0),
            c(1e-300, 1e300),
            c(-0.0, 0.0),
            c(std::f64::consts::PI, -std::f64::consts::E),
            c(6.02214076e23, -1.602176634e-19),
        ];
        for z in values {
            let text = serde_json::to_string(&ComplexEntry(z)).unwrap();
            let back: ComplexEntry = serde_json::from_str(&text).unwrap();
            assert_eq!(back.0.re.to_bits(), z.re.to_bits(), "{text}");
            assert_eq!(back.0.im.to_bits(), z.im.to_bits(), "{text}");
        }
    }

    #[test]
    fn plain_reals_promote_on_read() {
        let m: MatrixJson =
            serde_json::from_str(r#"{"rows":1,"cols":3,"entries":[3, -1.5, [2, 4]]}"#).unwrap();
        let a = m.to_cmat().unwrap();
        assert_eq!(a[(0, 0)], c(3.0, 0.0));
        assert_eq!(a[(0, 1)], c(-1.5, 0.0));
        assert_eq!(a[(0, 2)], c(2.0, 4.0));
    }

    #[test]
    fn matrix_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = gaussian_cmat(&mut rng, 3, 4);
        let text = serde_json::to_string(&MatrixJson::from_cmat(&a)).unwrap();
        let back: MatrixJson = serde_json::from_str(&text).unwrap();
        let b = back.to_cmat().unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(a[(i, j)].re.to_bits(), b[(i, j)].re.to_bits());
                assert_eq!(a[(i, j)].im.to_bits(), b[(i, j)].im.to_bits());
            }
        }
        // Second serialization must reproduce the text exactly.
        assert_eq!(text, serde_json::to_string(&back).unwrap());
    }

    #[test]
    fn matrix_rejects_wrong_entry_count() {
        let m: MatrixJson =
            serde_json::from_str(r#"{"rows":2,"cols":2,"entries":[1, 2, 3]}"#).unwrap();
        assert!(matches!(m.to_cmat(), Err(Error::Dimension(_))));
    }

    #[test]
    fn entry_rejects_overlong_array() {
        let r: std::result::Result<ComplexEntry, _> = serde_json::from_str("[1.0, 2.0, 3.0]");
        assert!(r.is_err());
    }

    #[test]
    fn solution_file_round_trip() {
        let spec = ModelSpec::new(ModelKind::Rect, 3, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = gaussian_cmat(&mut rng, 3, 4);
        let u = gaussian_cmat(&mut rng, 3, 4);
        let point = CriticalPoint {
            spec,
            p: p.clone(),
            lambda: c(199.0, 0.25),
            residual: 3.25e-11,
            num_rank: 2,
            degenerate: false,
            loglik: c(-481.0, 14.5),
        };
        let file = SolutionFile {
            model: spec,
            u: MatrixJson::from_cmat(&u),
            points: vec![PointJson::from_point(&point)],
            certificate: Some(CertificateJson {
                loops: 12,
                quiet_loops: 8,
                trace_residual: 4.5e-12,
                pass: true,
            }),
            meta: Some(Meta::new(7, 1e-6, 1e-8)),
        };
        let text = serde_json::to_string_pretty(&file).unwrap();
        let back: SolutionFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model, spec);
        let pts = back.to_points().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].num_rank, 2);
        assert!(!pts[0].degenerate);
        assert_eq!(pts[0].lambda, point.lambda);
        assert_eq!(pts[0].loglik, point.loglik);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(pts[0].p[(i, j)], p[(i, j)]);
            }
        }
        let cert = back.certificate.unwrap();
        assert!(cert.pass);
        assert_eq!(cert.loops, 12);
        // A mismatched rank must mark the reloaded point degenerate.
        let mut low = file.clone();
        low.points[0].rank = 1;
        assert!(low.to_points().unwrap()[0].degenerate);
    }

    #[test]
    fn point_rejects_shape_mismatch() {
        let spec = ModelSpec::new(ModelKind::Rect, 3, 4, 2).unwrap();
        let wrong = ModelSpec::new(ModelKind::Rect, 4, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = CriticalPoint {
            spec,
            p: gaussian_cmat(&mut rng, 3, 4),
            lambda: c(1.0, 0.0),
            residual: 0.0,
            num_rank: 2,
            degenerate: false,
            loglik: c(0.0, 0.0),
        };
        let pj = PointJson::from_point(&point);
        assert!(matches!(pj.to_point(wrong), Err(Error::Dimension(_))));
    }
}

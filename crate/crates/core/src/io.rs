//! Profilometer height matrices, stage records, and their on-disk formats.
//!
//! A stage lives in a directory holding one plain-text matrix per location
//! (comma- or whitespace-delimited rows; row = Y index, column = X index,
//! values in µm). An optional `manifest.toml` names the files and the pixel
//! pitch:
//!
//! ```toml
//! stage_label = "P3"
//! files = ["loc01.csv", "loc02.csv"]
//! dx_um = 0.359
//! dy_um = 0.369
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decision::DecisionRecord;
use crate::error::{Error, Result};

/// Pixel pitch along X of the reference instrument, µm.
pub const DEFAULT_DX_UM: f64 = 0.359;
/// Pixel pitch along Y of the reference instrument, µm.
pub const DEFAULT_DY_UM: f64 = 0.369;
/// Largest tolerated share of non-finite pixels in one scan.
pub const MAX_DROPPED_FRACTION: f64 = 0.01;
pub const MANIFEST_NAME: &str = "manifest.toml";
const MATRIX_EXTENSIONS: [&str; 4] = ["csv", "txt", "dat", "tsv"];

/// Pixel heights of one scanned location.
///
/// `z` is row-major with `rows * cols` slots. Non-finite input pixels are
/// kept as NaN placeholders so the grid stays rectangular; they are skipped
/// by every height iterator and counted in `dropped`.
#[derive(Debug, Clone)]
pub struct HeightMatrix {
    rows: usize,
    cols: usize,
    dx: f64,
    dy: f64,
    z: Vec<f64>,
    dropped: usize,
    pub location_id: String,
    pub stage_id: String,
}

impl PartialEq for HeightMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.dx == other.dx
            && self.dy == other.dy
            && self.dropped == other.dropped
            && self.location_id == other.location_id
            && self.stage_id == other.stage_id
            && self
                .z
                .iter()
                .zip(&other.z)
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl HeightMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        dx: f64,
        dy: f64,
        z: Vec<f64>,
        location_id: impl Into<String>,
        stage_id: impl Into<String>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("height matrix must have at least one row and column"));
        }
        if z.len() != rows * cols {
            return Err(Error::invalid(format!(
                "height matrix of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                z.len()
            )));
        }
        if !(dx.is_finite() && dx > 0.0 && dy.is_finite() && dy > 0.0) {
            return Err(Error::invalid(format!("pixel pitch must be positive, got ({dx}, {dy})")));
        }
        let mut z = z;
        let mut dropped = 0;
        for v in z.iter_mut() {
            if !v.is_finite() {
                *v = f64::NAN;
                dropped += 1;
            }
        }
        if dropped == z.len() {
            return Err(Error::invalid("height matrix has no finite pixels"));
        }
        Ok(HeightMatrix {
            rows,
            cols,
            dx,
            dy,
            z,
            dropped,
            location_id: location_id.into(),
            stage_id: stage_id.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Number of non-finite pixels removed by cleaning.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Number of usable (finite) pixels.
    pub fn len(&self) -> usize {
        self.z.len() - self.dropped
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw row-major storage, NaN where a pixel was dropped.
    pub fn raw(&self) -> &[f64] {
        &self.z
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        if row >= self.rows || col >= self.cols {
            return None;
        }
        let v = self.z[row * self.cols + col];
        v.is_finite().then_some(v)
    }

    /// Finite heights in row-major order.
    pub fn heights(&self) -> impl Iterator<Item = f64> + '_ {
        self.z.iter().copied().filter(|v| v.is_finite())
    }

    /// `(row, col, X, Y, z)` for every finite pixel; X = col·dx, Y = row·dy.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize, f64, f64, f64)> + '_ {
        self.z.iter().enumerate().filter(|(_, v)| v.is_finite()).map(move |(i, &v)| {
            let (r, c) = (i / self.cols, i % self.cols);
            (r, c, c as f64 * self.dx, r as f64 * self.dy, v)
        })
    }

    /// Same geometry and ids, new heights computed per finite pixel.
    pub(crate) fn map_points(&self, mut f: impl FnMut(usize, usize, f64, f64, f64) -> f64) -> Self {
        let mut z = self.z.clone();
        for (r, c, x, y, v) in self.points() {
            z[r * self.cols + c] = f(r, c, x, y, v);
        }
        HeightMatrix { z, ..self.clone() }
    }
}

/// One stage's measurements across locations.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage_id: String,
    pub stage_label: String,
    pub locations: Vec<HeightMatrix>,
    pub timestamp: Option<String>,
}

impl StageRecord {
    /// Builds a record, ordering locations by `location_id`.
    pub fn new(
        stage_id: impl Into<String>,
        stage_label: impl Into<String>,
        mut locations: Vec<HeightMatrix>,
        timestamp: Option<String>,
    ) -> Result<Self> {
        let stage_id = stage_id.into();
        if locations.len() < 2 {
            return Err(Error::InsufficientLocations {
                needed: 2,
                found: locations.len(),
            });
        }
        if let Some(m) = locations.iter().find(|m| m.stage_id != stage_id) {
            return Err(Error::invalid(format!(
                "location {} belongs to stage {}, expected {stage_id}",
                m.location_id, m.stage_id
            )));
        }
        locations.sort_by(|a, b| a.location_id.cmp(&b.location_id));
        Ok(StageRecord {
            stage_id,
            stage_label: stage_label.into(),
            locations,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    stage_label: Option<String>,
    stage_id: Option<String>,
    #[serde(default)]
    files: Vec<String>,
    dx_um: Option<f64>,
    dy_um: Option<f64>,
    timestamp: Option<String>,
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Parses a rectangular numeric matrix. Blank lines and `#` comments are skipped.
pub fn parse_matrix(text: &str, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let malformed = |reason: String| Error::MalformedMatrix {
        path: path.to_path_buf(),
        reason,
    };
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = values.len();
        for tok in line.split(|c: char| c == ',' || c == ';' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| malformed(format!("line {}: non-numeric value {tok:?}", lineno + 1)))?;
            values.push(v);
        }
        let width = values.len() - before;
        if rows == 0 {
            cols = width;
        } else if width != cols {
            return Err(malformed(format!(
                "line {}: row has {width} values, expected {cols}",
                lineno + 1
            )));
        }
        rows += 1;
    }
    if rows == 0 || cols == 0 {
        return Err(malformed("no data rows".into()));
    }
    Ok((rows, cols, values))
}

/// Reads one location file and applies the cleaning policy.
pub fn load_matrix(
    path: &Path,
    dx: f64,
    dy: f64,
    location_id: &str,
    stage_id: &str,
) -> Result<HeightMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols, z) = parse_matrix(&text, path)?;
    let m = HeightMatrix::new(rows, cols, dx, dy, z, location_id, stage_id)?;
    let total = rows * cols;
    if m.dropped() as f64 > MAX_DROPPED_FRACTION * total as f64 {
        return Err(Error::TooManyDropped {
            location: location_id.to_string(),
            dropped: m.dropped(),
            total,
        });
    }
    Ok(m)
}

fn location_id_of(file: &Path) -> String {
    file.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string_lossy().into_owned())
}

fn scan_matrix_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_matrix = p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| MATRIX_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_matrix {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a stage from a directory (with or without `manifest.toml`) or from
/// a manifest file. `stage_label` overrides the manifest's label when given.
pub fn load_stage(path: &Path, stage_label: Option<&str>) -> Result<StageRecord> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let (base, manifest) = if path.is_dir() {
        let mpath = path.join(MANIFEST_NAME);
        let manifest = if mpath.is_file() {
            Some(read_manifest(&mpath)?)
        } else {
            None
        };
        (path.to_path_buf(), manifest)
    } else {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (base, Some(read_manifest(path)?))
    };

    let default_label = || {
        path.file_stem()
            .or_else(|| path.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "stage".to_string())
    };

    let (files, label, stage_id, dx, dy, timestamp) = match manifest {
        Some(m) => {
            let files: Vec<PathBuf> = if m.files.is_empty() {
                scan_matrix_files(&base)?
            } else {
                m.files.iter().map(|f| base.join(f)).collect()
            };
            let label = stage_label
                .map(str::to_string)
                .or(m.stage_label)
                .unwrap_or_else(default_label);
            let id = m.stage_id.unwrap_or_else(|| label.clone());
            (
                files,
                label,
                id,
                m.dx_um.unwrap_or(DEFAULT_DX_UM),
                m.dy_um.unwrap_or(DEFAULT_DY_UM),
                m.timestamp,
            )
        }
        None => {
            let files = scan_matrix_files(&base)?;
            let label = stage_label.map(str::to_string).unwrap_or_else(default_label);
            (files, label.clone(), label, DEFAULT_DX_UM, DEFAULT_DY_UM, None)
        }
    };

    if files.len() < 2 {
        return Err(Error::InsufficientLocations {
            needed: 2,
            found: files.len(),
        });
    }
    let locations = files
        .iter()
        .map(|f| {
            if !f.exists() {
                return Err(Error::MissingPath(f.clone()));
            }
            load_matrix(f, dx, dy, &location_id_of(f), &stage_id)
        })
        .collect::<Result<Vec<_>>>()?;
    StageRecord::new(stage_id, label, locations, timestamp)
}

/// Writes one matrix as comma-separated rows; dropped pixels become `NaN`.
pub fn write_matrix(m: &HeightMatrix, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(m.raw().len() * 12);
    for row in m.raw().chunks(m.cols()) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a stage as a directory of matrices plus `manifest.toml`.
///
/// All locations must share one pixel pitch.
pub fn save_stage(rec: &StageRecord, dir: &Path) -> Result<()> {
    let first = &rec.locations[0];
    if rec
        .locations
        .iter()
        .any(|m| m.dx() != first.dx() || m.dy() != first.dy())
    {
        return Err(Error::invalid("locations of one stage must share a pixel pitch"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for m in &rec.locations {
        let name = format!("{}.csv", m.location_id);
        write_matrix(m, &dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        stage_label: Some(rec.stage_label.clone()),
        stage_id: Some(rec.stage_id.clone()),
        files,
        dx_um: Some(first.dx()),
        dy_um: Some(first.dy()),
        timestamp: rec.timestamp.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::MalformedManifest {
        path: dir.join(MANIFEST_NAME),
        reason: e.to_string(),
    })?;
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Serializes a decision record to its JSON report form.
pub fn report_to_string(record: &DecisionRecord) -> String {
    let mut s = serde_json::to_string_pretty(record).expect("decision record serializes");
    s.push('\n');
    s
}

pub fn save_report(record: &DecisionRecord, path: &Path) -> Result<()> {
    fs::write(path, report_to_string(record)).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<DecisionRecord> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedReport {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn grid_text(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> String {
        let mut s = String::new();
        for r in 0..rows {
            let row: Vec<String> = (0..cols).map(|c| f(r, c).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    #[test]
    fn parses_mixed_delimiters() {
        let (r, c, z) = parse_matrix("# header\n1, 2 3\n\n4\t5,6\n", Path::new("x")).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(z, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn rejects_ragged_and_non_numeric() {
        assert!(matches!(
            parse_matrix("1 2\n3\n", Path::new("x")),
            Err(Error::MalformedMatrix { .. })
        ));
        assert!(matches!(
            parse_matrix("1 abc\n", Path::new("x")),
            Err(Error::MalformedMatrix { .. })
        ));
        assert!(parse_matrix("\n# only comments\n", Path::new("x")).is_err());
    }

    #[test]
    fn full_size_scan_with_nans() {
        let dir = tempfile::tempdir().unwrap();
        let nan_cells = [(0, 0), (10, 20), (100, 300), (479, 639), (200, 5)];
        let text = grid_text(480, 640, |r, c| {
            if nan_cells.contains(&(r, c)) {
                f64::NAN
            } else {
                ((r * 640 + c) % 97) as f64 * 0.01
            }
        });
        for i in 0..9 {
            write(dir.path(), &format!("loc{i}.csv"), &text);
        }
        let rec = load_stage(dir.path(), Some("P3")).unwrap();
        assert_eq!(rec.locations.len(), 9);
        assert_eq!(rec.stage_label, "P3");
        for m in &rec.locations {
            assert_eq!(m.rows() * m.cols(), 307_200);
            assert_eq!(m.len(), 307_195);
            assert_eq!(m.dropped(), 5);
            assert_eq!(m.heights().count(), 307_195);
            assert_eq!((m.dx(), m.dy()), (DEFAULT_DX_UM, DEFAULT_DY_UM));
        }
    }

    #[test]
    fn too_many_dropped_pixels_fail() {
        let dir = tempfile::tempdir().unwrap();
        let text = grid_text(10, 10, |r, c| if r == 0 && c < 2 { f64::NAN } else { 1.0 });
        write(dir.path(), "a.csv", &text);
        write(dir.path(), "b.csv", &text);
        assert!(matches!(
            load_stage(dir.path(), None),
            Err(Error::TooManyDropped { dropped: 2, total: 100, .. })
        ));
    }

    #[test]
    fn single_location_is_insufficient() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "only.csv", "1 2\n3 4\n");
        let err = load_stage(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("insufficient locations"), "{err}");
    }

    #[test]
    fn missing_path_errors() {
        assert!(matches!(
            load_stage(Path::new("/definitely/not/here"), None),
            Err(Error::MissingPath(_))
        ));
    }

    #[test]
    fn manifest_sets_pitch_and_files() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b.txt", "1 2\n3 4\n");
        write(dir.path(), "a.txt", "5 6\n7 8\n");
        write(dir.path(), "ignored.csv", "9 9\n9 9\n");
        write(
            dir.path(),
            MANIFEST_NAME,
            "stage_label = \"L7\"\nfiles = [\"b.txt\", \"a.txt\"]\ndx_um = 0.5\ndy_um = 0.25\n",
        );
        let rec = load_stage(dir.path(), None).unwrap();
        assert_eq!(rec.stage_label, "L7");
        assert_eq!(rec.locations.len(), 2);
        assert_eq!(rec.locations[0].location_id, "a");
        assert_eq!(rec.locations[0].dx(), 0.5);
        assert_eq!(rec.locations[1].get(1, 0), Some(3.0));

        let via_file = load_stage(&dir.path().join(MANIFEST_NAME), None).unwrap();
        assert_eq!(via_file, rec);
    }

    #[test]
    fn stage_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |id: &str, k: f64| {
            let z: Vec<f64> = (0..120)
                .map(|i| if i == 5 { f64::NAN } else { (i as f64 * 0.1 + k).sin() * 1e-3 })
                .collect();
            HeightMatrix::new(10, 12, 0.359, 0.369, z, id, "s1").unwrap()
        };
        let rec = StageRecord::new("s1", "P4", vec![mk("loc2", 1.0), mk("loc1", 2.0)], Some("2024-01-01T00:00:00Z".into())).unwrap();
        save_stage(&rec, dir.path()).unwrap();
        let back = load_stage(dir.path(), None).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn order_independent_ingestion() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for (name, body) in [("x1.csv", "1 2\n3 4\n"), ("x2.csv", "5 6\n7 8\n"), ("x3.csv", "0 0\n1 1\n")] {
            write(a.path(), name, body);
        }
        write(
            a.path(),
            MANIFEST_NAME,
            "stage_label = \"S\"\nfiles = [\"x3.csv\", \"x1.csv\", \"x2.csv\"]\n",
        );
        for (name, body) in [("x2.csv", "5 6\n7 8\n"), ("x1.csv", "1 2\n3 4\n"), ("x3.csv", "0 0\n1 1\n")] {
            write(b.path(), name, body);
        }
        let ra = load_stage(a.path(), Some("S")).unwrap();
        let rb = load_stage(b.path(), Some("S")).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn height_matrix_invariants() {
        assert!(HeightMatrix::new(0, 3, 1.0, 1.0, vec![], "a", "s").is_err());
        assert!(HeightMatrix::new(1, 2, 1.0, 1.0, vec![1.0], "a", "s").is_err());
        assert!(HeightMatrix::new(1, 1, 0.0, 1.0, vec![1.0], "a", "s").is_err());
        assert!(HeightMatrix::new(1, 1, 1.0, 1.0, vec![f64::NAN], "a", "s").is_err());
        let m = HeightMatrix::new(2, 2, 0.5, 2.0, vec![1.0, 2.0, 3.0, 4.0], "a", "s").unwrap();
        let pts: Vec<_> = m.points().collect();
        assert_eq!(pts[3], (1, 1, 0.5, 2.0, 4.0));
    }

    #[test]
    fn stage_ids_must_agree() {
        let a = HeightMatrix::new(1, 2, 1.0, 1.0, vec![1.0, 2.0], "a", "s1").unwrap();
        let b = HeightMatrix::new(1, 2, 1.0, 1.0, vec![1.0, 2.0], "b", "s2").unwrap();
        assert!(StageRecord::new("s1", "S", vec![a, b], None).is_err());
    }
}

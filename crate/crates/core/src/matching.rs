//! View matching: patch descriptors per image cell, cosine costs between two
//! views, and match links read off a transport plan.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::ot::{CostMatrix, MassVector, TransportPlan};
use crate::{Error, Result};

/// Number of features per view.
pub const DEFAULT_FEATURES: usize = 64;
/// Descriptor length.
pub const DEFAULT_DIM: usize = 256;
/// Cells per image side; `DEFAULT_GRID^2 == DEFAULT_FEATURES`.
pub const DEFAULT_GRID: usize = 8;
/// Side of the resampled luminance patch inside each cell.
pub const PATCH: usize = 8;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let k = 3 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    /// Rec. 601 luma.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::invalid("truncated PPM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::invalid(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad PPM header value {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::invalid(format!("only maxval 255 is supported, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(pos + 1..).unwrap_or_default();
        let expected = width * height * 3;
        if raster.len() != expected {
            return Err(Error::invalid(format!("PPM raster has {} bytes, expected {expected}", raster.len())));
        }
        Self::new(width, height, raster.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_ppm())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = io::read_bytes(path)?;
        Self::from_ppm(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// `l` unit-norm descriptors of length `dim`, one per image cell, with the
/// cell centers (pixel coordinates `x`, `y`) as anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    anchors: Vec<[f64; 2]>,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>, anchors: Vec<[f64; 2]>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.is_empty() || dim == 0 {
            return Err(Error::invalid("feature set is empty"));
        }
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("feature vectors have differing lengths"));
        }
        if anchors.len() != vectors.len() {
            return Err(Error::invalid("one anchor per feature vector is required"));
        }
        Ok(Self { dim, vectors, anchors })
    }

    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn anchors(&self) -> &[[f64; 2]] {
        &self.anchors
    }
}

fn cell_bounds(cell: usize, grid: usize, extent: usize) -> (usize, usize) {
    (cell * extent / grid, (cell + 1) * extent / grid)
}

/// Luminance of the cell `[x0, x1) x [y0, y1)` bilinearly resampled to
/// `PATCH x PATCH`, never reading outside the cell.
fn resample_cell(img: &ImageGrid, (x0, x1): (usize, usize), (y0, y1): (usize, usize)) -> [[f64; PATCH]; PATCH] {
    let coord = |k: usize, lo: usize, hi: usize| {
        let t = lo as f64 + (k as f64 + 0.5) * (hi - lo) as f64 / PATCH as f64 - 0.5;
        t.clamp(lo as f64, (hi - 1) as f64)
    };
    let mut patch = [[0.0; PATCH]; PATCH];
    for (r, row) in patch.iter_mut().enumerate() {
        let y = coord(r, y0, y1);
        let (ya, fy) = (y.floor() as usize, y - y.floor());
        let yb = (ya + 1).min(y1 - 1);
        for (c, out) in row.iter_mut().enumerate() {
            let x = coord(c, x0, x1);
            let (xa, fx) = (x.floor() as usize, x - x.floor());
            let xb = (xa + 1).min(x1 - 1);
            let top = img.luminance(xa, ya) * (1.0 - fx) + img.luminance(xb, ya) * fx;
            let bottom = img.luminance(xa, yb) * (1.0 - fx) + img.luminance(xb, yb) * fx;
            *out = top * (1.0 - fy) + bottom * fy;
        }
    }
    patch
}

/// Splits the image into `grid x grid` cells (row-major) and describes each
/// by its resampled luminance patch followed by the absolute horizontal and
/// vertical forward differences of that patch (zero in the last column/row).
/// The concatenation is truncated or zero-padded to `dim` and scaled to unit
/// norm; an all-zero cell (black) maps to the constant unit vector.
pub fn extract_features(img: &ImageGrid, grid: usize, dim: usize) -> Result<FeatureSet> {
    if grid == 0 || dim == 0 {
        return Err(Error::invalid("grid and dim must be positive"));
    }
    if img.width() < grid || img.height() < grid {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than a {grid}x{grid} grid",
            img.width(),
            img.height()
        )));
    }
    let mut vectors = Vec::with_capacity(grid * grid);
    let mut anchors = Vec::with_capacity(grid * grid);
    for cy in 0..grid {
        let ys = cell_bounds(cy, grid, img.height());
        for cx in 0..grid {
            let xs = cell_bounds(cx, grid, img.width());
            let patch = resample_cell(img, xs, ys);
            let mut raw = Vec::with_capacity(3 * PATCH * PATCH);
            raw.extend(patch.iter().flatten());
            for r in 0..PATCH {
                for c in 0..PATCH {
                    raw.push(if c + 1 < PATCH { (patch[r][c + 1] - patch[r][c]).abs() } else { 0.0 });
                }
            }
            for r in 0..PATCH {
                for c in 0..PATCH {
                    raw.push(if r + 1 < PATCH { (patch[r + 1][c] - patch[r][c]).abs() } else { 0.0 });
                }
            }
            raw.resize(dim, 0.0);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                raw.iter_mut().for_each(|v| *v /= norm);
            } else {
                raw.fill(1.0 / (dim as f64).sqrt());
            }
            vectors.push(raw);
            anchors.push([(xs.0 + xs.1) as f64 / 2.0, (ys.0 + ys.1) as f64 / 2.0]);
        }
    }
    FeatureSet::new(vectors, anchors)
}

/// `M_ij = 1 - cos(f_i^s, f_j^t)`, clamped to `[0, 2]`; bitwise-equal
/// vectors cost exactly zero.
pub fn cosine_cost(fs: &FeatureSet, ft: &FeatureSet) -> Result<CostMatrix> {
    if fs.dim() != ft.dim() {
        return Err(Error::invalid(format!("descriptor dims differ: {} vs {}", fs.dim(), ft.dim())));
    }
    let norms = |set: &FeatureSet| -> Result<Vec<f64>> {
        set.vectors()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 && n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::invalid(format!("feature {k} has zero or non-finite norm")))
                }
            })
            .collect()
    };
    let (ns, nt) = (norms(fs)?, norms(ft)?);
    let m = DMatrix::from_fn(fs.count(), ft.count(), |i, j| {
        let (a, b) = (&fs.vectors()[i], &ft.vectors()[j]);
        if a == b {
            return 0.0;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (1.0 - dot / (ns[i] * nt[j])).clamp(0.0, 2.0)
    });
    CostMatrix::new(m)
}

pub fn uniform_masses(l: usize) -> Result<MassVector> {
    if l == 0 {
        return Err(Error::invalid("need at least one feature"));
    }
    MassVector::new(vec![1.0 / l as f64; l])
}

/// One link between a source cell and a target cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchLink {
    pub source_index: usize,
    pub target_index: usize,
    pub source: [f64; 2],
    pub target: [f64; 2],
    pub weight: f64,
}

/// JSON form of a link: source anchor `(si, sj)` and target anchor
/// `(ti, tj)` as pixel `(x, y)`, plus the plan weight `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub si: f64,
    pub sj: f64,
    pub ti: f64,
    pub tj: f64,
    pub w: f64,
}

impl From<&MatchLink> for LinkRecord {
    fn from(l: &MatchLink) -> Self {
        Self { si: l.source[0], sj: l.source[1], ti: l.target[0], tj: l.target[1], w: l.weight }
    }
}

/// The `k` heaviest plan cells, heaviest first; ties go to the smaller
/// `(row, column)`. Asking for more than `l^2` links returns all of them.
pub fn top_matches(plan: &TransportPlan, fs: &FeatureSet, ft: &FeatureSet, k: usize) -> Result<Vec<MatchLink>> {
    let t = plan.matrix();
    if t.nrows() != fs.count() || t.ncols() != ft.count() {
        return Err(Error::invalid("plan shape does not match the feature sets"));
    }
    let mut cells: Vec<(usize, usize, f64)> =
        (0..t.nrows()).flat_map(|i| (0..t.ncols()).map(move |j| (i, j))).map(|(i, j)| (i, j, t[(i, j)])).collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(cells
        .into_iter()
        .take(k)
        .map(|(i, j, w)| MatchLink {
            source_index: i,
            target_index: j,
            source: fs.anchors()[i],
            target: ft.anchors()[j],
            weight: w,
        })
        .collect())
}

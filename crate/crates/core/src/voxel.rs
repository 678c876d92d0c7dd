//! Grid containers, coordinate conventions and procedural voxelization.
//!
//! Every grid covers the unit cube `[0,1]^3`. A grid of lateral resolution
//! `N` has voxel `(i, j, k)` centered at `((i+0.5)/N, (j+0.5)/N, (k+0.5)/N)`,
//! and its payload is stored x-major: the flat offset of `(i, j, k)` is
//! `(i*N + j)*N + k`, so `k` (the z index) varies fastest.
//!
//! Latent grids use the same spatial layout with an extra, innermost channel
//! axis.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type VoxelIndex = [usize; 3];

#[inline]
pub fn linear_index(n: usize, [i, j, k]: VoxelIndex) -> usize {
    (i * n + j) * n + k
}

#[inline]
pub fn unravel(n: usize, flat: usize) -> VoxelIndex {
    [flat / (n * n), (flat / n) % n, flat % n]
}

/// Center of voxel `index` in unit-cube coordinates.
#[inline]
pub fn voxel_center(n: usize, index: VoxelIndex) -> Point3 {
    let pitch = 1.0 / n as f64;
    [(index[0] as f64 + 0.5) * pitch, (index[1] as f64 + 0.5) * pitch, (index[2] as f64 + 0.5) * pitch]
}

/// Voxel containing `p`. Points on the far wall (coordinate 1.0) map to the
/// last voxel; coordinates outside the cube are clamped.
#[inline]
pub fn voxel_of(n: usize, p: Point3) -> VoxelIndex {
    let f = |c: f64| ((c * n as f64).floor().max(0.0) as usize).min(n - 1);
    [f(p[0]), f(p[1]), f(p[2])]
}

#[inline]
pub fn distance(a: Point3, b: Point3) -> f64 {
    distance_sq(a, b).sqrt()
}

#[inline]
pub fn distance_sq(a: Point3, b: Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Dense stage-one latent: `n^3` cells with `channels` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    n: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(n: usize, channels: usize) -> Self {
        Self { n, channels, data: vec![0.0; n * n * n * channels] }
    }

    pub fn from_vec(n: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n * n * channels {
            return Err(Error::Shape(format!(
                "latent payload has {} values, expected {}^3 x {}",
                data.len(),
                n,
                channels
            )));
        }
        if n == 0 || channels == 0 {
            return Err(Error::Shape("latent grid must have n >= 1 and C >= 1".into()));
        }
        Ok(Self { n, channels, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, cell: VoxelIndex, channel: usize) -> f64 {
        self.data[linear_index(self.n, cell) * self.channels + channel]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn distance_sq(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Continuous occupancy over the unit cube, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    n: usize,
    data: Vec<f64>,
}

impl OccupancyGrid {
    pub fn filled(n: usize, value: f64) -> Self {
        Self { n, data: vec![value; n * n * n] }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n * n {
            return Err(Error::Shape(format!("occupancy payload has {} values, expected {n}^3", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("occupancy value {v} outside [0,1]")));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, index: VoxelIndex) -> f64 {
        self.data[linear_index(self.n, index)]
    }

    /// Threshold into a binary grid: a voxel is occupied iff `s >= tau`.
    pub fn binarize(&self, tau: f64) -> BinaryGrid {
        BinaryGrid { n: self.n, data: self.data.iter().map(|&s| s >= tau).collect() }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, GridKind::Occupancy, self.n)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a grid written by [`OccupancyGrid::write_to`]. Values are
    /// widened from `f32`.
    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let n = read_header(&mut r, GridKind::Occupancy, origin)?;
        let mut buf = vec![0u8; n * n * n * 4];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Self::from_vec(n, data).map_err(|e| Error::Format { path: origin.to_path_buf(), reason: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), path)
    }
}

/// Boolean occupancy, x-major like every other grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    n: usize,
    data: Vec<bool>,
}

impl BinaryGrid {
    pub fn empty(n: usize) -> Self {
        Self { n, data: vec![false; n * n * n] }
    }

    pub fn full(n: usize) -> Self {
        Self { n, data: vec![true; n * n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(VoxelIndex) -> bool) -> Self {
        let data = (0..n * n * n).map(|flat| f(unravel(n, flat))).collect();
        Self { n, data }
    }

    pub fn from_vec(n: usize, data: Vec<bool>) -> Result<Self> {
        if n == 0 || data.len() != n * n * n {
            return Err(Error::Shape(format!("binary payload has {} values, expected {n}^3", data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, index: VoxelIndex) -> bool {
        self.data[linear_index(self.n, index)]
    }

    pub fn set(&mut self, index: VoxelIndex, value: bool) {
        let flat = linear_index(self.n, index);
        self.data[flat] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    /// Occupied voxel indices in lexicographic order.
    pub fn occupied(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        let n = self.n;
        self.data.iter().enumerate().filter(|(_, &b)| b).map(move |(flat, _)| unravel(n, flat))
    }

    pub fn complement(&self) -> Self {
        Self { n: self.n, data: self.data.iter().map(|b| !b).collect() }
    }

    pub fn and(&self, other: &Self) -> Self {
        Self { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect() }
    }

    pub fn or(&self, other: &Self) -> Self {
        Self { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect() }
    }

    /// Intersection over union; two empty grids have IoU 1.
    pub fn iou(&self, other: &Self) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Number of voxels where the two grids disagree, restricted to `mask`.
    pub fn mismatch_within(&self, other: &Self, mask: &Self) -> usize {
        self.data.iter().zip(&other.data).zip(&mask.data).filter(|((a, b), m)| **m && a != b).count()
    }

    /// Occupied voxels with at least one unoccupied 6-neighbor. The outside
    /// of the grid counts as unoccupied.
    pub fn surface_voxels(&self) -> Vec<VoxelIndex> {
        let n = self.n;
        let occupied = |i: isize, j: isize, k: isize| {
            let inside = (0..n as isize).contains(&i) && (0..n as isize).contains(&j) && (0..n as isize).contains(&k);
            inside && self.get([i as usize, j as usize, k as usize])
        };
        self.occupied()
            .filter(|&[i, j, k]| {
                let (i, j, k) = (i as isize, j as isize, k as isize);
                !(occupied(i - 1, j, k)
                    && occupied(i + 1, j, k)
                    && occupied(i, j - 1, k)
                    && occupied(i, j + 1, k)
                    && occupied(i, j, k - 1)
                    && occupied(i, j, k + 1))
            })
            .collect()
    }

    /// Centers of the surface voxels.
    pub fn extract_surface(&self) -> Result<PointCloud> {
        if self.is_empty() {
            return Err(Error::EmptyGrid("surface extraction needs an occupied voxel"));
        }
        let points = self.surface_voxels().into_iter().map(|v| voxel_center(self.n, v)).collect();
        Ok(PointCloud { points })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, GridKind::Binary, self.n)?;
        let mut packed = vec![0u8; self.data.len().div_ceil(8)];
        for (flat, &b) in self.data.iter().enumerate() {
            if b {
                packed[flat / 8] |= 1 << (flat % 8);
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let n = read_header(&mut r, GridKind::Binary, origin)?;
        let total = n * n * n;
        let mut packed = vec![0u8; total.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let data = (0..total).map(|flat| packed[flat / 8] >> (flat % 8) & 1 == 1).collect();
        Ok(Self { n, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), path)
    }
}

// Grid container layout (little-endian):
//   bytes 0..8   magic "CFLOWVOX"
//   bytes 8..12  format version (u32, currently 1)
//   bytes 12..16 payload kind (u32: 0 = occupancy f32, 1 = packed bits)
//   bytes 16..20 N (u32)
//   payload      x-major; bits are packed LSB-first
const MAGIC: &[u8; 8] = b"CFLOWVOX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GridKind {
    Occupancy = 0,
    Binary = 1,
}

fn write_header<W: Write>(w: &mut W, kind: GridKind, n: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(kind as u32).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, kind: GridKind, origin: &Path) -> Result<usize> {
    let bad = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    let mut header = [0u8; 20];
    r.read_exact(&mut header)?;
    if &header[..8] != MAGIC {
        return Err(bad("missing CFLOWVOX magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes([header[at], header[at + 1], header[at + 2], header[at + 3]]);
    if word(8) != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", word(8))));
    }
    if word(12) != kind as u32 {
        return Err(bad(format!("expected payload kind {}, found {}", kind as u32, word(12))));
    }
    let n = word(16) as usize;
    if n == 0 || n > 1024 {
        return Err(bad(format!("implausible resolution {n}")));
    }
    Ok(n)
}

/// Unordered set of points in unit-cube coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_ply<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        writeln!(w, "end_header")?;
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ply(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Parses the ASCII PLY subset written by [`PointCloud::write_ply`].
    pub fn read_ply(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: origin.to_path_buf(), reason: reason.into() };
        let mut lines = text.lines();
        if lines.next() != Some("ply") {
            return Err(bad("missing ply magic"));
        }
        let mut count = None;
        for line in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("element vertex ") {
                count = rest.trim().parse::<usize>().ok();
            }
            if line == "end_header" {
                break;
            }
        }
        let count = count.ok_or_else(|| bad("missing vertex count"))?;
        let points = lines
            .take(count)
            .map(|line| {
                let v: Vec<f64> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                if v.len() == 3 {
                    Ok([v[0], v[1], v[2]])
                } else {
                    Err(bad("vertex line must hold three numbers"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if points.len() != count {
            return Err(bad("truncated vertex list"));
        }
        Ok(Self { points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    fn validate(&self, what: &str) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) {
                return Err(Error::DegeneratePrimitive(format!(
                    "{what} has zero extent on axis {a} ({} .. {})",
                    self.min[a], self.max[a]
                )));
            }
            if self.min[a] < 0.0 || self.max[a] > 1.0 {
                return Err(Error::InvalidParameter(format!("{what} leaves the unit cube on axis {a}")));
            }
        }
        Ok(())
    }
}

/// Procedural solids standing in for scanned assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box(Aabb),
    /// Circular cylinder along `axis`; `center` is the midpoint of its axis.
    Cylinder {
        axis: Axis,
        center: Point3,
        radius: f64,
        half_length: f64,
    },
    /// Two boxes joined at a shared corner region.
    LBracket {
        leg: Aabb,
        foot: Aabb,
    },
    UnionOfBoxes {
        boxes: Vec<Aabb>,
    },
    /// A box with a ball of `radius` centered on the middle of its upper
    /// face along `axis`; only the half of the ball outside the box counts.
    SphereCappedBox {
        body: Aabb,
        axis: Axis,
        radius: f64,
    },
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        match self {
            Primitive::Box(b) => b.validate("box"),
            Primitive::Cylinder { axis, center, radius, half_length } => {
                if !(*radius > 0.0) || !(*half_length > 0.0) {
                    return Err(Error::DegeneratePrimitive(format!(
                        "cylinder with radius {radius} and half length {half_length}"
                    )));
                }
                let a = axis.index();
                for d in 0..3 {
                    let half = if d == a { *half_length } else { *radius };
                    if center[d] - half < 0.0 || center[d] + half > 1.0 {
                        return Err(Error::InvalidParameter(format!("cylinder leaves the unit cube on axis {d}")));
                    }
                }
                Ok(())
            }
            Primitive::LBracket { leg, foot } => {
                leg.validate("L-bracket leg")?;
                foot.validate("L-bracket foot")?;
                let touching = (0..3).all(|a| leg.min[a] <= foot.max[a] && foot.min[a] <= leg.max[a]);
                if !touching {
                    return Err(Error::DegeneratePrimitive("L-bracket boxes do not meet".into()));
                }
                Ok(())
            }
            Primitive::UnionOfBoxes { boxes } => {
                if boxes.is_empty() {
                    return Err(Error::DegeneratePrimitive("union of zero boxes".into()));
                }
                boxes.iter().try_for_each(|b| b.validate("union member"))
            }
            Primitive::SphereCappedBox { body, axis, radius } => {
                body.validate("capped box body")?;
                if !(*radius > 0.0) {
                    return Err(Error::DegeneratePrimitive(format!("cap radius {radius}")));
                }
                let a = axis.index();
                if body.max[a] + radius > 1.0 {
                    return Err(Error::InvalidParameter("sphere cap leaves the unit cube".into()));
                }
                Ok(())
            }
        }
    }

    /// Point-in-solid test.
    pub fn contains(&self, p: Point3) -> bool {
        match self {
            Primitive::Box(b) => b.contains(p),
            Primitive::Cylinder { axis, center, radius, half_length } => {
                let a = axis.index();
                let radial: f64 = (0..3).filter(|&d| d != a).map(|d| (p[d] - center[d]).powi(2)).sum();
                (p[a] - center[a]).abs() <= *half_length && radial <= radius * radius
            }
            Primitive::LBracket { leg, foot } => leg.contains(p) || foot.contains(p),
            Primitive::UnionOfBoxes { boxes } => boxes.iter().any(|b| b.contains(p)),
            Primitive::SphereCappedBox { body, axis, radius } => {
                if body.contains(p) {
                    return true;
                }
                let a = axis.index();
                let mut c = [0.0; 3];
                for d in 0..3 {
                    c[d] = 0.5 * (body.min[d] + body.max[d]);
                }
                c[a] = body.max[a];
                p[a] >= body.max[a] && distance_sq(p, c) <= radius * radius
            }
        }
    }

    /// Occupies every voxel whose center lies inside the solid.
    pub fn voxelize(&self, n: usize) -> Result<BinaryGrid> {
        self.validate()?;
        let grid = BinaryGrid::from_fn(n, |v| self.contains(voxel_center(n, v)));
        if grid.is_empty() {
            return Err(Error::DegeneratePrimitive(format!("primitive covers no voxel center at N={n}")));
        }
        Ok(grid)
    }
}

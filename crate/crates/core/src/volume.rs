//! Voxel grids in HU (or attenuation) with physical metadata, plus the RSV1 file format.
//!
//! Arrays are stored x-fastest with axes ordered (z, y, x). Spacing and origin
//! follow the same (z, y, x) order. World coordinates are in mm with z along the
//! rotation axis (superior is +z).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{domain, Error, Result};

pub const RSV_MAGIC: &[u8; 4] = b"RSV1";

/// Voxel counts, spacing and origin of a regular grid, all in (z, y, x) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    /// Grid centred on the isocenter: voxel centers symmetric about 0 on every axis.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let origin = [0, 1, 2].map(|a| -((dims[a] as f64 - 1.0) / 2.0) * spacing[a]);
        GridSpec { dims, spacing, origin }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return domain(format!("grid dims must be >= 1, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return domain(format!("grid spacing must be positive, got {:?}", self.spacing));
        }
        Ok(())
    }

    /// World position `[x, y, z]` of voxel center `(k, j, i)`.
    #[inline]
    pub fn world(&self, k: usize, j: usize, i: usize) -> [f64; 3] {
        [
            self.origin[2] + i as f64 * self.spacing[2],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[0] + k as f64 * self.spacing[0],
        ]
    }

    /// Continuous voxel coordinate `[x, y, z]` of a world point.
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[2]) / self.spacing[2],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[0]) / self.spacing[0],
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub grid: GridSpec,
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn filled(grid: GridSpec, value: f32) -> Self {
        Volume3D { data: vec![value; grid.len()], grid }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn from_data(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return domain(format!("data length {} does not match grid {:?}", data.len(), grid.dims));
        }
        Ok(Volume3D { grid, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn index(&self, k: usize, j: usize, i: usize) -> usize {
        let [_, ny, nx] = self.grid.dims;
        (k * ny + j) * nx + i
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize, i: usize) -> f32 {
        self.data[self.index(k, j, i)]
    }

    /// Axial slice `k` as a row-major (y, x) array.
    pub fn slice_z(&self, k: usize) -> &[f32] {
        let [_, ny, nx] = self.grid.dims;
        &self.data[k * ny * nx..(k + 1) * ny * nx]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3D {
        Volume3D { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_shape(&self, other: &Volume3D) -> bool {
        self.grid.dims == other.grid.dims
    }

    /// Trilinear sample at continuous voxel coordinate `[x, y, z]`, clamped to the edges.
    pub fn sample_voxel(&self, p: [f64; 3]) -> f64 {
        let [nz, ny, nx] = self.grid.dims;
        let clampf = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        let (x, y, z) = (clampf(p[0], nx), clampf(p[1], ny), clampf(p[2], nz));
        let (i0, j0, k0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
        let (i1, j1, k1) = ((i0 + 1).min(nx - 1), (j0 + 1).min(ny - 1), (k0 + 1).min(nz - 1));
        let (fx, fy, fz) = (x - i0 as f64, y - j0 as f64, z - k0 as f64);
        let g = |k, j, i| self.get(k, j, i) as f64;
        let c00 = g(k0, j0, i0) * (1.0 - fx) + g(k0, j0, i1) * fx;
        let c01 = g(k0, j1, i0) * (1.0 - fx) + g(k0, j1, i1) * fx;
        let c10 = g(k1, j0, i0) * (1.0 - fx) + g(k1, j0, i1) * fx;
        let c11 = g(k1, j1, i0) * (1.0 - fx) + g(k1, j1, i1) * fx;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    pub fn write_rsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_rsv_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_rsv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 4 * self.data.len());
        out.extend_from_slice(RSV_MAGIC);
        for d in self.grid.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.grid.spacing {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        for o in self.grid.origin {
            out.extend_from_slice(&(o as f32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_rsv(path: &Path) -> Result<Volume3D> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_rsv_bytes(&bytes)
    }

    pub fn from_rsv_bytes(bytes: &[u8]) -> Result<Volume3D> {
        if bytes.len() < 40 || &bytes[0..4] != RSV_MAGIC {
            return Err(Error::Integrity("not an RSV1 volume".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize];
        let spacing = [f32_at(16) as f64, f32_at(20) as f64, f32_at(24) as f64];
        let origin = [f32_at(28) as f64, f32_at(32) as f64, f32_at(36) as f64];
        let n: usize = dims.iter().product();
        if bytes.len() != 40 + 4 * n {
            return Err(Error::Integrity(format!(
                "RSV1 payload is {} bytes, expected {}",
                bytes.len() - 40,
                4 * n
            )));
        }
        let data = bytes[40..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let grid = GridSpec { dims, spacing, origin };
        grid.validate()?;
        Ok(Volume3D { grid, data })
    }
}

/// Phase-resolved volume series sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    pub phases: Vec<Volume3D>,
}

impl Volume4D {
    pub fn new(phases: Vec<Volume3D>) -> Result<Self> {
        let Some(first) = phases.first() else {
            return domain("a 4D volume needs at least one phase");
        };
        if phases.iter().any(|p| p.grid != first.grid) {
            return domain("all phases must share identical grid metadata");
        }
        Ok(Volume4D { phases })
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.phases[0].grid
    }

    /// Voxel-wise mean over phases.
    pub fn mean(&self) -> Volume3D {
        let n = self.phases.len() as f64;
        let mut acc = vec![0f64; self.grid().len()];
        for p in &self.phases {
            for (a, &v) in acc.iter_mut().zip(&p.data) {
                *a += v as f64;
            }
        }
        Volume3D { grid: self.grid(), data: acc.into_iter().map(|a| (a / n) as f32).collect() }
    }

    /// Writes `{prefix}{i}.rsv` for every phase into `dir`.
    pub fn write_dir(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, p) in self.phases.iter().enumerate() {
            p.write_rsv(&dir.join(format!("{prefix}{i}.rsv")))?;
        }
        Ok(())
    }

    /// Reads `{prefix}0.rsv`, `{prefix}1.rsv`, ... until the first missing index.
    pub fn read_dir(dir: &Path, prefix: &str) -> Result<Self> {
        let mut phases = Vec::new();
        loop {
            let path = dir.join(format!("{prefix}{}.rsv", phases.len()));
            if !path.exists() {
                break;
            }
            phases.push(Volume3D::read_rsv(&path)?);
        }
        if phases.is_empty() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no {prefix}*.rsv files in {}", dir.display()),
            )));
        }
        Volume4D::new(phases)
    }
}

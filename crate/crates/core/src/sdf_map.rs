//! Prior map: a block-hashed voxel grid of signed distances.
//!
//! Voxel `g = (i, j, k)` has its center at `origin + (g + 0.5) * voxel_size`.
//! Voxels are grouped into blocks of `BLOCK_EDGE³`, addressed through a hash
//! table keyed by integer block coordinates. Interpolation treats voxel
//! centers as the vertices of the trilinear lattice.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use nalgebra::Vector3;

use crate::error::MapError;
use crate::scene::{union_distance, Primitive};

pub const BLOCK_EDGE: usize = 16;
pub const VOXELS_PER_BLOCK: usize = BLOCK_EDGE * BLOCK_EDGE * BLOCK_EDGE;

const MAGIC: &[u8; 4] = b"SDFM";
const FORMAT_VERSION: u32 = 1;

/// Integer block coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockIndex(pub [i32; 3]);

impl Hash for BlockIndex {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for c in self.0 {
            state.write_i32(c);
        }
    }
}

/// Global integer voxel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelIndex(pub [i64; 3]);

impl VoxelIndex {
    /// Splits into the owning block and the linear offset inside it.
    pub fn split(&self) -> (BlockIndex, usize) {
        let e = BLOCK_EDGE as i64;
        let b = self.0.map(|c| c.div_euclid(e) as i32);
        let l = self.0.map(|c| c.rem_euclid(e) as usize);
        (BlockIndex(b), l[0] + BLOCK_EDGE * (l[1] + BLOCK_EDGE * l[2]))
    }

    pub fn join(block: BlockIndex, offset: usize) -> Self {
        let e = BLOCK_EDGE as i64;
        let l = [
            (offset % BLOCK_EDGE) as i64,
            ((offset / BLOCK_EDGE) % BLOCK_EDGE) as i64,
            (offset / (BLOCK_EDGE * BLOCK_EDGE)) as i64,
        ];
        VoxelIndex([0, 1, 2].map(|k| block.0[k] as i64 * e + l[k]))
    }

    fn offset(&self, axis: usize, delta: i64) -> Self {
        let mut c = self.0;
        c[axis] += delta;
        VoxelIndex(c)
    }
}

/// Spatial hash over block coordinates: the usual prime-multiply XOR of the
/// three components, followed by a splitmix64 finalizer.
#[derive(Default)]
pub struct BlockHasher {
    state: u64,
    count: usize,
}

impl Hasher for BlockHasher {
    fn finish(&self) -> u64 {
        let mut z = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.state = self.state.rotate_left(8) ^ u64::from(*b);
        }
    }

    fn write_i32(&mut self, i: i32) {
        const PRIMES: [u64; 3] = [73_856_093, 19_349_669, 83_492_791];
        self.state ^= (i as u32 as u64).wrapping_mul(PRIMES[self.count % 3]);
        self.count += 1;
    }
}

type BlockMap = HashMap<BlockIndex, VoxelBlock, BuildHasherDefault<BlockHasher>>;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub distances: Vec<f32>,
    pub observed: Vec<bool>,
    gradients: Vec<Vector3<f64>>,
}

impl VoxelBlock {
    fn empty() -> Self {
        Self {
            distances: vec![0.0; VOXELS_PER_BLOCK],
            observed: vec![false; VOXELS_PER_BLOCK],
            gradients: vec![Vector3::zeros(); VOXELS_PER_BLOCK],
        }
    }
}

/// Interpolated distance and gradient at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfQuery {
    pub distance: f64,
    pub gradient: Vector3<f64>,
}

/// Axis-aligned region in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.max[k] <= self.min[k])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapParams {
    pub voxel_size: f64,
    /// Defaults to `voxel_size`.
    pub sigma_sdf: Option<f64>,
    /// Defaults to `4 * voxel_size`.
    pub truncation: Option<f64>,
    pub origin: Vector3<f64>,
}

impl MapParams {
    pub fn new(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            sigma_sdf: None,
            truncation: None,
            origin: Vector3::zeros(),
        }
    }

    pub fn with_truncation(mut self, truncation: f64) -> Self {
        self.truncation = Some(truncation);
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma_sdf = Some(sigma);
        self
    }
}

/// How [`SdfMap::interpolate`] forms the gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientScheme {
    /// Trilinear blend of per-voxel central-difference gradients. Continuous
    /// across cells, but only approximately the derivative of the distance.
    #[default]
    Blended,
    /// Exact derivative of the trilinear distance; piecewise, with jumps on
    /// cell faces.
    Trilinear,
}

#[derive(Debug, Clone)]
pub struct SdfMap {
    voxel_size: f64,
    origin: Vector3<f64>,
    sigma_sdf: f64,
    truncation: f64,
    gradient_scheme: GradientScheme,
    blocks: BlockMap,
}

/// Result of a successful ray cast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Distance along the (unit) ray direction.
    pub depth: f64,
    pub point: Vector3<f64>,
}

impl SdfMap {
    fn new(voxel_size: f64, origin: Vector3<f64>, sigma_sdf: f64, truncation: f64) -> Result<Self, MapError> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(MapError::InvalidParameters("voxel_size must be positive".into()));
        }
        if !(sigma_sdf > 0.0) {
            return Err(MapError::InvalidParameters("sigma_sdf must be positive".into()));
        }
        if !(truncation > 0.0) {
            return Err(MapError::InvalidParameters("truncation must be positive".into()));
        }
        Ok(Self {
            voxel_size,
            origin,
            sigma_sdf,
            truncation,
            gradient_scheme: GradientScheme::default(),
            blocks: BlockMap::default(),
        })
    }

    /// Samples the exact union distance of `scene` at every voxel center
    /// inside `bounds`, clamped to the truncation distance.
    pub fn build_from_analytic(scene: &[Primitive], params: MapParams, bounds: Aabb) -> Result<Self, MapError> {
        if scene.is_empty() {
            return Err(MapError::EmptyScene);
        }
        if bounds.is_empty() {
            return Err(MapError::InvalidParameters("bounds are empty".into()));
        }
        let vs = params.voxel_size;
        let mut map = Self::new(
            vs,
            params.origin,
            params.sigma_sdf.unwrap_or(vs),
            params.truncation.unwrap_or(4.0 * vs),
        )?;
        let lo = ((bounds.min - map.origin) / vs).map(|c| (c - 0.5).ceil() as i64);
        let hi = ((bounds.max - map.origin) / vs).map(|c| (c - 0.5).floor() as i64);
        for k in lo.z..=hi.z {
            for j in lo.y..=hi.y {
                for i in lo.x..=hi.x {
                    let index = VoxelIndex([i, j, k]);
                    let d = union_distance(scene, &map.voxel_center(index));
                    let d = d.clamp(-map.truncation, map.truncation);
                    map.set_voxel(index, d as f32);
                }
            }
        }
        map.recompute_gradients();
        Ok(map)
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn sigma_sdf(&self) -> f64 {
        self.sigma_sdf
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn gradient_scheme(&self) -> GradientScheme {
        self.gradient_scheme
    }

    /// Query-time setting; not stored in map files.
    pub fn set_gradient_scheme(&mut self, scheme: GradientScheme) {
        self.gradient_scheme = scheme;
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&BlockIndex, &VoxelBlock)> {
        self.blocks.iter()
    }

    /// Voxel whose cell contains `p`.
    pub fn voxel_index(&self, p: &Vector3<f64>) -> VoxelIndex {
        let g = (p - self.origin) / self.voxel_size;
        VoxelIndex([g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64])
    }

    pub fn voxel_center(&self, index: VoxelIndex) -> Vector3<f64> {
        let g = Vector3::new(index.0[0] as f64, index.0[1] as f64, index.0[2] as f64);
        self.origin + (g + Vector3::repeat(0.5)) * self.voxel_size
    }

    /// Stored distance, or `None` when the voxel is unobserved.
    pub fn voxel_distance(&self, index: VoxelIndex) -> Option<f32> {
        let (b, o) = index.split();
        let block = self.blocks.get(&b)?;
        block.observed[o].then(|| block.distances[o])
    }

    fn voxel_gradient(&self, index: VoxelIndex) -> Option<(f64, Vector3<f64>)> {
        let (b, o) = index.split();
        let block = self.blocks.get(&b)?;
        block.observed[o].then(|| (block.distances[o] as f64, block.gradients[o]))
    }

    fn set_voxel(&mut self, index: VoxelIndex, distance: f32) {
        let (b, o) = index.split();
        let block = self.blocks.entry(b).or_insert_with(VoxelBlock::empty);
        block.distances[o] = distance;
        block.observed[o] = true;
    }

    /// Central differences over neighboring voxel centers; one-sided where a
    /// neighbor is unobserved, zero where both are.
    fn recompute_gradients(&mut self) {
        let mut keys: Vec<BlockIndex> = self.blocks.keys().copied().collect();
        keys.sort();
        for key in keys {
            let mut grads = vec![Vector3::zeros(); VOXELS_PER_BLOCK];
            let observed = self.blocks[&key].observed.clone();
            for (o, g) in grads.iter_mut().enumerate() {
                if !observed[o] {
                    continue;
                }
                let index = VoxelIndex::join(key, o);
                let here = self.blocks[&key].distances[o] as f64;
                for axis in 0..3 {
                    let plus = self.voxel_distance(index.offset(axis, 1)).map(f64::from);
                    let minus = self.voxel_distance(index.offset(axis, -1)).map(f64::from);
                    g[axis] = match (plus, minus) {
                        (Some(p), Some(m)) => (p - m) / (2.0 * self.voxel_size),
                        (Some(p), None) => (p - here) / self.voxel_size,
                        (None, Some(m)) => (here - m) / self.voxel_size,
                        (None, None) => 0.0,
                    };
                }
            }
            self.blocks.get_mut(&key).expect("block").gradients = grads;
        }
    }

    /// Trilinear distance at `p`, with the gradient chosen by
    /// [`GradientScheme`]. Fails with
    /// [`MapError::Unobserved`] if any of the eight lattice corners is
    /// unobserved.
    pub fn interpolate(&self, p: &Vector3<f64>) -> Result<SdfQuery, MapError> {
        let g = (p - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        let base = g.map(f64::floor);
        let f = g - base;
        let base = [base.x as i64, base.y as i64, base.z as i64];
        let mut corners = [(0.0, Vector3::zeros()); 8];
        for (c, slot) in corners.iter_mut().enumerate() {
            let index = VoxelIndex([base[0] + (c & 1) as i64, base[1] + ((c >> 1) & 1) as i64, base[2] + ((c >> 2) & 1) as i64]);
            *slot = self.voxel_gradient(index).ok_or(MapError::Unobserved)?;
        }
        // Nested lerps keep constant and affine fields exact.
        let lerp = |a: (f64, Vector3<f64>), b: (f64, Vector3<f64>), t: f64| (a.0 + t * (b.0 - a.0), a.1 + (b.1 - a.1) * t);
        let x0 = lerp(corners[0], corners[1], f.x);
        let x1 = lerp(corners[2], corners[3], f.x);
        let x2 = lerp(corners[4], corners[5], f.x);
        let x3 = lerp(corners[6], corners[7], f.x);
        let y0 = lerp(x0, x1, f.y);
        let y1 = lerp(x2, x3, f.y);
        let (distance, blended) = lerp(y0, y1, f.z);
        let gradient = match self.gradient_scheme {
            GradientScheme::Blended => blended,
            GradientScheme::Trilinear => {
                let d = |c: usize| corners[c].0;
                let mix = |a: f64, b: f64, t: f64| a + t * (b - a);
                let bilerp = |c00: f64, c10: f64, c01: f64, c11: f64, s: f64, t: f64| mix(mix(c00, c10, s), mix(c01, c11, s), t);
                Vector3::new(
                    bilerp(d(1) - d(0), d(3) - d(2), d(5) - d(4), d(7) - d(6), f.y, f.z),
                    bilerp(d(2) - d(0), d(3) - d(1), d(6) - d(4), d(7) - d(5), f.x, f.z),
                    bilerp(d(4) - d(0), d(5) - d(1), d(6) - d(2), d(7) - d(3), f.x, f.y),
                ) / self.voxel_size
            }
        };
        Ok(SdfQuery { distance, gradient })
    }

    /// Marches from `origin` along `direction` and returns the first
    /// positive-to-negative crossing within `max_range`. Stepping is half a
    /// voxel; the bracket is refined by secant steps. Returns `None` on a
    /// miss or once the ray leaves observed space.
    pub fn raycast_zero_crossing(&self, origin: &Vector3<f64>, direction: &Vector3<f64>, max_range: f64) -> Option<RayHit> {
        debug_assert!((direction.norm() - 1.0).abs() <= 1e-9);
        let step = 0.5 * self.voxel_size;
        let sample = |t: f64| self.interpolate(&(origin + direction * t)).ok().map(|q| q.distance);
        let mut prev: Option<(f64, f64)> = None;
        let mut entered = false;
        let mut t = 0.0;
        loop {
            let at_end = t >= max_range;
            let t_here = t.min(max_range);
            match sample(t_here) {
                None if entered => return None,
                None => prev = None,
                Some(d) => {
                    entered = true;
                    if let Some((t0, d0)) = prev {
                        if d0 > 0.0 && d <= 0.0 {
                            return self.refine_crossing(origin, direction, (t0, d0), (t_here, d));
                        }
                    }
                    prev = Some((t_here, d));
                }
            }
            if at_end {
                return None;
            }
            t += step;
        }
    }

    fn refine_crossing(&self, origin: &Vector3<f64>, direction: &Vector3<f64>, a: (f64, f64), b: (f64, f64)) -> Option<RayHit> {
        let secant = |(t0, d0): (f64, f64), (t1, d1): (f64, f64)| t0 + d0 / (d0 - d1) * (t1 - t0);
        let mut t = secant(a, b);
        if let Ok(q) = self.interpolate(&(origin + direction * t)) {
            let d = q.distance;
            if d != 0.0 {
                let bracket = if d > 0.0 { ((t, d), b) } else { (a, (t, d)) };
                t = secant(bracket.0, bracket.1);
            }
        }
        Some(RayHit {
            depth: t,
            point: origin + direction * t,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }

    /// Little-endian binary encoding; blocks are written in sorted order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), MapError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.voxel_size, self.sigma_sdf, self.truncation] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.origin.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        let mut keys: Vec<&BlockIndex> = self.blocks.keys().collect();
        keys.sort();
        for key in keys {
            for c in key.0 {
                w.write_all(&c.to_le_bytes())?;
            }
            let block = &self.blocks[key];
            for (d, o) in block.distances.iter().zip(&block.observed) {
                w.write_all(&d.to_le_bytes())?;
                w.write_all(&[u8::from(*o)])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, MapError> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], MapError> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| MapError::Format(format!("truncated file: {e}")))?;
            Ok(buf)
        }
        if &take::<4, _>(r)? != MAGIC {
            return Err(MapError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != FORMAT_VERSION {
            return Err(MapError::Format(format!("unsupported version {version}")));
        }
        let voxel_size = f64::from_le_bytes(take(r)?);
        let sigma = f64::from_le_bytes(take(r)?);
        let truncation = f64::from_le_bytes(take(r)?);
        let origin = Vector3::new(
            f64::from_le_bytes(take(r)?),
            f64::from_le_bytes(take(r)?),
            f64::from_le_bytes(take(r)?),
        );
        let mut map = Self::new(voxel_size, origin, sigma, truncation).map_err(|e| MapError::Format(e.to_string()))?;
        let count = u64::from_le_bytes(take(r)?);
        for _ in 0..count {
            let key = BlockIndex([
                i32::from_le_bytes(take(r)?),
                i32::from_le_bytes(take(r)?),
                i32::from_le_bytes(take(r)?),
            ]);
            let mut block = VoxelBlock::empty();
            for o in 0..VOXELS_PER_BLOCK {
                block.distances[o] = f32::from_le_bytes(take(r)?);
                block.observed[o] = match take::<1, _>(r)?[0] {
                    0 => false,
                    1 => true,
                    b => return Err(MapError::Format(format!("bad observed flag {b}"))),
                };
            }
            if map.blocks.insert(key, block).is_some() {
                return Err(MapError::Format(format!("duplicate block {:?}", key.0)));
            }
        }
        map.recompute_gradients();
        Ok(map)
    }
}

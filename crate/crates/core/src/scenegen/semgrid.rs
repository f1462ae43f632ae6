use std::path::Path;

use diffkit::io::ByteReader;

use super::scene::Scene;
use crate::classes::EMPTY;
use crate::error::{Error, Result};
use crate::projection::GridSpec;

pub const GRID_MAGIC: &[u8; 4] = b"OGRD";
pub const GRID_VERSION: u8 = 1;

/// Labelled occupancy grid with a per-voxel camera-visibility flag.
#[derive(Clone, Debug, PartialEq)]
pub struct SemGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
    pub visibility: Vec<bool>,
}

impl SemGrid {
    pub fn new(spec: GridSpec, labels: Vec<u8>, visibility: Vec<bool>) -> Result<Self> {
        let n = spec.num_voxels()?;
        if labels.len() != n || visibility.len() != n {
            return Err(Error::Dimension(format!(
                "grid of {n} voxels got {} labels and {} visibility flags",
                labels.len(),
                visibility.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > EMPTY) {
            return Err(Error::Config(format!("label {bad} is neither a class nor empty")));
        }
        Ok(Self { spec, labels, visibility })
    }

    /// All empty, all visible.
    pub fn empty(spec: GridSpec) -> Result<Self> {
        let n = spec.num_voxels()?;
        Ok(Self { spec, labels: vec![EMPTY; n], visibility: vec![true; n] })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims().expect("validated at construction")
    }

    pub fn occupied(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != EMPTY).collect()
    }

    /// Mirrors the grid across the x and/or y mid-planes.
    pub fn mirrored(&self, flip_x: bool, flip_y: bool) -> Self {
        let [w, l, h] = self.dims();
        let mut out = self.clone();
        for x in 0..w {
            for y in 0..l {
                let sx = if flip_x { w - 1 - x } else { x };
                let sy = if flip_y { l - 1 - y } else { y };
                for z in 0..h {
                    let dst = (x * l + y) * h + z;
                    let src = (sx * l + sy) * h + z;
                    out.labels[dst] = self.labels[src];
                    out.visibility[dst] = self.visibility[src];
                }
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(4 + 1 + 28 + 12 + 2 * self.labels.len());
        out.extend_from_slice(GRID_MAGIC);
        out.push(GRID_VERSION);
        for v in self.spec.range {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.spec.voxel.to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out.extend(self.visibility.iter().map(|&v| v as u8));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(GRID_MAGIC)?;
        r.version(GRID_VERSION)?;
        let mut range = [0.0f32; 6];
        for v in &mut range {
            *v = r.f32("range")?;
        }
        let voxel = r.f32("voxel size")?;
        let at = r.offset();
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let spec = GridSpec { range, voxel };
        match spec.dims() {
            Ok(d) if d == dims => {}
            Ok(d) => {
                return Err(Error::Format { offset: at, msg: format!("dims {:?} disagree with range/voxel {:?}", dims, d) })
            }
            Err(e) => return Err(Error::Format { offset: 5, msg: e.to_string() }),
        }
        let n: usize = dims.iter().product();
        let at = r.offset();
        let labels = r.take(n, "labels")?.to_vec();
        if let Some(i) = labels.iter().position(|&l| l > EMPTY) {
            return Err(Error::Format { offset: at + i as u64, msg: format!("invalid label {}", labels[i]) });
        }
        let at = r.offset();
        let raw = r.take(n, "visibility")?;
        if let Some(i) = raw.iter().position(|&v| v > 1) {
            return Err(Error::Format { offset: at + i as u64, msg: format!("visibility byte {}", raw[i]) });
        }
        let visibility = raw.iter().map(|&v| v == 1).collect();
        r.finish()?;
        Ok(Self { spec, labels, visibility })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Labels each voxel by its centre: the containing object's class, else the
/// ground class inside the ground slab, else empty. Visibility is all true.
pub fn voxelize_gt(scene: &Scene, spec: &GridSpec) -> Result<SemGrid> {
    let g = spec.layout()?;
    let mut grid = SemGrid::empty(*spec)?;
    let top = scene.ground.height;
    let bottom = top - scene.ground.thickness;
    for i in 0..g.num_voxels() {
        let z = g.center(g.unflat(i))[2];
        if z >= bottom && z <= top {
            grid.labels[i] = scene.ground.class;
        }
    }
    for b in &scene.objects {
        let r = b.radius();
        let lo = [b.center[0] - r, b.center[1] - r, b.center[2] - b.size[2] / 2.0];
        let hi = [b.center[0] + r, b.center[1] + r, b.center[2] + b.size[2] / 2.0];
        let span = |a: usize| {
            let from = ((lo[a] - g.min[a]) / g.voxel - 0.5).floor().max(0.0) as usize;
            let to = (((hi[a] - g.min[a]) / g.voxel - 0.5).ceil().max(0.0) as usize).min(g.dims[a].saturating_sub(1));
            from..=to
        };
        for x in span(0) {
            for y in span(1) {
                for z in span(2) {
                    if b.contains(g.center([x, y, z])) {
                        grid.labels[g.flat([x, y, z])] = b.class;
                    }
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::{CAR, TERRAIN};
    use crate::scenegen::scene::{Box3, Ground};

    fn spec() -> GridSpec {
        GridSpec::new([-4.0, -4.0, -2.0, 4.0, 4.0, 2.0], 0.5).unwrap()
    }

    fn scene(objects: Vec<Box3>) -> Scene {
        Scene { objects, ground: Ground { height: -1.5, thickness: 0.5, class: TERRAIN }, bounds: [-4.0, -4.0, 4.0, 4.0] }
    }

    #[test]
    fn containment_and_ground() {
        let b = Box3 { center: [1.0, 1.0, 0.0], size: [1.2, 1.2, 1.2], yaw: 0.3, class: CAR };
        let grid = voxelize_gt(&scene(vec![b]), &spec()).unwrap();
        let g = spec().layout().unwrap();
        let v = g.voxel_of([1.01, 1.01, 0.01]).unwrap();
        assert_eq!(grid.labels[g.flat(v)], CAR);
        assert_eq!(grid.labels[g.flat([0, 0, 0])], TERRAIN);
        assert_eq!(grid.labels[g.flat([0, 0, 1])], EMPTY);
    }

    #[test]
    fn nothing_above_ground_is_empty() {
        let spec = GridSpec::new([-4.0, -4.0, 0.0, 4.0, 4.0, 2.0], 0.5).unwrap();
        let grid = voxelize_gt(&scene(vec![]), &spec).unwrap();
        assert!(grid.labels.iter().all(|&l| l == EMPTY));
    }

    #[test]
    fn encode_round_trip_and_corruption() {
        let mut grid = voxelize_gt(&scene(vec![]), &spec()).unwrap();
        grid.visibility[3] = false;
        let bytes = grid.encode();
        let back = SemGrid::decode(&bytes).unwrap();
        assert_eq!(back, grid);
        assert_eq!(back.encode(), bytes);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(SemGrid::decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(SemGrid::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut v = bytes;
        v[4] = 2;
        assert!(matches!(SemGrid::decode(&v), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn mirroring_is_an_involution() {
        let b = Box3 { center: [1.0, -2.0, 0.0], size: [1.2, 0.7, 1.2], yaw: 0.3, class: CAR };
        let grid = voxelize_gt(&scene(vec![b]), &spec()).unwrap();
        assert_ne!(grid.mirrored(true, false), grid);
        assert_eq!(grid.mirrored(true, true).mirrored(true, true), grid);
    }
}

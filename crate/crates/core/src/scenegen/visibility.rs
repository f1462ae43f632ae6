use diffkit::Exec;

use super::semgrid::SemGrid;
use super::sensors::CameraSpec;
use crate::error::Result;
use crate::geom::Vec3;
use crate::par::map_range;
use crate::projection::GridLayout;

/// Ray parameters closer than this count as the same crossing.
const EPS: f64 = 1e-9;

/// Points of a voxel that a camera ray may reach: the centre, then the
/// centres of the faces whose outer side the camera is on.
pub fn sample_points(g: &GridLayout, idx: [usize; 3], eye: Vec3) -> Vec<Vec3> {
    let c = g.center(idx);
    let h = g.voxel / 2.0;
    let mut out = vec![c];
    for a in 0..3 {
        for s in [-1.0, 1.0] {
            let plane = c[a] + s * h;
            if (eye[a] - plane) * s > 0.0 {
                let mut p = c;
                p[a] = plane;
                out.push(p);
            }
        }
    }
    out
}

/// Walks the voxels crossed by the segment `eye -> p` (3D DDA) and reports
/// whether every voxel crossed with positive length, other than `target`,
/// is free.
pub fn segment_is_clear(g: &GridLayout, occupied: &[bool], eye: Vec3, p: Vec3, target: usize) -> bool {
    let d = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for a in 0..3 {
        let lo = g.min[a];
        let hi = g.min[a] + g.dims[a] as f64 * g.voxel;
        if d[a] == 0.0 {
            if eye[a] < lo || eye[a] > hi {
                return true;
            }
            continue;
        }
        let (ta, tb) = ((lo - eye[a]) / d[a], (hi - eye[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 >= t1 {
        return true;
    }
    let start = [0, 1, 2].map(|a| eye[a] + t0 * d[a]);
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let f = ((start[a] - g.min[a]) / g.voxel).floor() as i64;
        idx[a] = f.clamp(0, g.dims[a] as i64 - 1);
        if d[a] > 0.0 {
            step[a] = 1;
            let boundary = g.min[a] + (idx[a] + 1) as f64 * g.voxel;
            t_max[a] = (boundary - eye[a]) / d[a];
            t_delta[a] = g.voxel / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            let boundary = g.min[a] + idx[a] as f64 * g.voxel;
            t_max[a] = (boundary - eye[a]) / d[a];
            t_delta[a] = -g.voxel / d[a];
        }
    }
    let mut t = t0;
    loop {
        if t >= t1 - EPS {
            return true;
        }
        let next = t_max[0].min(t_max[1]).min(t_max[2]).min(t1);
        let flat = ((idx[0] as usize) * g.dims[1] + idx[1] as usize) * g.dims[2] + idx[2] as usize;
        if flat != target && occupied[flat] && next - t > EPS {
            return false;
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= g.dims[a] as i64 {
            return true;
        }
        t = t_max[a];
        t_max[a] += t_delta[a];
    }
}

/// A voxel is visible when, for some camera, one of its sample points lies
/// in the image and the segment to it crosses no other occupied voxel.
pub fn compute_visibility(grid: &SemGrid, cams: &[CameraSpec]) -> Result<Vec<bool>> {
    compute_visibility_with(Exec::default(), grid, cams)
}

pub fn compute_visibility_with(exec: Exec, grid: &SemGrid, cams: &[CameraSpec]) -> Result<Vec<bool>> {
    for c in cams {
        c.validate()?;
    }
    let g = grid.spec.layout()?;
    let occupied = grid.occupied();
    let [w, l, h] = g.dims;
    // One task per x-slab keeps the work coarse enough to amortise scheduling.
    let slabs = map_range(exec, w, |x| {
        let mut out = vec![false; l * h];
        for y in 0..l {
            for z in 0..h {
                let idx = [x, y, z];
                let target = g.flat(idx);
                out[y * h + z] = cams.iter().any(|cam| {
                    let eye = cam.origin();
                    sample_points(&g, idx, eye)
                        .into_iter()
                        .any(|p| cam.sees(p) && segment_is_clear(&g, &occupied, eye, p, target))
                });
            }
        }
        out
    });
    Ok(slabs.concat())
}

use diffkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::classes::{self, EMPTY, NUM_LOGITS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Foreground,
    Background,
    Empty,
}

/// Region of every label id (classes and the empty id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub regions: Vec<Region>,
}

impl Default for ClassMap {
    /// Objects are foreground, surfaces background.
    fn default() -> Self {
        let regions = (0..NUM_LOGITS as u8)
            .map(|c| {
                if c == EMPTY {
                    Region::Empty
                } else if classes::is_thing(c) {
                    Region::Foreground
                } else {
                    Region::Background
                }
            })
            .collect();
        Self { regions }
    }
}

impl ClassMap {
    pub fn region(&self, id: u8) -> Result<Region> {
        self.regions
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Config(format!("class id {id} has no region")))
    }
}

/// Binary region masks over a grid (`[W, L, H]`) or a BEV plane (`[W, L]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub dims: Vec<usize>,
    pub fg: Vec<bool>,
    pub bg: Vec<bool>,
    pub empty: Vec<bool>,
}

impl RegionMasks {
    pub fn len(&self) -> usize {
        self.fg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg.is_empty()
    }

    /// `|S_f|, |S_b|, |S_e|`
    pub fn counts(&self) -> [usize; 3] {
        let n = |m: &[bool]| m.iter().filter(|v| **v).count();
        [n(&self.fg), n(&self.bg), n(&self.empty)]
    }

    /// Exactly one mask set at every position.
    pub fn is_partition(&self) -> bool {
        (0..self.len()).all(|i| self.fg[i] as u8 + self.bg[i] as u8 + self.empty[i] as u8 == 1)
    }

    /// Single all-ones foreground mask: distillation over the whole space.
    pub fn full_space(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), fg: vec![true; n], bg: vec![false; n], empty: vec![false; n] }
    }

    pub fn from_regions(dims: &[usize], regions: impl Iterator<Item = Region>) -> Self {
        let n: usize = dims.iter().product();
        let mut m = Self {
            dims: dims.to_vec(),
            fg: Vec::with_capacity(n),
            bg: Vec::with_capacity(n),
            empty: Vec::with_capacity(n),
        };
        for r in regions {
            m.fg.push(r == Region::Foreground);
            m.bg.push(r == Region::Background);
            m.empty.push(r == Region::Empty);
        }
        m
    }
}

/// Region of each voxel's label.
pub fn decompose_regions(labels: &[u8], dims: [usize; 3], cmap: &ClassMap) -> Result<RegionMasks> {
    if labels.len() != dims.iter().product::<usize>() {
        return Err(Error::Dimension(format!("{} labels for grid {:?}", labels.len(), dims)));
    }
    let regions: Vec<Region> = labels.iter().map(|&l| cmap.region(l)).collect::<Result<_>>()?;
    Ok(RegionMasks::from_regions(&dims, regions.into_iter()))
}

/// Argmax over `logits[W, L, H, C]`, then [`decompose_regions`].
pub fn decompose_logits(logits: &Tensor, cmap: &ClassMap) -> Result<RegionMasks> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("logits must be [W,L,H,C], got {:?}", s)));
    }
    let labels: Vec<u8> = logits.argmax_last().into_iter().map(|c| c as u8).collect();
    decompose_regions(&labels, [s[0], s[1], s[2]], cmap)
}

/// Column-wise projection with priority foreground > background > empty.
pub fn project_regions_bev(m: &RegionMasks) -> Result<RegionMasks> {
    let [w, l, h] = match m.dims[..] {
        [w, l, h] => [w, l, h],
        _ => return Err(Error::Dimension(format!("expected 3D masks, got {:?}", m.dims))),
    };
    let regions = (0..w * l).map(|cell| {
        let col = cell * h..(cell + 1) * h;
        if m.fg[col.clone()].iter().any(|v| *v) {
            Region::Foreground
        } else if m.bg[col].iter().any(|v| *v) {
            Region::Background
        } else {
            Region::Empty
        }
    });
    Ok(RegionMasks::from_regions(&[w, l], regions))
}

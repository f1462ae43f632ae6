use std::sync::Arc;

use diffkit::{Exec, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand::rngs::StdRng;

use super::config::NetConfig;
use super::layers::{conv, linear, Bound, Builder};
use crate::error::{Error, Result};
use crate::projection::{
    bev_pool, gen_frustum_multi, precompute_intervals, sample_index, scatter_bev, IntervalTable, Pillars,
};
use crate::scenegen::CameraSpec;

/// Camera geometry baked into lookup tables: which encoder pixels are lifted
/// and where their frustum points land.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub table: Arc<IntervalTable>,
    pub cams: usize,
    pub height: usize,
    pub width: usize,
    /// Image pixel `(cam · H + row) · W + col` of every lifted pixel.
    pub pixels: Vec<usize>,
}

impl CameraView {
    pub fn new(cfg: &NetConfig, cams: &[CameraSpec]) -> Result<Self> {
        Self::flipped(cfg, cams, [false, false])
    }

    /// The view of a world mirrored across the grid's x and/or y mid-planes.
    pub fn flipped(cfg: &NetConfig, cams: &[CameraSpec], flip: [bool; 2]) -> Result<Self> {
        cfg.validate()?;
        let depths = cfg.depth.depths()?;
        let mut frustum = gen_frustum_multi(cams, &depths, cfg.pixel_stride)?;
        let (lo, hi) = (cfg.grid.min(), cfg.grid.max());
        let mid = |a: usize| ((lo[a] + hi[a]) / 2.0) as f32;
        if flip[0] || flip[1] {
            frustum = frustum.mirrored(flip[0].then(|| mid(0)), flip[1].then(|| mid(1)));
        }
        let table = precompute_intervals(&frustum, &cfg.grid)?;
        let (h, w) = (cams[0].height, cams[0].width);
        let mut pixels = Vec::with_capacity(frustum.num_pixels());
        for cam in 0..frustum.cams {
            for r in 0..frustum.rows {
                for c in 0..frustum.cols {
                    pixels.push((cam * h + sample_index(r, cfg.pixel_stride)) * w + sample_index(c, cfg.pixel_stride));
                }
            }
        }
        Ok(Self { table: Arc::new(table), cams: cams.len(), height: h, width: w, pixels })
    }
}

/// Inputs of one scene. The student reads only the images.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a> {
    /// `[cams, 3, H, W]`
    pub images: Option<&'a Tensor>,
    pub pillars: Option<&'a Pillars>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    /// `[W, L, H, C]`
    pub logits: Var,
    /// `[Cf, W, L]`, right after fusion (teacher) or the camera lift (student).
    pub bev_feat: Var,
    /// `[Co, W, L, H]`, the input of the classification conv.
    pub occ_feat: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub bev_feat: Tensor,
    pub occ_feat: Tensor,
}

impl ModelOutput {
    fn read(g: &Graph, v: &ModelVars) -> Self {
        Self { logits: g.value(v.logits).clone(), bev_feat: g.value(v.bev_feat).clone(), occ_feat: g.value(v.occ_feat).clone() }
    }
}

/// `[H·C, W, L] -> [W, L, H, C]` with channel `h·C + c` going to `(h, c)`.
pub fn channel_to_height(g: &mut Graph, x: Var, num_classes: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("channel_to_height expects [H*C,W,L], got {:?}", s)));
    }
    if num_classes == 0 || s[0] % num_classes != 0 {
        return Err(Error::Config(format!("{} channels are not divisible by {num_classes} classes", s[0])));
    }
    let h = s[0] / num_classes;
    let r = g.reshape(x, &[h, num_classes, s[1], s[2]])?;
    Ok(g.permute(r, &[2, 3, 0, 1])?)
}

/// Inverse of [`channel_to_height`].
pub fn height_to_channel(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("height_to_channel expects [W,L,H,C], got {:?}", s)));
    }
    let p = g.permute(x, &[2, 3, 0, 1])?;
    Ok(g.reshape(p, &[s[2] * s[3], s[0], s[1]])?)
}

fn add_image_branch(b: &mut Builder, prefix: &str, cfg: &NetConfig) {
    let hid = cfg.image_channels;
    for i in 0..cfg.image_layers {
        let cin = if i == 0 { 3 + COORD_PLANES } else { hid };
        b.conv(&format!("{prefix}.enc{i}"), cin, hid, 3, true);
    }
    b.linear(&format!("{prefix}.feat"), hid, cfg.cam_channels, false);
    b.linear(&format!("{prefix}.depth"), hid, cfg.depth.count, false);
}

fn add_trunk(b: &mut Builder, cfg: &NetConfig) -> Result<()> {
    let cf = cfg.fused_channels;
    let h = cfg.dims()?[2];
    for i in 0..cfg.encoder_blocks {
        b.conv(&format!("enc.{i}"), cf, cf, 3, true);
    }
    b.conv("head.occ", cf, h * cfg.occ_channels, 1, true);
    b.conv("head.cls", h * cfg.occ_channels, cfg.head_channels()?, 1, false);
    Ok(())
}

/// Normalised row and column planes appended to every image.
pub const COORD_PLANES: usize = 2;

/// `[cams, 2, H, W]`: row then column coordinate, each in `[-1, 1]`.
pub fn coord_planes(cams: usize, h: usize, w: usize) -> Tensor {
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f32 / (n - 1) as f32 - 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(cams * 2 * h * w);
    for _ in 0..cams {
        data.extend((0..h * w).map(|i| norm(i / w, h)));
        data.extend((0..h * w).map(|i| norm(i % w, w)));
    }
    Tensor::new(&[cams, 2, h, w], data).expect("consistent shape")
}

/// Image encoder, per-pixel features and depth softmax, then BEV pooling:
/// `images[cams, 3, H, W] -> [1, Cc, W, L]`.
pub fn image_branch(g: &mut Graph, p: Bound, prefix: &str, images: Var, view: &CameraView, cfg: &NetConfig) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s != [view.cams, 3, view.height, view.width] {
        return Err(Error::Config(format!(
            "images {:?} do not match {} cameras of {}x{}",
            s, view.cams, view.width, view.height
        )));
    }
    // pixel values [0, 1] centred to [-1, 1]
    let centred = g.scale(images, 2.0)?;
    let centred = g.add_scalar(centred, -1.0)?;
    let coords = g.constant(coord_planes(view.cams, view.height, view.width))?;
    let x = g.concat(&[centred, coords], 1)?;
    let mut x = x;
    for i in 0..cfg.image_layers {
        x = conv(g, p, &format!("{prefix}.enc{i}"), x, 1, true)?;
    }
    let hid = cfg.image_channels;
    let hw = view.height * view.width;
    let mut idx = Vec::with_capacity(view.pixels.len() * hid);
    for &px in &view.pixels {
        let (cam, off) = (px / hw, px % hw);
        idx.extend((0..hid).map(|k| (cam * hid + k) * hw + off));
    }
    let rows = g.gather(x, idx, &[view.pixels.len(), hid])?;
    let feats = linear(g, p, &format!("{prefix}.feat"), rows)?;
    let depth_logits = linear(g, p, &format!("{prefix}.depth"), rows)?;
    let depth = g.softmax(depth_logits)?;
    let bev = bev_pool(g, feats, depth, &view.table)?;
    let [w, l] = view.table.dims;
    Ok(g.reshape(bev, &[1, cfg.cam_channels, w, l])?)
}

/// Pillar features scaled to roughly unit range: positions by the grid
/// half-extent, offsets by the voxel size, intensity centred on the middle
/// of its range.
pub fn normalize_pillars(pillars: &Pillars, cfg: &NetConfig) -> Result<Tensor> {
    let (lo, hi) = (cfg.grid.min(), cfg.grid.max());
    let v = cfg.grid.voxel as f64;
    let mut t = pillars.features.clone();
    for row in t.data_mut().chunks_mut(7) {
        for a in 0..3 {
            let (c, half) = ((lo[a] + hi[a]) / 2.0, (hi[a] - lo[a]) / 2.0);
            row[a] = ((row[a] as f64 - c) / half) as f32;
            row[4 + a] = (row[4 + a] as f64 / v) as f32;
        }
        row[3] = (row[3] - 0.45) / 0.45;
    }
    Ok(t)
}

/// Pillar lift, scatter to BEV and one conv: `-> [1, Cl, W, L]`.
pub fn lidar_branch(g: &mut Graph, p: Bound, pillars: &Pillars, cfg: &NetConfig) -> Result<Var> {
    let [w, l, _] = cfg.dims()?;
    let cl = cfg.lidar_channels;
    let bev = if pillars.coords.is_empty() {
        g.constant(Tensor::zeros(&[1, cl, w, l]))?
    } else {
        let f = g.constant(normalize_pillars(pillars, cfg)?)?;
        let h = linear(g, p, "lidar.lift", f)?;
        let h = g.relu(h)?;
        let m = scatter_bev(g, h, &pillars.coords, [w, l])?;
        g.reshape(m, &[1, cl, w, l])?
    };
    conv(g, p, "lidar.conv", bev, 1, true)
}

/// Channel concat then a 3x3 conv with ReLU.
pub fn fuse_bev(g: &mut Graph, p: Bound, cam: Var, lidar: Var) -> Result<Var> {
    let (a, b) = (g.shape(cam).to_vec(), g.shape(lidar).to_vec());
    if a.len() != 4 || b.len() != 4 || a[2..] != b[2..] {
        return Err(Error::Dimension(format!("cannot fuse BEV maps {:?} and {:?}", a, b)));
    }
    let x = g.concat(&[cam, lidar], 1)?;
    conv(g, p, "fuse", x, 1, true)
}

/// Residual 3x3 blocks, then the height head. Returns `(occ_feat, logits)`.
pub fn encode_and_head(g: &mut Graph, p: Bound, x: Var, cfg: &NetConfig) -> Result<(Var, Var)> {
    let [w, l, h] = cfg.dims()?;
    let mut x = x;
    for i in 0..cfg.encoder_blocks {
        let y = conv(g, p, &format!("enc.{i}"), x, 1, true)?;
        x = g.add(x, y)?;
    }
    let o = conv(g, p, "head.occ", x, 0, true)?;
    let co = cfg.occ_channels;
    let o3 = g.reshape(o, &[h, co, w, l])?;
    let occ_feat = g.permute(o3, &[1, 2, 3, 0])?;
    let z = conv(g, p, "head.cls", o, 0, false)?;
    let z = g.reshape(z, &[cfg.head_channels()?, w, l])?;
    let logits = channel_to_height(g, z, cfg.num_classes)?;
    Ok((occ_feat, logits))
}

fn strip_batch(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x)[1..].to_vec();
    Ok(g.reshape(x, &s)?)
}

fn attach(g: &mut Graph, params: &ParamSet, trainable: bool) -> Result<Vec<Var>> {
    Ok(if trainable { params.attach(g)? } else { params.attach_frozen(g)? })
}

/// Lidar and camera branches fused in BEV.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub cfg: NetConfig,
    pub params: ParamSet,
}

impl Teacher {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(StdRng::seed_from_u64(seed));
        add_image_branch(&mut b, "cam", &cfg);
        b.linear("lidar.lift", crate::projection::PILLAR_FEATURES, cfg.lidar_channels, true);
        b.conv("lidar.conv", cfg.lidar_channels, cfg.lidar_channels, 3, true);
        b.conv("fuse", cfg.cam_channels + cfg.lidar_channels, cfg.fused_channels, 3, true);
        add_trunk(&mut b, &cfg)?;
        Ok(Self { cfg, params: b.params })
    }

    pub fn from_params(cfg: NetConfig, params: ParamSet) -> Result<Self> {
        let mut t = Self::new(cfg, 0)?;
        t.params.load_from(&params)?;
        Ok(t)
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: SampleInput, view: &CameraView) -> Result<ModelVars> {
        let (Some(images), Some(pillars)) = (input.images, input.pillars) else {
            return Err(Error::Input("the fusion model needs both points and images".into()));
        };
        let p = Bound::new(&self.params, vars);
        let img = g.constant(images.clone())?;
        let cam = image_branch(g, p, "cam", img, view, &self.cfg)?;
        let lidar = lidar_branch(g, p, pillars, &self.cfg)?;
        let fused = fuse_bev(g, p, cam, lidar)?;
        let (occ_feat, logits) = encode_and_head(g, p, fused, &self.cfg)?;
        let bev_feat = strip_batch(g, fused)?;
        Ok(ModelVars { logits, bev_feat, occ_feat })
    }

    /// Adds the weights to `g` and runs the forward pass.
    pub fn build(&self, g: &mut Graph, input: SampleInput, view: &CameraView, trainable: bool) -> Result<(Vec<Var>, ModelVars)> {
        let vars = attach(g, &self.params, trainable)?;
        let out = self.forward(g, &vars, input, view)?;
        Ok((vars, out))
    }

    /// Inference with frozen weights.
    pub fn predict(&self, exec: Exec, input: SampleInput, view: &CameraView) -> Result<ModelOutput> {
        let mut g = Graph::with_exec(exec);
        let (_, v) = self.build(&mut g, input, view, false)?;
        Ok(ModelOutput::read(&g, &v))
    }
}

/// Camera-only model; optionally carries the layers that map its features
/// to a teacher's widths.
#[derive(Clone, Debug)]
pub struct Student {
    pub cfg: NetConfig,
    pub params: ParamSet,
    /// Teacher `(fused, occ)` channel widths when adaptation layers exist.
    pub adapt: Option<[usize; 2]>,
}

impl Student {
    pub fn new(cfg: NetConfig, seed: u64, adapt_to: Option<&NetConfig>) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(StdRng::seed_from_u64(seed));
        add_image_branch(&mut b, "cam", &cfg);
        b.conv("lift", cfg.cam_channels, cfg.fused_channels, 3, true);
        add_trunk(&mut b, &cfg)?;
        let adapt = match adapt_to {
            Some(t) => {
                if t.dims()? != cfg.dims()? {
                    return Err(Error::Config(format!(
                        "teacher grid {:?} differs from student grid {:?}",
                        t.dims()?,
                        cfg.dims()?
                    )));
                }
                b.conv("adapt.bev", cfg.fused_channels, t.fused_channels, 1, false);
                b.matrix("adapt.occ", t.occ_channels, cfg.occ_channels);
                Some([t.fused_channels, t.occ_channels])
            }
            None => None,
        };
        Ok(Self { cfg, params: b.params, adapt })
    }

    pub fn from_params(cfg: NetConfig, params: ParamSet) -> Result<Self> {
        let mut s = Self::new(cfg.clone(), 0, None)?;
        if params.get("adapt.occ.w").is_some() {
            let fused = params.get("adapt.bev.w").map_or(0, |t| t.shape()[0]);
            let occ = params.get("adapt.occ.w").map_or(0, |t| t.shape()[0]);
            let tcfg = NetConfig { fused_channels: fused, occ_channels: occ, ..cfg };
            s = Self::new(s.cfg, 0, Some(&tcfg))?;
        }
        s.params.load_from(&params)?;
        Ok(s)
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: &Tensor, view: &CameraView) -> Result<ModelVars> {
        let p = Bound::new(&self.params, vars);
        let img = g.constant(images.clone())?;
        let cam = image_branch(g, p, "cam", img, view, &self.cfg)?;
        let bev = conv(g, p, "lift", cam, 1, true)?;
        let (occ_feat, logits) = encode_and_head(g, p, bev, &self.cfg)?;
        let bev_feat = strip_batch(g, bev)?;
        Ok(ModelVars { logits, bev_feat, occ_feat })
    }

    pub fn build(&self, g: &mut Graph, images: &Tensor, view: &CameraView, trainable: bool) -> Result<(Vec<Var>, ModelVars)> {
        let vars = attach(g, &self.params, trainable)?;
        let out = self.forward(g, &vars, images, view)?;
        Ok((vars, out))
    }

    pub fn predict(&self, exec: Exec, images: &Tensor, view: &CameraView) -> Result<ModelOutput> {
        let mut g = Graph::with_exec(exec);
        let (_, v) = self.build(&mut g, images, view, false)?;
        Ok(ModelOutput::read(&g, &v))
    }

    /// Student features mapped to the teacher's widths: `(bev [Ct,W,L],
    /// occ [Cot,W,L,H])`.
    pub fn adapt(&self, g: &mut Graph, vars: &[Var], out: &ModelVars) -> Result<(Var, Var)> {
        if self.adapt.is_none() {
            return Err(Error::Contract("student has no adaptation layers".into()));
        }
        let p = Bound::new(&self.params, vars);
        let s = g.shape(out.bev_feat).to_vec();
        let x = g.reshape(out.bev_feat, &[1, s[0], s[1], s[2]])?;
        let bev = conv(g, p, "adapt.bev", x, 0, false)?;
        let bev = strip_batch(g, bev)?;
        let o = g.shape(out.occ_feat).to_vec();
        let flat = g.reshape(out.occ_feat, &[o[0], o[1] * o[2] * o[3]])?;
        let m = g.matmul(p.get("adapt.occ.w")?, flat)?;
        let ct = g.shape(m)[0];
        let occ = g.reshape(m, &[ct, o[1], o[2], o[3]])?;
        Ok((bev, occ))
    }
}

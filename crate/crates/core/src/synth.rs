//! Emulated co-axis dual-camera rig: a procedurally textured scene with moving
//! sprites, seen by a wide raw camera and a misaligned, tele sRGB camera.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::homography::{estimate_homography, Correspondence, Homography};
use crate::image::{quantize_u8, Provenance, RgbImage};
use crate::raw::{fov_window, BayerFrame, FovWindow, Site, WHITE_LEVEL};

/// A textured rectangle moving at constant velocity (canvas pixels per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub seed: u64,
    pub size: (usize, usize),
    pub velocity: (f64, f64),
    pub start: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Canvas size at HR resolution covering the full wide-camera view.
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    /// Texture amplitude; zero gives a flat field.
    pub contrast: f64,
    /// Number of flat-coloured blocks painted on the background.
    pub blocks: usize,
    pub sprites: Vec<Sprite>,
    pub frame_count: usize,
    pub fps: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// A static textured scene without sprites.
    pub fn still(width: usize, height: usize, frame_count: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            background_seed: seed,
            contrast: 0.35,
            blocks: (width * height / 4096).max(1),
            sprites: Vec::new(),
            frame_count,
            fps: 15.0,
            seed,
        }
    }

    /// Textured scene with a handful of random moving sprites.
    pub fn random(width: usize, height: usize, frame_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e);
        let mut spec = Self::still(width, height, frame_count, seed);
        let n = rng.gen_range(2..=4);
        let side = |rng: &mut ChaCha8Rng, limit: usize| rng.gen_range(16..=(limit / 4).max(17));
        for _ in 0..n {
            let size = (side(&mut rng, width), side(&mut rng, height));
            spec.sprites.push(Sprite {
                seed: rng.gen(),
                size,
                velocity: (rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)),
                start: (
                    rng.gen_range(0.0..(width.saturating_sub(size.0) as f64 + 1.0)),
                    rng.gen_range(0.0..(height.saturating_sub(size.1) as f64 + 1.0)),
                ),
            });
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return Err(Error::Config(String::from("scene needs a non-empty canvas and at least one frame")));
        }
        if !(self.fps > 0.0) || !(self.contrast >= 0.0) {
            return Err(Error::Config(format!("bad fps {} or contrast {}", self.fps, self.contrast)));
        }
        if let Some(s) = self.sprites.iter().find(|s| s.size.0 > self.width || s.size.1 > self.height || s.size.0 == 0 || s.size.1 == 0) {
            return Err(Error::Config(format!("sprite size {:?} does not fit the canvas", s.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigSpec {
    /// HR pixels per LR mosaic pixel; also the focal-length ratio.
    pub zoom_ratio: usize,
    /// Bounds of the mean corner displacement of the misalignment, HR pixels.
    pub shift_range: (f64, f64),
    /// Non-translational corner jitter as a fraction of the shift.
    pub perspective: f64,
    /// Gaussian read noise σ in digital numbers.
    pub read_noise: f64,
    /// Shot-noise scale: variance contributed per DN of signal.
    pub shot_noise: f64,
    pub black_level: u16,
    pub wb_ratios: (f64, f64),
    /// Per-channel gain of the HR branch.
    pub hr_gain: [f64; 3],
    /// Additive brightness offset of the HR branch.
    pub hr_bias: f64,
    pub seed: u64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            zoom_ratio: 4,
            shift_range: (10.0, 40.0),
            perspective: 0.15,
            read_noise: 24.0,
            shot_noise: 0.5,
            black_level: 256,
            wb_ratios: (1.9, 1.6),
            hr_gain: [1.03, 1.0, 0.97],
            hr_bias: 0.01,
            seed: 7,
        }
    }
}

impl RigSpec {
    /// Noise-free, perfectly aligned rig with no photometric mismatch.
    pub fn ideal() -> Self {
        Self {
            shift_range: (0.0, 0.0),
            perspective: 0.0,
            read_noise: 0.0,
            shot_noise: 0.0,
            hr_gain: [1.0; 3],
            hr_bias: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shift_range;
        if self.zoom_ratio == 0 || !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "zoom {} / shift range {:?} invalid",
                self.zoom_ratio, self.shift_range
            )));
        }
        if !(self.read_noise >= 0.0 && self.shot_noise >= 0.0 && self.perspective >= 0.0) {
            return Err(Error::Config(String::from("noise and perspective must be non-negative")));
        }
        if !(self.wb_ratios.0 > 0.0 && self.wb_ratios.1 > 0.0) || self.black_level == WHITE_LEVEL {
            return Err(Error::Config(String::from("white balance must be positive, black below white")));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, key: u64) -> f64 {
    let h = splitmix(key ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, cell: f64, key: u64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (fx0, fy0) = (libm::floor(gx), libm::floor(gy));
    let (ix, iy) = (fx0 as i64, fy0 as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(gx - fx0), s(gy - fy0));
    let a = lattice(ix, iy, key);
    let b = lattice(ix + 1, iy, key);
    let c = lattice(ix, iy + 1, key);
    let d = lattice(ix + 1, iy + 1, key);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

const LUMA_OCTAVES: [(f64, f64); 5] = [(48.0, 0.5), (24.0, 0.35), (12.0, 0.25), (6.0, 0.2), (4.0, 0.12)];
const CHROMA_OCTAVES: [(f64, f64); 2] = [(40.0, 0.25), (10.0, 0.1)];

/// Coverage of `[lo, lo + len)` by a unit box filter centred on `x`.
fn coverage_1d(x: f64, lo: f64, len: f64) -> f64 {
    let inside = (x - lo + 0.5).min(lo + len - x + 0.5);
    inside.clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
struct Block {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    rgb: [f64; 3],
}

#[derive(Clone, Debug)]
struct SpriteLook {
    a: [f64; 3],
    b: [f64; 3],
    dir: (f64, f64),
    period: f64,
    phase: f64,
}

/// Continuous scene evaluator with a cached background canvas.
#[derive(Clone, Debug)]
pub struct Scene {
    spec: SceneSpec,
    base: [f64; 3],
    blocks: Vec<Block>,
    looks: Vec<SpriteLook>,
    background: RgbImage,
}

fn random_rgb(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
        let base = random_rgb(&mut rng, 0.3, 0.6);
        let blocks = (0..spec.blocks)
            .map(|_| {
                let w = rng.gen_range(6.0..48.0);
                let h = rng.gen_range(6.0..48.0);
                Block {
                    x: rng.gen_range(-w..spec.width as f64),
                    y: rng.gen_range(-h..spec.height as f64),
                    w,
                    h,
                    rgb: random_rgb(&mut rng, 0.1, 0.9),
                }
            })
            .collect();
        let looks = spec
            .sprites
            .iter()
            .map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s.seed);
                let angle: f64 = r.gen_range(0.0..core::f64::consts::PI);
                SpriteLook {
                    a: random_rgb(&mut r, 0.05, 0.95),
                    b: random_rgb(&mut r, 0.05, 0.95),
                    dir: (libm::cos(angle), libm::sin(angle)),
                    period: r.gen_range(5.0..14.0),
                    phase: r.gen_range(0.0..core::f64::consts::TAU),
                }
            })
            .collect();
        let mut scene = Self {
            spec: spec.clone(),
            base,
            blocks,
            looks,
            background: RgbImage::filled(0, 0, [0.0; 3]),
        };
        let mut bg = RgbImage::filled(spec.width, spec.height, [0.0; 3]);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let v = scene.background_at(x as f64, y as f64);
                for (c, val) in v.iter().enumerate() {
                    bg.set(c, x, y, *val);
                }
            }
        }
        scene.background = bg;
        Ok(scene)
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    fn background_at(&self, x: f64, y: f64) -> [f64; 3] {
        let k = self.spec.background_seed;
        let amp = self.spec.contrast;
        if amp == 0.0 {
            return self.base;
        }
        let lum: f64 = LUMA_OCTAVES
            .iter()
            .enumerate()
            .map(|(o, &(cell, a))| a * (value_noise(x, y, cell, splitmix(k ^ o as u64)) - 0.5))
            .sum();
        let mut out = [0.0; 3];
        for (c, v) in out.iter_mut().enumerate() {
            let chroma: f64 = CHROMA_OCTAVES
                .iter()
                .enumerate()
                .map(|(o, &(cell, a))| {
                    a * (value_noise(x, y, cell, splitmix(k ^ (0x100 * (c as u64 + 1) + o as u64))) - 0.5)
                })
                .sum();
            *v = self.base[c] + amp * (lum + chroma);
        }
        for b in &self.blocks {
            let cov = coverage_1d(x, b.x, b.w) * coverage_1d(y, b.y, b.h);
            if cov > 0.0 {
                for (c, v) in out.iter_mut().enumerate() {
                    let inner = b.rgb[c] + 0.5 * amp * lum;
                    *v += cov * (inner - *v);
                }
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }

    /// Top-left sprite position at frame `t`, clamped inside the canvas.
    pub fn sprite_position(&self, i: usize, t: usize) -> (f64, f64) {
        let s = &self.spec.sprites[i];
        let x = s.start.0 + s.velocity.0 * t as f64;
        let y = s.start.1 + s.velocity.1 * t as f64;
        (
            x.clamp(0.0, (self.spec.width - s.size.0) as f64),
            y.clamp(0.0, (self.spec.height - s.size.1) as f64),
        )
    }

    fn composite_sprites(&self, x: f64, y: f64, t: usize, px: &mut [f64; 3]) {
        for (i, s) in self.spec.sprites.iter().enumerate() {
            let (sx, sy) = self.sprite_position(i, t);
            let cov = coverage_1d(x, sx, s.size.0 as f64) * coverage_1d(y, sy, s.size.1 as f64);
            if cov <= 0.0 {
                continue;
            }
            let look = &self.looks[i];
            let (u, v) = (x - sx, y - sy);
            let p = 0.5 + 0.5 * libm::sin(core::f64::consts::TAU * (u * look.dir.0 + v * look.dir.1) / look.period + look.phase);
            for (c, val) in px.iter_mut().enumerate() {
                let col = look.a[c] * p + look.b[c] * (1.0 - p);
                *val += cov * (col - *val);
            }
        }
    }

    /// Scene radiance at continuous canvas coordinates.
    pub fn eval(&self, x: f64, y: f64, t: usize) -> [f64; 3] {
        let mut px = self.background_at(x, y);
        self.composite_sprites(x, y, t, &mut px);
        px
    }

    /// Ground-truth canvas at frame `t`.
    pub fn render(&self, t: usize) -> Result<RgbImage> {
        if t >= self.spec.frame_count {
            return Err(Error::Range(format!(
                "frame {} out of range for {} frames",
                t, self.spec.frame_count
            )));
        }
        let mut img = self.background.clone();
        for (i, s) in self.spec.sprites.iter().enumerate() {
            let (sx, sy) = self.sprite_position(i, t);
            let x0 = libm::floor(sx - 1.0).max(0.0) as usize;
            let y0 = libm::floor(sy - 1.0).max(0.0) as usize;
            let x1 = (libm::ceil(sx + s.size.0 as f64 + 1.0) as usize).min(self.spec.width);
            let y1 = (libm::ceil(sy + s.size.1 as f64 + 1.0) as usize).min(self.spec.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut px = [img.get(0, x, y), img.get(1, x, y), img.get(2, x, y)];
                    self.composite_sprites(x as f64, y as f64, t, &mut px);
                    for (c, v) in px.iter().enumerate() {
                        img.set(c, x, y, *v);
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Ground-truth canvas of `scene` at frame `t`.
pub fn render_truth(scene: &SceneSpec, t: usize) -> Result<RgbImage> {
    Scene::new(scene)?.render(t)
}

/// Exact geometry relating a captured HR frame to the LR-aligned grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthAlignment {
    /// Maps captured HR coordinates onto the aligned HR grid.
    pub homography: Homography,
    /// `(captured, aligned)` point pairs consistent with `homography`.
    pub correspondences: Vec<Correspondence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub lr: BayerFrame,
    pub hr: RgbImage,
    /// HR-branch rendering without misalignment, the evaluation reference.
    pub hr_aligned: RgbImage,
    pub alignment: GroundTruthAlignment,
}

/// Random misalignment whose mean corner displacement over a `w × h` frame
/// equals `magnitude`: a translation plus proportional corner jitter.
pub fn misalignment(w: f64, h: f64, magnitude: f64, perspective: f64, seed: u64) -> Result<Homography> {
    if magnitude == 0.0 {
        return Ok(Homography::identity());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let dir = (libm::cos(theta), libm::sin(theta));
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let jitter: Vec<(f64, f64)> = corners
        .iter()
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
            let r = perspective * magnitude * rng.gen_range(0.0..1.0);
            (r * libm::cos(a), r * libm::sin(a))
        })
        .collect();
    let build = |s: f64| -> Result<Homography> {
        let corr: Vec<Correspondence> = corners
            .iter()
            .zip(&jitter)
            .map(|(&(x, y), &(jx, jy))| ((x, y), (x + jx + s * dir.0, y + jy + s * dir.1)))
            .collect();
        Ok(estimate_homography(&corr)?.homography)
    };
    let mean_disp = |s: f64| -> f64 {
        corners
            .iter()
            .zip(&jitter)
            .map(|(_, &(jx, jy))| libm::hypot(jx + s * dir.0, jy + s * dir.1))
            .sum::<f64>()
            / 4.0
    };
    let (mut lo, mut hi) = (0.0, magnitude * (2.0 + perspective));
    if mean_disp(lo) > magnitude {
        return Err(Error::Config(format!("perspective {} too strong for the shift", perspective)));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_disp(mid) < magnitude {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build(0.5 * (lo + hi))
}

/// Both cameras of the rig looking at one scene.
#[derive(Clone, Debug)]
pub struct Camera {
    scene: Scene,
    rig: RigSpec,
    window: FovWindow,
    /// Aligned grid -> captured HR coordinates.
    forward: Homography,
    alignment: Homography,
    correspondences: Vec<Correspondence>,
}

impl Camera {
    pub fn new(scene: &SceneSpec, rig: &RigSpec) -> Result<Self> {
        rig.validate()?;
        let z = rig.zoom_ratio;
        if scene.width % (2 * z) != 0 || scene.height % (2 * z) != 0 {
            return Err(Error::Config(format!(
                "canvas {}×{} must be a multiple of twice the zoom {}",
                scene.width, scene.height, z
            )));
        }
        let scene = Scene::new(scene)?;
        let (lw, lh) = (scene.spec.width / z, scene.spec.height / z);
        let window = fov_window(lw, lh, z as f64)?;
        let (hw, hh) = ((window.width * z) as f64, (window.height * z) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(rig.seed ^ splitmix(scene.spec.seed)));
        let (lo, hi) = rig.shift_range;
        let magnitude = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let alignment = misalignment(hw, hh, magnitude, rig.perspective, rng.gen())?;
        let forward = alignment.inverse()?;
        let correspondences = (0..20)
            .map(|_| {
                let p = (rng.gen_range(0.0..hw - 1.0), rng.gen_range(0.0..hh - 1.0));
                (forward.apply(p.0, p.1), p)
            })
            .collect();
        Ok(Self {
            scene,
            rig: rig.clone(),
            window,
            forward,
            alignment,
            correspondences,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn lr_size(&self) -> (usize, usize) {
        let z = self.rig.zoom_ratio;
        (self.scene.spec.width / z, self.scene.spec.height / z)
    }

    pub fn hr_size(&self) -> (usize, usize) {
        let z = self.rig.zoom_ratio;
        (self.window.width * z, self.window.height * z)
    }

    pub fn fov(&self) -> FovWindow {
        self.window
    }

    /// True map from the aligned grid to captured HR coordinates.
    pub fn forward(&self) -> Homography {
        self.forward
    }

    pub fn alignment(&self) -> GroundTruthAlignment {
        GroundTruthAlignment {
            homography: self.alignment,
            correspondences: self.correspondences.clone(),
        }
    }

    fn hr_photometry(&self, v: [f64; 3]) -> [f64; 3] {
        core::array::from_fn(|c| f64::from(quantize_u8(self.rig.hr_gain[c] * v[c] + self.rig.hr_bias)) / 255.0)
    }

    fn hr_from(&self, map: impl Fn(f64, f64) -> (f64, f64), t: usize) -> RgbImage {
        let z = self.rig.zoom_ratio as f64;
        let (ox, oy) = (self.window.x0 as f64 * z, self.window.y0 as f64 * z);
        let (w, h) = self.hr_size();
        let mut img = RgbImage::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = map(x as f64, y as f64);
                let px = self.hr_photometry(self.scene.eval(ox + u, oy + v, t));
                for (c, val) in px.iter().enumerate() {
                    img.set(c, x, y, *val);
                }
            }
        }
        img.with_provenance(Provenance::Srgb8)
    }

    fn lr_from(&self, truth: &RgbImage, t: usize) -> Result<BayerFrame> {
        let (lw, lh) = self.lr_size();
        let small = truth.resize_bicubic(lw, lh);
        let rig = &self.rig;
        let black = f64::from(rig.black_level);
        let range = f64::from(WHITE_LEVEL) - black;
        let seed = splitmix(rig.seed ^ splitmix(self.scene.spec.seed ^ splitmix(t as u64 + 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let read = Normal::new(0.0, rig.read_noise.max(0.0)).map_err(|e| Error::Config(format!("{}", e)))?;
        let mut samples = Vec::with_capacity(lw * lh);
        for y in 0..lh {
            for x in 0..lw {
                let site = Site::at(x, y);
                let gain = match site {
                    Site::R => rig.wb_ratios.0,
                    Site::B => rig.wb_ratios.1,
                    _ => 1.0,
                };
                let mut dn = small.get(site.rgb(), x, y).clamp(0.0, 1.0) * range / gain;
                if rig.shot_noise > 0.0 && dn > 0.0 {
                    let lambda = dn / rig.shot_noise;
                    let k: f64 = Poisson::new(lambda).map_err(|e| Error::Config(format!("{}", e)))?.sample(&mut rng);
                    dn = k * rig.shot_noise;
                }
                if rig.read_noise > 0.0 {
                    dn += read.sample(&mut rng);
                }
                let s = libm::floor(dn + black + 0.5).clamp(black, f64::from(WHITE_LEVEL));
                samples.push(s as u16);
            }
        }
        BayerFrame::new(lw, lh, samples, rig.black_level, rig.wb_ratios)
    }

    /// Captures frame `t` with both cameras.
    pub fn capture(&self, t: usize) -> Result<Capture> {
        let truth = self.scene.render(t)?;
        let lr = self.lr_from(&truth, t)?;
        let g = self.alignment;
        let hr = self.hr_from(|x, y| g.apply(x, y), t);
        let hr_aligned = self.hr_from(|x, y| (x, y), t);
        Ok(Capture {
            lr,
            hr,
            hr_aligned,
            alignment: self.alignment(),
        })
    }
}

/// One-shot capture of frame `t`.
pub fn capture_pair(scene: &SceneSpec, rig: &RigSpec, t: usize) -> Result<Capture> {
    Camera::new(scene, rig)?.capture(t)
}

/// Adds isotropic Gaussian noise of `sigma` pixels to the captured side.
pub fn perturb_correspondences(corr: &[Correspondence], sigma: f64, seed: u64) -> Result<Vec<Correspondence>> {
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("{}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(corr
        .iter()
        .map(|&((x, y), p)| ((x + n.sample(&mut rng), y + n.sample(&mut rng)), p))
        .collect())
}

/// Train/val/test clip counts: each held-out share is floored and the
/// remainder goes to training.
pub fn split_counts(n: usize, ratio: (u32, u32, u32)) -> Result<(usize, usize, usize)> {
    let total = u64::from(ratio.0) + u64::from(ratio.1) + u64::from(ratio.2);
    if total == 0 {
        return Err(Error::Config(String::from("split ratio must not be all zero")));
    }
    let share = |r: u32| (n as u64 * u64::from(r) / total) as usize;
    let (val, test) = (share(ratio.1), share(ratio.2));
    Ok((n - val - test, val, test))
}

/// Mean residual `‖g(h(p)) − p‖` over a grid of aligned-frame points, where
/// `h` is the true captured-from-aligned map and `g` the estimate.
pub fn residual_misalignment(truth_forward: &Homography, estimate: &Homography, w: f64, h: f64) -> f64 {
    let mut sum = 0.0;
    let n = 16;
    for j in 0..n {
        for i in 0..n {
            let p = (w * (i as f64 + 0.5) / n as f64, h * (j as f64 + 0.5) / n as f64);
            let q = truth_forward.apply(p.0, p.1);
            let r = estimate.apply(q.0, q.1);
            sum += libm::hypot(r.0 - p.0, r.1 - p.1);
        }
    }
    sum / (n * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rule() {
        assert_eq!(split_counts(10, (45, 10, 45)).unwrap(), (5, 1, 4));
        assert_eq!(split_counts(80, (45, 10, 45)).unwrap(), (36, 8, 36));
        assert!(split_counts(3, (0, 0, 0)).is_err());
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let spec = SceneSpec::random(64, 48, 3, 11);
        let a = render_truth(&spec, 2).unwrap();
        assert_eq!(a, render_truth(&spec, 2).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(render_truth(&spec, 3).is_err());
    }

    #[test]
    fn sprites_stay_on_canvas() {
        let mut spec = SceneSpec::still(64, 64, 50, 1);
        spec.sprites.push(Sprite {
            seed: 3,
            size: (20, 10),
            velocity: (5.0, -4.0),
            start: (30.0, 20.0),
        });
        let scene = Scene::new(&spec).unwrap();
        for t in 0..50 {
            let (x, y) = scene.sprite_position(0, t);
            assert!(x >= 0.0 && x + 20.0 <= 64.0 && y >= 0.0 && y + 10.0 <= 64.0);
        }
    }

    #[test]
    fn misalignment_hits_requested_magnitude() {
        for seed in 0..5 {
            let h = misalignment(128.0, 96.0, 20.0, 0.15, seed).unwrap();
            assert!((h.mean_corner_displacement(128.0, 96.0) - 20.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ideal_rig_sizes() {
        let scene = SceneSpec::still(128, 96, 1, 2);
        let cam = Camera::new(&scene, &RigSpec::ideal()).unwrap();
        assert_eq!(cam.lr_size(), (32, 24));
        assert_eq!(cam.hr_size(), (32, 24));
        let cap = cam.capture(0).unwrap();
        assert_eq!(cap.hr, cap.hr_aligned);
        assert!(cap.lr.samples().iter().all(|&s| s >= cam.rig.black_level));
    }
}

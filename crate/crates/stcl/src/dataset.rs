//! Synthetic dataset generation, clip manifests and preprocessing.

use std::path::{Path, PathBuf};
use std::thread;

use stcl_core::homography::{estimate_homography, Correspondence, Homography};
use stcl_core::raw::{BayerFrame, ClipPair, ValidRect};
use stcl_core::synth::{perturb_correspondences, split_counts, Camera, Capture, RigSpec, SceneSpec};
use stcl_core::train::EvalFrame;

use crate::config::{rig_from_kv, rig_to_kv, RIG_KEYS};
use crate::error::{read_file, write_file, Error, Result};
use crate::kv::{fmt_f64, fmt_floats, KvMap};
use crate::pnm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HrFormat {
    Ppm,
    Png,
}

impl HrFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HrFormat::Ppm => "ppm",
            HrFormat::Png => "png",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ppm" => Some(HrFormat::Ppm),
            "png" => Some(HrFormat::Png),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub scenes: usize,
    pub frames: usize,
    /// Side of the square scene canvas in HR pixels.
    pub canvas: usize,
    pub fps: f64,
    pub seed: u64,
    /// Train : val : test shares.
    pub split: (u32, u32, u32),
    /// σ in pixels of the noise added to the stored correspondences,
    /// emulating an imperfect registration step.
    pub corr_noise: f64,
    pub hr_format: HrFormat,
    pub rig: RigSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenes: 6,
            frames: 20,
            canvas: 512,
            fps: 15.0,
            seed: 7,
            split: (45, 10, 45),
            corr_noise: 1.0,
            hr_format: HrFormat::Ppm,
            rig: RigSpec {
                shift_range: (10.0, 40.0),
                ..RigSpec::default()
            },
        }
    }
}

pub const GEN_KEYS: &[&str] = &["scenes", "frames", "canvas", "fps", "seed", "split", "corr_noise", "hr_format"];

impl GenConfig {
    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("scenes", self.scenes);
        kv.set("frames", self.frames);
        kv.set("canvas", self.canvas);
        kv.set("fps", fmt_f64(self.fps));
        kv.set("seed", self.seed);
        kv.set("split", format!("{} {} {}", self.split.0, self.split.1, self.split.2));
        kv.set("corr_noise", fmt_f64(self.corr_noise));
        kv.set("hr_format", self.hr_format.extension());
        rig_to_kv(&self.rig, kv);
    }

    /// Applies the keys present in `kv`; `strict` rejects anything else.
    pub fn apply_kv(&mut self, kv: &KvMap, strict: bool) -> Result<()> {
        if strict {
            let allowed: Vec<&str> = GEN_KEYS.iter().chain(RIG_KEYS).copied().collect();
            kv.reject_unknown(&allowed)?;
        }
        if let Some(v) = kv.parse("scenes")? {
            self.scenes = v;
        }
        if let Some(v) = kv.parse("frames")? {
            self.frames = v;
        }
        if let Some(v) = kv.parse("canvas")? {
            self.canvas = v;
        }
        if let Some(v) = kv.parse("fps")? {
            self.fps = v;
        }
        if let Some(v) = kv.parse("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("split") {
            self.split = parse_split(v)?;
        }
        if let Some(v) = kv.parse("corr_noise")? {
            self.corr_noise = v;
        }
        if let Some(v) = kv.get("hr_format") {
            self.hr_format = HrFormat::parse(v).ok_or_else(|| Error::Config(format!("unknown HR format `{}`", v)))?;
        }
        rig_from_kv(kv, &mut self.rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.frames == 0 {
            return Err(Error::Config(String::from("need at least one scene and one frame")));
        }
        if !(self.corr_noise >= 0.0 && self.corr_noise.is_finite()) {
            return Err(Error::Config(format!("correspondence noise {} invalid", self.corr_noise)));
        }
        self.rig.validate()?;
        Ok(())
    }

    /// Scene description of clip `i`.
    pub fn scene(&self, i: usize) -> SceneSpec {
        let mut s = SceneSpec::random(self.canvas, self.canvas, self.frames, clip_seed(self.seed, i));
        s.fps = self.fps;
        s
    }
}

pub fn parse_split(s: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<u32> = s
        .split(|c: char| c == ':' || c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("split `{}`: expected three integers", s))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("split `{}`: expected three integers", s))),
    }
}

fn clip_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One clip as described by its key-value manifest. Paths are absolute
/// once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipManifest {
    pub fps: f64,
    pub black_level: u16,
    pub wb_ratios: (f64, f64),
    pub zoom_ratio: f64,
    pub scale_offset: f64,
    pub homography: Homography,
    pub correspondences: Option<PathBuf>,
    pub lr: Vec<PathBuf>,
    /// HR frames as captured, or already warped when `valid` is set.
    pub hr: Vec<PathBuf>,
    /// Misaligned HR frames kept beside aligned ones after preprocessing.
    pub captured: Vec<PathBuf>,
    /// Aligned ground truth (synthetic data only).
    pub truth: Vec<PathBuf>,
    /// Valid region of already-aligned HR frames.
    pub valid: Option<ValidRect>,
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned()
}

impl ClipManifest {
    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    pub fn is_aligned(&self) -> bool {
        self.valid.is_some()
    }

    pub fn to_kv(&self, dir: &Path) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("format", "stcl-clip");
        kv.set("frames", self.lr.len());
        kv.set("fps", fmt_f64(self.fps));
        kv.set("black_level", self.black_level);
        kv.set("wb_ratios", fmt_floats(&[self.wb_ratios.0, self.wb_ratios.1]));
        kv.set("zoom_ratio", fmt_f64(self.zoom_ratio));
        kv.set("scale_offset", fmt_f64(self.scale_offset));
        kv.set("homography", fmt_floats(self.homography.matrix()));
        if let Some(c) = &self.correspondences {
            kv.set("correspondences", rel(dir, c));
        }
        kv.set("aligned", self.valid.is_some());
        if let Some(v) = self.valid {
            kv.set("valid", format!("{} {} {} {}", v.x0, v.y0, v.x1, v.y1));
        }
        for (key, list) in [("lr", &self.lr), ("hr", &self.hr), ("captured", &self.captured), ("truth", &self.truth)] {
            for (i, p) in list.iter().enumerate() {
                kv.set(&format!("{}.{}", key, i), rel(dir, p));
            }
        }
        kv
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvMap::read(path)?;
        let fail = |e: Error| Error::format(path, e.to_string());
        if kv.get("format") != Some("stcl-clip") {
            return Err(Error::format(path, "not a clip manifest"));
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        let n: usize = kv.parse_required("frames").map_err(fail)?;
        let list = |key: &str, required: bool| -> Result<Vec<PathBuf>> {
            let mut out = Vec::new();
            for i in 0..n {
                match kv.get(&format!("{}.{}", key, i)) {
                    Some(p) => out.push(dir.join(p)),
                    None if required || !out.is_empty() => {
                        return Err(Error::format(path, format!("missing `{}.{}`", key, i)))
                    }
                    None => return Ok(out),
                }
            }
            Ok(out)
        };
        let floats = |key: &str, len: usize| -> Result<Vec<f64>> {
            let v = kv.floats(key).map_err(fail)?.ok_or_else(|| Error::format(path, format!("missing `{}`", key)))?;
            if v.len() != len {
                return Err(Error::format(path, format!("`{}` needs {} numbers", key, len)));
            }
            Ok(v)
        };
        let wb = floats("wb_ratios", 2)?;
        let hm: [f64; 9] = floats("homography", 9)?.try_into().expect("nine values");
        let aligned: bool = kv.parse("aligned").map_err(fail)?.unwrap_or(false);
        let valid = if aligned {
            let v: Vec<usize> = kv
                .require("valid")
                .map_err(fail)?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::format(path, "bad `valid` rectangle")))
                .collect::<Result<_>>()?;
            match v[..] {
                [x0, y0, x1, y1] => Some(ValidRect { x0, y0, x1, y1 }),
                _ => return Err(Error::format(path, "`valid` needs four integers")),
            }
        } else {
            None
        };
        Ok(Self {
            fps: kv.parse_required("fps").map_err(fail)?,
            black_level: kv.parse_required("black_level").map_err(fail)?,
            wb_ratios: (wb[0], wb[1]),
            zoom_ratio: kv.parse_required("zoom_ratio").map_err(fail)?,
            scale_offset: kv.parse("scale_offset").map_err(fail)?.unwrap_or(1.0),
            homography: Homography::new(hm).map_err(|e| Error::format(path, e.to_string()))?,
            correspondences: kv.get("correspondences").map(|p| dir.join(p)),
            lr: list("lr", true)?,
            hr: list("hr", true)?,
            captured: list("captured", false)?,
            truth: list("truth", false)?,
            valid,
        })
    }

    pub fn read_lr(&self, i: usize) -> Result<BayerFrame> {
        pnm::read_pgm16(&self.lr[i], self.black_level, self.wb_ratios)
    }

    /// Loads every frame into memory.
    pub fn load(&self) -> Result<ClipPair> {
        let lr_frames = (0..self.len()).map(|i| self.read_lr(i)).collect::<Result<Vec<_>>>()?;
        let hr_frames = self.hr.iter().map(|p| pnm::read_rgb(p)).collect::<Result<Vec<_>>>()?;
        let pair = ClipPair {
            lr_frames,
            hr_frames,
            fps: self.fps,
            homography: self.homography,
            scale_offset: self.scale_offset,
            zoom_ratio: self.zoom_ratio,
            valid: self.valid,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Homography from the stored correspondences, or the manifest's own when
    /// there are none.
    pub fn registration(&self) -> Result<Homography> {
        match &self.correspondences {
            Some(p) => Ok(estimate_homography(&read_correspondences(p)?)?.homography),
            None => Ok(self.homography),
        }
    }

    /// The clip with HR frames registered onto the LR field of view.
    pub fn load_aligned(&self, zoom: usize) -> Result<ClipPair> {
        let pair = self.load()?;
        if pair.valid.is_some() {
            return Ok(pair);
        }
        Ok(pair.aligned(&self.registration()?, zoom)?)
    }

    /// Frames for evaluation: LR cropped to the HR field of view, the aligned
    /// truth and the captured HR. Clips without truth are skipped.
    pub fn eval_frames(&self, label: &str) -> Result<Vec<EvalFrame>> {
        if self.truth.is_empty() {
            return Ok(Vec::new());
        }
        let captured = if self.captured.is_empty() { &self.hr } else { &self.captured };
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let lr = self.read_lr(i)?;
            let w = stcl_core::raw::fov_window(lr.width(), lr.height(), self.zoom_ratio)?;
            out.push(EvalFrame {
                label: format!("{}/{:03}", label, i),
                lr: lr.crop(w.x0, w.y0, w.width, w.height)?,
                truth: pnm::read_rgb(&self.truth[i])?,
                captured: pnm::read_rgb(&captured[i])?,
            });
        }
        Ok(out)
    }
}

pub fn write_correspondences(path: &Path, corr: &[Correspondence]) -> Result<()> {
    let mut s = String::from("# captured_x captured_y aligned_x aligned_y\n");
    for &((x, y), (u, v)) in corr {
        s.push_str(&fmt_floats(&[x, y, u, v]));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

pub fn read_correspondences(path: &Path) -> Result<Vec<Correspondence>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 text"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::format(path, format!("line {}: bad number `{}`", n + 1, t))))
            .collect::<Result<_>>()?;
        match v[..] {
            [x, y, u, w] => out.push(((x, y), (u, w))),
            _ => return Err(Error::format(path, format!("line {}: expected four numbers", n + 1))),
        }
    }
    Ok(out)
}

/// Dataset manifest: the generator settings plus clip list and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub path: PathBuf,
    pub clips: Vec<(Split, PathBuf)>,
    pub settings: KvMap,
}

impl Dataset {
    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvMap::read(path)?;
        if kv.get("format") != Some("stcl-dataset") {
            return Err(Error::format(path, "not a dataset manifest"));
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        let n: usize = kv.parse_required("clips").map_err(|e| Error::format(path, e.to_string()))?;
        let mut clips = Vec::with_capacity(n);
        for i in 0..n {
            let p = kv
                .get(&format!("clip.{}", i))
                .ok_or_else(|| Error::format(path, format!("missing `clip.{}`", i)))?;
            let s = kv
                .get(&format!("split.{}", i))
                .and_then(Split::parse)
                .ok_or_else(|| Error::format(path, format!("missing or bad `split.{}`", i)))?;
            clips.push((s, dir.join(p)));
        }
        Ok(Self {
            path: path.to_path_buf(),
            clips,
            settings: kv,
        })
    }

    pub fn write(&self) -> Result<()> {
        let dir = self.path.parent().unwrap_or(Path::new(""));
        let mut kv = KvMap::new();
        kv.set("format", "stcl-dataset");
        for (k, v) in self.settings.iter() {
            if !matches!(k, "format" | "clips") && !k.starts_with("clip.") && !k.starts_with("split.") {
                kv.set(k, v);
            }
        }
        kv.set("clips", self.clips.len());
        for (i, (s, p)) in self.clips.iter().enumerate() {
            kv.set(&format!("clip.{}", i), rel(dir, p));
            kv.set(&format!("split.{}", i), s.as_str());
        }
        kv.write(&self.path)
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &Path> {
        self.clips.iter().filter(move |(s, _)| *s == which).map(|(_, p)| p.as_path())
    }

    pub fn manifests(&self, which: Split) -> Result<Vec<ClipManifest>> {
        self.split(which).map(ClipManifest::read).collect()
    }

    /// Display label of a clip: its directory name.
    pub fn label(path: &Path) -> String {
        path.parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string_lossy().into_owned())
    }
}

/// Runs `f(t)` for `t in 0..n` on up to `available_parallelism` threads and
/// returns the results in order.
pub(crate) fn par_map<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let workers = thread::available_parallelism().map(|p| p.get()).unwrap_or(1).min(n.max(1));
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(workers).max(1)).enumerate() {
            let f = &f;
            let base = w * n.div_ceil(workers).max(1);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn write_clip(cfg: &GenConfig, i: usize, dir: &Path) -> Result<PathBuf> {
    let scene = cfg.scene(i);
    let cam = Camera::new(&scene, &cfg.rig)?;
    let captures: Vec<Capture> = par_map(cfg.frames, |t| cam.capture(t))
        .into_iter()
        .collect::<stcl_core::Result<_>>()?;
    let ext = cfg.hr_format.extension();
    let mut m = ClipManifest {
        fps: cfg.fps,
        black_level: cfg.rig.black_level,
        wb_ratios: cfg.rig.wb_ratios,
        zoom_ratio: cfg.rig.zoom_ratio as f64,
        scale_offset: 1.0,
        homography: cam.alignment().homography,
        correspondences: Some(dir.join("correspondences.txt")),
        lr: Vec::new(),
        hr: Vec::new(),
        captured: Vec::new(),
        truth: Vec::new(),
        valid: None,
    };
    for (t, cap) in captures.iter().enumerate() {
        let lr = dir.join(format!("lr_{:03}.pgm", t));
        let hr = dir.join(format!("hr_{:03}.{}", t, ext));
        let truth = dir.join(format!("truth_{:03}.{}", t, ext));
        pnm::write_pgm16(&lr, &cap.lr)?;
        pnm::write_rgb(&hr, &cap.hr)?;
        pnm::write_rgb(&truth, &cap.hr_aligned)?;
        m.lr.push(lr);
        m.hr.push(hr);
        m.truth.push(truth);
    }
    let corr = cam.alignment().correspondences;
    let corr = if cfg.corr_noise > 0.0 {
        perturb_correspondences(&corr, cfg.corr_noise, clip_seed(cfg.seed ^ 0xc0, i))?
    } else {
        corr
    };
    write_correspondences(m.correspondences.as_deref().expect("set above"), &corr)?;
    let path = dir.join("clip.kv");
    m.to_kv(dir).write(&path)?;
    Ok(path)
}

/// Renders every clip under `out` and writes `out/dataset.kv`.
pub fn generate_dataset(cfg: &GenConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let (train, val, _) = split_counts(cfg.scenes, cfg.split)?;
    let mut clips = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let dir = out.join("clips").join(format!("clip_{:03}", i));
        clips.push((split, write_clip(cfg, i, &dir)?));
    }
    let mut settings = KvMap::new();
    cfg.to_kv(&mut settings);
    let ds = Dataset {
        path: out.join("dataset.kv"),
        clips,
        settings,
    };
    ds.write()?;
    Ok(ds)
}

/// Registers every clip of `ds` and writes aligned copies under `out`.
pub fn preprocess(ds: &Dataset, out: &Path, zoom: usize) -> Result<Dataset> {
    let mut clips = Vec::with_capacity(ds.clips.len());
    for (split, path) in &ds.clips {
        let m = ClipManifest::read(path)?;
        let dir = out.join("clips").join(Dataset::label(path));
        let h = m.registration()?;
        let pair = m.load()?.aligned(&h, zoom)?;
        let copy = |src: &Path| -> Result<PathBuf> {
            let name = src.file_name().ok_or_else(|| Error::format(src, "no file name"))?;
            let dst = dir.join(name);
            write_file(&dst, &read_file(src)?)?;
            Ok(dst)
        };
        let mut hr = Vec::with_capacity(pair.len());
        for (t, img) in pair.hr_frames.iter().enumerate() {
            let p = dir.join(format!("aligned_{:03}.ppm", t));
            pnm::write_rgb(&p, img)?;
            hr.push(p);
        }
        let aligned = ClipManifest {
            homography: h,
            correspondences: m.correspondences.as_deref().map(copy).transpose()?,
            lr: m.lr.iter().map(|p| copy(p)).collect::<Result<_>>()?,
            captured: m.hr.iter().map(|p| copy(p)).collect::<Result<_>>()?,
            truth: m.truth.iter().map(|p| copy(p)).collect::<Result<_>>()?,
            hr,
            valid: pair.valid,
            ..m
        };
        let p = dir.join("clip.kv");
        aligned.to_kv(&dir).write(&p)?;
        clips.push((*split, p));
    }
    let mut settings = ds.settings.clone();
    settings.set("preprocessed_from", ds.path.to_string_lossy());
    settings.set("preprocess.zoom", zoom);
    let out_ds = Dataset {
        path: out.join("dataset.kv"),
        clips,
        settings,
    };
    out_ds.write()?;
    Ok(out_ds)
}

/// Reads a clip list as training pairs, registering unaligned clips.
pub fn load_training_clips(manifests: &[ClipManifest], zoom: usize) -> Result<Vec<ClipPair>> {
    manifests.iter().map(|m| m.load_aligned(zoom)).collect()
}


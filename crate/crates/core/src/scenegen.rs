//! Seeded synthetic street scenes: flat-colored class regions plus Gaussian
//! noise, with an exact ground-truth mask.

use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegMask;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const CROSSWALK: u8 = 3;
pub const VEHICLE: u8 = 4;
pub const OBSTACLE: u8 = 5;
pub const NUM_CLASSES: usize = 6;

const PALETTE: [[f32; 3]; NUM_CLASSES] = [
    [0.33, 0.47, 0.28],
    [0.30, 0.30, 0.32],
    [0.72, 0.66, 0.58],
    [0.93, 0.93, 0.90],
    [0.70, 0.12, 0.10],
    [0.18, 0.22, 0.78],
];

/// Vertical sidewalk strip. Its left edge sits at `start_col` on the bottom
/// row and bends quadratically by up to `curvature` pixels at the top row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripSpec {
    pub start_col: isize,
    pub width: usize,
    pub curvature: f64,
}

impl StripSpec {
    fn left_edge(&self, row: usize, height: usize) -> isize {
        if height < 2 {
            return self.start_col;
        }
        let t = (height - 1 - row) as f64 / (height - 1) as f64;
        self.start_col + (self.curvature * t * t).round() as isize
    }

    pub fn center(&self) -> f64 {
        self.start_col as f64 + self.width as f64 / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectSpec {
    pub row: isize,
    pub col: isize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub sidewalk: Option<StripSpec>,
    /// Road band as (first column, width); clipped to the frame.
    pub road: Option<(isize, usize)>,
    /// Crosswalk rows (first row, height) painted across the road band.
    pub crosswalk: Option<(usize, usize)>,
    pub vehicles: Vec<RectSpec>,
    /// Obstacles dropped at seeded positions on the sidewalk.
    pub obstacles: usize,
    pub obstacle_size: usize,
    pub noise: f32,
}

impl SceneSpec {
    pub fn plain(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            sidewalk: None,
            road: None,
            crosswalk: None,
            vehicles: Vec::new(),
            obstacles: 0,
            obstacle_size: 4,
            noise: 0.05,
        }
    }

    /// A varied but valid street layout drawn from `seed`.
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_E5EE_D000_0000);
        let sw_width = rng.random_range((width / 6).max(1)..=(width / 3).max(1));
        let bend_room = (width / 8) as i64;
        let curvature = rng.random_range(-bend_room..=bend_room) as isize;
        let lo = (-curvature).max(0);
        let hi = (width as isize - sw_width as isize - curvature.max(0)).max(lo);
        let start = rng.random_range(lo as i64..=hi as i64) as isize;
        let road_right = rng.random_bool(0.5);
        let road_w = rng.random_range(width / 5..=width / 2);
        let road = if road_right {
            (start + sw_width as isize + 2, road_w)
        } else {
            (start - 2 - road_w as isize, road_w)
        };
        let crosswalk = rng
            .random_bool(0.3)
            .then(|| (rng.random_range(0..height * 3 / 4), (height / 8).max(1)));
        let vehicles = (0..rng.random_range(0..=2))
            .map(|_| RectSpec {
                row: rng.random_range(0..height as i64) as isize,
                col: road.0 + rng.random_range(0..road_w.max(1)) as isize,
                height: rng.random_range(height / 10..=height / 4),
                width: rng.random_range(width / 12..=width / 6),
            })
            .collect();
        Self {
            seed,
            height,
            width,
            sidewalk: Some(StripSpec {
                start_col: start,
                width: sw_width,
                curvature: curvature as f64,
            }),
            road: Some(road),
            crosswalk,
            vehicles,
            obstacles: rng.random_range(0..=2),
            obstacle_size: (width / 16).max(1),
            noise: 0.05,
        }
    }

    /// Straight sidewalk a quarter of the frame wide with the road beside
    /// it. For a drift the strip starts in the outer third on the drift side
    /// with room for a dozen frames; otherwise it is centered.
    pub fn walk(seed: u64, height: usize, width: usize, drift: Drift) -> Self {
        let sw = (width / 4).max(1);
        let start = match drift {
            Drift::Left => 3 * width / 16,
            Drift::Right => width - 3 * width / 16 - sw,
            Drift::None => (width - sw) / 2,
        } as isize;
        let road = if matches!(drift, Drift::Right) {
            (0, (start - 1).max(0) as usize)
        } else {
            (start + sw as isize + 1, width)
        };
        Self {
            sidewalk: Some(StripSpec {
                start_col: start,
                width: sw,
                curvature: 0.0,
            }),
            road: Some(road),
            ..Self::plain(seed, height, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene must be at least 1x1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise amplitude {} must be >= 0", self.noise)));
        }
        if let Some(s) = &self.sidewalk {
            if s.width == 0 || s.width > self.width {
                return Err(Error::Config(format!(
                    "sidewalk width {} does not fit a {}-wide frame",
                    s.width, self.width
                )));
            }
            for row in 0..self.height {
                let left = s.left_edge(row, self.height);
                if left < 0 || left + s.width as isize > self.width as isize {
                    return Err(Error::Config(format!(
                        "sidewalk leaves the frame on row {row} (columns {left}..{})",
                        left + s.width as isize
                    )));
                }
            }
        }
        if self.obstacles > 0 && (self.sidewalk.is_none() || self.obstacle_size == 0) {
            return Err(Error::Config("obstacles need a sidewalk and a positive size".into()));
        }
        Ok(())
    }
}

fn fill(classes: &mut [u8], h: usize, w: usize, rect: &RectSpec, class: u8) {
    let r0 = rect.row.max(0) as usize;
    let c0 = rect.col.max(0) as usize;
    let r1 = (rect.row + rect.height as isize).clamp(0, h as isize) as usize;
    let c1 = (rect.col + rect.width as isize).clamp(0, w as isize) as usize;
    for r in r0..r1 {
        for c in c0..c1 {
            classes[r * w + c] = class;
        }
    }
}

/// Renders the scene: class layout first, then palette colors plus noise.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Tensor, SegMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut classes = vec![BACKGROUND; h * w];
    if let Some((col, width)) = spec.road {
        let road = RectSpec {
            row: 0,
            col,
            height: h,
            width,
        };
        fill(&mut classes, h, w, &road, ROAD);
        if let Some((row, height)) = spec.crosswalk {
            let band = RectSpec {
                row: row as isize,
                col,
                height,
                width,
            };
            fill(&mut classes, h, w, &band, CROSSWALK);
        }
        for v in &spec.vehicles {
            fill(&mut classes, h, w, v, VEHICLE);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if let Some(s) = &spec.sidewalk {
        for row in 0..h {
            let left = s.left_edge(row, h) as usize;
            classes[row * w + left..row * w + left + s.width].fill(SIDEWALK);
        }
        for _ in 0..spec.obstacles {
            let size = spec.obstacle_size.min(s.width).min(h);
            let row = rng.random_range(0..=h - size);
            let left = s.left_edge(row, h);
            let col = left + rng.random_range(0..=s.width - size) as isize;
            let rect = RectSpec {
                row: row as isize,
                col,
                height: size,
                width: size,
            };
            fill(&mut classes, h, w, &rect, OBSTACLE);
        }
    }
    let normal = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let n = h * w;
    let mut data = vec![0.0f32; 3 * n];
    for p in 0..n {
        let color = PALETTE[classes[p] as usize];
        for (ch, base) in color.iter().enumerate() {
            let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data[ch * n + p] = (base + noise).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new(vec![3, h, w], data)?;
    let mask = SegMask::new(h, w, classes, NUM_CLASSES)?;
    Ok((image, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drift {
    Left,
    Right,
    None,
}

impl std::str::FromStr for Drift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Drift::Left),
            "right" => Ok(Drift::Right),
            "none" => Ok(Drift::None),
            other => Err(Error::Config(format!("unknown drift {other:?}, expected left|right|none"))),
        }
    }
}

/// Columns the sidewalk moves per frame.
pub const DRIFT_STEP: isize = 1;

/// A frame sequence in which the whole street layout slides sideways by
/// `DRIFT_STEP` columns per frame.
pub fn generate_walk_sequence(spec: &SceneSpec, n_frames: usize, drift: Drift) -> Result<Vec<(Tensor, SegMask)>> {
    if n_frames == 0 {
        return Err(Error::Domain("a walk needs at least one frame".into()));
    }
    let dir = match drift {
        Drift::Left => -1,
        Drift::Right => 1,
        Drift::None => 0,
    };
    (0..n_frames)
        .map(|i| {
            let shift = dir * DRIFT_STEP * i as isize;
            let mut frame = spec.clone();
            if let Some(s) = frame.sidewalk.as_mut() {
                s.start_col += shift;
            }
            if let Some(r) = frame.road.as_mut() {
                r.0 += shift;
            }
            for v in &mut frame.vehicles {
                v.col += shift;
            }
            generate_scene(&frame)
        })
        .collect()
}

/// `n` random-layout scenes, seeds `seed..seed + n`.
pub fn scene_set(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<(Tensor, SegMask)>> {
    (0..n as u64)
        .map(|i| generate_scene(&SceneSpec::random(seed + i, height, width)))
        .collect()
}

pub fn calibration_set(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<Tensor>> {
    Ok(scene_set(seed, n, height, width)?.into_iter().map(|(img, _)| img).collect())
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes a `[3,H,W]` image in `[0,1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.dims3("ppm image")?;
    if c != 3 {
        return Err(crate::error::dim_err("ppm channels", 3, c));
    }
    let n = h * w;
    let d = image.data();
    let mut buf = Vec::with_capacity(3 * n);
    for p in 0..n {
        for ch in 0..3 {
            buf.push((d[ch * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = std::fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

/// Writes class ids as a binary PGM.
pub fn write_pgm(path: &Path, mask: &SegMask) -> Result<()> {
    let file = std::fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(mask.classes(), mask.width() as u32, mask.height() as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0f32; 3 * n];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + p] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_pgm(path: &Path, num_classes: usize) -> Result<SegMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    SegMask::new(h, w, img.into_raw(), num_classes)
}

pub fn scene_file_stem(seed: u64, index: usize) -> String {
    format!("scene_{seed}_{index}")
}

/// Writes `scene_<seed>_<index>.ppm` and `.pgm` into `dir`.
pub fn write_scene_files(dir: &Path, seed: u64, index: usize, image: &Tensor, mask: &SegMask) -> Result<(PathBuf, PathBuf)> {
    let stem = scene_file_stem(seed, index);
    let ppm = dir.join(format!("{stem}.ppm"));
    let pgm = dir.join(format!("{stem}.pgm"));
    write_ppm(&ppm, image)?;
    write_pgm(&pgm, mask)?;
    Ok((ppm, pgm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip_scene(start: isize, width: usize) -> SceneSpec {
        SceneSpec {
            sidewalk: Some(StripSpec {
                start_col: start,
                width,
                curvature: 0.0,
            }),
            ..SceneSpec::plain(3, 64, 64)
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::random(42, 64, 64);
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = generate_scene(&SceneSpec::random(43, 64, 64)).unwrap();
        assert_ne!(other, generate_scene(&spec).unwrap());
    }

    #[test]
    fn sidewalk_count_matches_geometry() {
        let (img, mask) = generate_scene(&strip_scene(10, 8)).unwrap();
        assert_eq!(mask.count(SIDEWALK), 8 * 64);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for r in 0..64 {
            assert_eq!(mask.get(r, 9), BACKGROUND);
            assert_eq!(mask.get(r, 10), SIDEWALK);
            assert_eq!(mask.get(r, 17), SIDEWALK);
            assert_eq!(mask.get(r, 18), BACKGROUND);
        }
    }

    #[test]
    fn no_obstacles_means_no_obstacle_class() {
        for seed in 0..20 {
            let mut spec = SceneSpec::random(seed, 64, 64);
            spec.obstacles = 0;
            let (_, mask) = generate_scene(&spec).unwrap();
            assert_eq!(mask.count(OBSTACLE), 0);
            assert!(mask.count(SIDEWALK) > 0);
        }
    }

    #[test]
    fn random_layouts_are_valid() {
        for seed in 0..200 {
            let spec = SceneSpec::random(seed, 64, 64);
            spec.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn oversize_layouts_rejected() {
        assert!(matches!(generate_scene(&strip_scene(0, 65)), Err(Error::Config(_))));
        assert!(matches!(generate_scene(&strip_scene(60, 8)), Err(Error::Config(_))));
        let mut bent = strip_scene(50, 8);
        bent.sidewalk.as_mut().unwrap().curvature = 10.0;
        assert!(matches!(generate_scene(&bent), Err(Error::Config(_))));
    }

    #[test]
    fn walk_sequences() {
        let spec = strip_scene(30, 10);
        let still = generate_walk_sequence(&spec, 4, Drift::None).unwrap();
        assert!(still.windows(2).all(|w| w[0] == w[1]));

        let left = generate_walk_sequence(&spec, 10, Drift::Left).unwrap();
        let centers: Vec<f64> = left
            .iter()
            .map(|(_, m)| {
                let cols: Vec<usize> = (0..64).filter(|&c| m.get(63, c) == SIDEWALK).collect();
                cols.iter().sum::<usize>() as f64 / cols.len() as f64
            })
            .collect();
        assert!(centers.windows(2).all(|w| w[1] < w[0]), "{centers:?}");
        assert!(generate_walk_sequence(&spec, 0, Drift::Left).is_err());
        for drift in [Drift::Left, Drift::Right, Drift::None] {
            assert_eq!(generate_walk_sequence(&SceneSpec::walk(1, 64, 64, drift), 12, drift).unwrap().len(), 12);
        }
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mask) = generate_scene(&SceneSpec::random(5, 64, 64)).unwrap();
        let (ppm, pgm) = write_scene_files(dir.path(), 5, 2, &img, &mask).unwrap();
        assert!(ppm.ends_with("scene_5_2.ppm") && pgm.ends_with("scene_5_2.pgm"));
        assert_eq!(read_pgm(&pgm, NUM_CLASSES).unwrap(), mask);
        let back = read_ppm(&ppm).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

//! Synthetic indoor scenes: a back wall, a ground plane receding to a horizon,
//! and textured objects standing on the floor, rendered through a depth-dependent
//! haze with a z-buffer.
//!
//! An object's class is fixed by the depth band it stands in; its shape, colour,
//! texture and physical size are drawn independently of the class. Each image
//! has its own random stream, so a smaller dataset is a prefix of a larger one
//! with the same seed.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth_io::{
    read_depth_pgm, read_label_pgm, read_ppm, write_depth_pgm, write_label_pgm, write_ppm, DepthMap, RgbImage,
};
use crate::error::{Error, Result};
use crate::eval::{BBox, GroundTruth};

/// Depth of the back wall.
pub const FAR_DEPTH: f64 = 8.0;
const HORIZON: f64 = 0.3;
const VANISHING: f64 = 0.18;
/// Nearest row an object may stand on, as a fraction of the height.
const PLACEMENT_TOP: f64 = 0.42;
const HAZE: [f64; 3] = [0.80, 0.82, 0.86];
const HAZE_DENSITY: f64 = 0.45;
const NOISE: f64 = 0.015;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    /// 1-based class.
    pub class: usize,
    pub bbox: BBox,
    /// Shape mask over the whole image (before occlusion).
    pub mask: Vec<bool>,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub objects: Vec<ObjectInstance>,
    /// Per-pixel class of the visible surface, 0 for background.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub seed: u64,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn height(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.image.height)
    }

    pub fn width(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.image.width)
    }

    pub fn ground_truths(&self, range: std::ops::Range<usize>) -> Vec<GroundTruth> {
        range
            .flat_map(|i| {
                self.scenes[i].objects.iter().map(move |o| GroundTruth {
                    image_id: i,
                    class: o.class,
                    bbox: o.bbox,
                })
            })
            .collect()
    }
}

/// Floor depth at normalized image height `y` (0 top, 1 bottom) below the horizon.
pub fn floor_depth(y: f64) -> f64 {
    FAR_DEPTH * (HORIZON - VANISHING) / (y - VANISHING)
}

fn row_y(r: usize, h: usize) -> f64 {
    (r as f64 + 0.5) / h as f64
}

/// Depth of the empty room at pixel row `r`.
pub fn background_depth(r: usize, h: usize) -> f64 {
    let y = row_y(r, h);
    if y < HORIZON {
        FAR_DEPTH
    } else {
        floor_depth(y).min(FAR_DEPTH)
    }
}

/// Log-depth interval `[lo, hi)` of class `k` (1-based) among `n`; class 1 is nearest.
pub fn class_band(k: usize, n: usize) -> (f64, f64) {
    let near = floor_depth(1.0).ln();
    let far = floor_depth(PLACEMENT_TOP).ln();
    let step = (far - near) / n as f64;
    (near + (k - 1) as f64 * step, near + k as f64 * step)
}

/// Class whose depth band contains `depth` (clamped to the outer bands).
pub fn class_for_depth(depth: f64, n: usize) -> usize {
    let near = floor_depth(1.0).ln();
    let far = floor_depth(PLACEMENT_TOP).ln();
    let t = (depth.ln() - near) / (far - near);
    ((t * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize + 1
}

fn haze(colour: [f64; 3], depth: f64) -> [f64; 3] {
    let t = (-HAZE_DENSITY * depth).exp();
    [0, 1, 2].map(|k| colour[k] * t + HAZE[k] * (1.0 - t))
}

fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Stripes { vertical: bool, period: usize, amplitude: f64 },
    Checker { size: usize, amplitude: f64 },
    Plain,
}

impl Texture {
    fn random(rng: &mut impl Rng) -> Self {
        let amplitude = rng.gen_range(0.05..0.2);
        match rng.gen_range(0..3) {
            0 => Texture::Stripes {
                vertical: rng.gen(),
                period: rng.gen_range(2..5),
                amplitude,
            },
            1 => Texture::Checker {
                size: rng.gen_range(1..4),
                amplitude,
            },
            _ => Texture::Plain,
        }
    }

    fn offset(&self, r: usize, c: usize) -> f64 {
        match *self {
            Texture::Stripes {
                vertical,
                period,
                amplitude,
            } => {
                let v = if vertical { c } else { r };
                if (v / period) % 2 == 0 {
                    amplitude
                } else {
                    -amplitude
                }
            }
            Texture::Checker { size, amplitude } => {
                if (r / size + c / size).is_multiple_of(2) {
                    amplitude
                } else {
                    -amplitude
                }
            }
            Texture::Plain => 0.0,
        }
    }
}

struct Placed {
    object: ObjectInstance,
    colour: [f64; 3],
    texture: Texture,
}

fn place_object(rng: &mut impl Rng, h: usize, w: usize, num_classes: usize) -> Option<Placed> {
    let class = rng.gen_range(1..=num_classes);
    let (lo, hi) = class_band(class, num_classes);
    let margin = 0.1 * (hi - lo);
    let rows: Vec<usize> = (0..h)
        .filter(|&r| {
            let y = row_y(r, h);
            y >= PLACEMENT_TOP && {
                let l = floor_depth(y).ln();
                l >= lo + margin && l < hi - margin
            }
        })
        .collect();
    let bottom = if rows.is_empty() {
        let mid = ((lo + hi) / 2.0).exp();
        (0..h).filter(|&r| row_y(r, h) >= PLACEMENT_TOP).min_by(|&a, &b| {
            (floor_depth(row_y(a, h)) - mid)
                .abs()
                .total_cmp(&(floor_depth(row_y(b, h)) - mid).abs())
        })?
    } else {
        rows[rng.gen_range(0..rows.len())]
    };
    let depth = floor_depth(row_y(bottom, h));

    let focal = 0.45 * h as f64;
    let size: f64 = rng.gen_range(0.5..1.0);
    let max_h = (0.45 * h as f64) as usize;
    let max_w = (0.45 * w as f64) as usize;
    let ph = ((focal * size / depth).round() as usize)
        .clamp(4, max_h.max(4))
        .min(bottom + 1);
    let aspect: f64 = rng.gen_range(0.6..1.5);
    let pw = ((ph as f64 * aspect).round() as usize).clamp(4, max_w.max(4));
    let c0 = rng.gen_range(0..=w - pw);
    let r0 = bottom + 1 - ph;
    let ellipse: bool = rng.gen();

    let mut mask = vec![false; h * w];
    let (cy, cx) = (r0 as f64 + ph as f64 / 2.0, c0 as f64 + pw as f64 / 2.0);
    for r in r0..=bottom {
        for c in c0..c0 + pw {
            let inside = !ellipse || {
                let dy = (r as f64 + 0.5 - cy) / (ph as f64 / 2.0);
                let dx = (c as f64 + 0.5 - cx) / (pw as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            };
            mask[r * w + c] = inside;
        }
    }
    let colour = [0, 1, 2].map(|_| rng.gen_range(0.05..0.95));
    Some(Placed {
        object: ObjectInstance {
            class,
            bbox: [c0 as f64, r0 as f64, (c0 + pw) as f64, (bottom + 1) as f64],
            mask,
            depth,
        },
        colour,
        texture: Texture::random(rng),
    })
}

/// Renders scene `index` of the dataset with `seed`.
pub fn generate_scene(index: usize, num_classes: usize, seed: u64, height: usize, width: usize) -> Result<SyntheticScene> {
    if num_classes == 0 || num_classes > 254 {
        return Err(Error::Argument(format!("num_classes must be in [1, 254], got {num_classes}")));
    }
    if height < 16 || width < 16 {
        return Err(Error::Argument(format!(
            "scenes need at least 16x16 pixels, got {height}x{width}"
        )));
    }
    let (h, w) = (height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let wall = [0, 1, 2].map(|_| rng.gen_range(0.25..0.75));
    let floor = [0, 1, 2].map(|_| rng.gen_range(0.2..0.8));
    let floor_period: f64 = rng.gen_range(0.6..1.0);
    let wall_texture = Texture::random(&mut rng);

    let wanted = rng.gen_range(1..=3);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..20 * wanted {
        if placed.len() == wanted {
            break;
        }
        if let Some(p) = place_object(&mut rng, h, w, num_classes) {
            let clash = placed.iter().any(|q| crate::eval::iou(&q.object.bbox, &p.object.bbox) > 0.25);
            if !clash {
                placed.push(p);
            }
        }
    }
    if placed.is_empty() {
        return Err(Error::Data("could not place any object".into()));
    }

    let mut depth = vec![0.0; h * w];
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            depth[i] = background_depth(r, h);
            for (k, p) in placed.iter().enumerate() {
                if p.object.mask[i] && p.object.depth < depth[i] {
                    depth[i] = p.object.depth;
                    owner[i] = Some(k);
                }
            }
        }
    }

    let mut image = RgbImage::new(h, w);
    let mut labels = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let base = match owner[i] {
                Some(k) => {
                    labels[i] = placed[k].object.class as u8;
                    let t = placed[k].texture.offset(r, c);
                    placed[k].colour.map(|v| v + t)
                }
                None if row_y(r, h) < HORIZON => {
                    let t = wall_texture.offset(r, c) * 0.5;
                    wall.map(|v| v + t)
                }
                None => {
                    let band = if (depth[i] / floor_period).floor() as i64 % 2 == 0 {
                        0.06
                    } else {
                        -0.06
                    };
                    floor.map(|v| v + band)
                }
            };
            let hazed = haze(base, depth[i]);
            image.set(r, c, hazed.map(|v| (v + NOISE * gauss(&mut rng)).clamp(0.0, 1.0)));
        }
    }

    Ok(SyntheticScene {
        image,
        depth: DepthMap::new(h, w, depth)?,
        objects: placed.into_iter().map(|p| p.object).collect(),
        labels,
    })
}

pub fn generate_synthetic(num_images: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    generate_synthetic_sized(num_images, num_classes, seed, 32, 32)
}

pub fn generate_synthetic_sized(
    num_images: usize,
    num_classes: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Dataset> {
    if num_images == 0 {
        return Err(Error::Argument("num_images must be at least 1".into()));
    }
    let scenes = (0..num_images)
        .map(|i| generate_scene(i, num_classes, seed, height, width))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        num_classes,
        seed,
        scenes,
    })
}

fn image_name(i: usize) -> String {
    format!("{i:05}")
}

/// Writes `meta.txt`, `objects.csv` and `rgb/`, `depth/` (16-bit millimetres),
/// `labels/` netpbm files.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["rgb", "depth", "labels"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(
        dir.join("meta.txt"),
        format!(
            "images = {}\nclasses = {}\nseed = {}\nheight = {}\nwidth = {}\n",
            data.scenes.len(),
            data.num_classes,
            data.seed,
            data.height(),
            data.width()
        ),
    )?;
    let mut objects = fs::File::create(dir.join("objects.csv"))?;
    writeln!(objects, "image_id,class,x1,y1,x2,y2,depth")?;
    for (i, s) in data.scenes.iter().enumerate() {
        for o in &s.objects {
            let [x1, y1, x2, y2] = o.bbox;
            writeln!(objects, "{i},{},{x1},{y1},{x2},{y2},{}", o.class, o.depth)?;
        }
        let name = image_name(i);
        write_ppm(fs::File::create(dir.join("rgb").join(format!("{name}.ppm")))?, &s.image)?;
        write_depth_pgm(fs::File::create(dir.join("depth").join(format!("{name}.pgm")))?, &s.depth)?;
        write_label_pgm(
            fs::File::create(dir.join("labels").join(format!("{name}.pgm")))?,
            s.image.height,
            s.image.width,
            &s.labels,
        )?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Object masks are rebuilt from
/// the label map, so they cover visible pixels only.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = fs::read_to_string(dir.join("meta.txt")).map_err(|e| {
        Error::Data(format!(
            "{}: no dataset here ({e}); create one with `depthfuse gen-data`",
            dir.display()
        ))
    })?;
    let mut images = None;
    let mut classes = None;
    let mut seed = 0;
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v = v.trim();
            match k.trim() {
                "images" => images = v.parse::<usize>().ok(),
                "classes" => classes = v.parse::<usize>().ok(),
                "seed" => seed = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }
    let (images, num_classes) = images
        .zip(classes)
        .ok_or_else(|| Error::Data("meta.txt must give images and classes".into()))?;

    let mut scenes = Vec::with_capacity(images);
    for i in 0..images {
        let name = image_name(i);
        let image = read_ppm(&fs::read(dir.join("rgb").join(format!("{name}.ppm")))?)?;
        let depth = read_depth_pgm(&fs::read(dir.join("depth").join(format!("{name}.pgm")))?)?;
        let (_, _, labels) = read_label_pgm(&fs::read(dir.join("labels").join(format!("{name}.pgm")))?)?;
        scenes.push(SyntheticScene {
            image,
            depth,
            objects: Vec::new(),
            labels,
        });
    }

    let reader = BufReader::new(fs::File::open(dir.join("objects.csv"))?);
    let mut offset = 0;
    for line in reader.lines() {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        if line.starts_with("image_id") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |k: usize| -> Result<f64> {
            f.get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::parse(start, format!("objects.csv: bad field {k}")))
        };
        let (i, class) = (num(0)? as usize, num(1)? as usize);
        let bbox = [num(2)?, num(3)?, num(4)?, num(5)?];
        let depth = num(6)?;
        let scene = scenes
            .get_mut(i)
            .ok_or_else(|| Error::parse(start, format!("objects.csv refers to image {i}")))?;
        let (h, w) = (scene.image.height, scene.image.width);
        let mut mask = vec![false; h * w];
        for r in (bbox[1] as usize)..(bbox[3] as usize).min(h) {
            for c in (bbox[0] as usize)..(bbox[2] as usize).min(w) {
                mask[r * w + c] = scene.labels[r * w + c] as usize == class;
            }
        }
        scene.objects.push(ObjectInstance {
            class,
            bbox,
            mask,
            depth,
        });
    }
    Ok(Dataset {
        num_classes,
        seed,
        scenes,
    })
}

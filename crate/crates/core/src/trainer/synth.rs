//! Synthetic shape dataset: circles, squares, and triangles on noise
//! backgrounds, with exact bounding boxes. Deterministic per (n, seed).

use crate::netdef::GroundTruth;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// One labeled image: (1, 3, H, W) pixels in [0, 1] plus ground-truth boxes
/// fully inside the canvas.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
}

impl SynthSample {
    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }
}

const CLASS_CIRCLE: usize = 0;
const CLASS_SQUARE: usize = 1;
const CLASS_TRIANGLE: usize = 2;

fn put_pixel(img: &mut [f32], hw: (usize, usize), x: usize, y: usize, color: [f32; 3], noise: f32) {
    let (h, w) = hw;
    for (c, &v) in color.iter().enumerate() {
        img[(c * h + y) * w + x] = (v + noise).clamp(0.0, 1.0);
    }
}

/// Draw one shape and return its exact bounding box.
fn draw_shape(
    img: &mut [f32],
    hw: (usize, usize),
    class_id: usize,
    cx: f32,
    cy: f32,
    half: f32,
    color: [f32; 3],
    rng: &mut Rng,
) -> GroundTruth {
    let (h, w) = hw;
    let (x1, y1, x2, y2) = (cx - half, cy - half, cx + half, cy + half);
    let xi0 = x1.floor().max(0.0) as usize;
    let yi0 = y1.floor().max(0.0) as usize;
    let xi1 = (x2.ceil() as usize).min(w - 1);
    let yi1 = (y2.ceil() as usize).min(h - 1);
    for y in yi0..=yi1 {
        for x in xi0..=xi1 {
            // sample at the pixel center
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            let inside = match class_id {
                CLASS_CIRCLE => {
                    (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half
                }
                CLASS_SQUARE => (px - cx).abs() <= half && (py - cy).abs() <= half,
                CLASS_TRIANGLE => {
                    // upward triangle: apex (cx, cy-half), base y = cy+half
                    let v = (py - (cy - half)) / (2.0 * half);
                    v >= 0.0 && v <= 1.0 && (px - cx).abs() <= v * half
                }
                _ => unreachable!("three shape classes"),
            };
            if inside {
                let noise = rng.range(-0.04, 0.04) as f32;
                put_pixel(img, hw, x, y, color, noise);
            }
        }
    }
    GroundTruth {
        x1,
        y1,
        x2,
        y2,
        class_id,
    }
}

fn boxes_iou(a: &GroundTruth, b: &GroundTruth) -> f32 {
    crate::netdef::iou_xyxy(a.corners(), b.corners())
}

/// Generate one sample at the given square size.
fn gen_sample(size: usize, num_classes: usize, rng: &mut Rng) -> SynthSample {
    let hw = (size, size);
    let base = rng.range(0.15, 0.45) as f32;
    let mut img = vec![0.0f32; 3 * size * size];
    for v in img.iter_mut() {
        *v = (base + rng.range(-0.08, 0.08) as f32).clamp(0.0, 1.0);
    }

    let target = rng.int_range(1, 5);
    let mut gts: Vec<GroundTruth> = Vec::new();
    let min_half = (size as f32 * 0.09).max(3.0);
    let max_half = size as f32 * 0.22;
    for _ in 0..target {
        // a few placement attempts; crowded canvases may stay below target
        for _attempt in 0..10 {
            let half = rng.range(min_half as f64, max_half as f64) as f32;
            let cx = rng.range(half as f64 + 1.0, size as f64 - half as f64 - 1.0) as f32;
            let cy = rng.range(half as f64 + 1.0, size as f64 - half as f64 - 1.0) as f32;
            let class_id = rng.below(num_classes);
            let candidate = GroundTruth {
                x1: cx - half,
                y1: cy - half,
                x2: cx + half,
                y2: cy + half,
                class_id,
            };
            if gts.iter().any(|g| boxes_iou(g, &candidate) > 0.25) {
                continue;
            }
            // bright, saturated color well separated from the background
            let hue = rng.below(3);
            let mut color = [base * 0.5; 3];
            color[hue] = rng.range(0.75, 1.0) as f32;
            color[(hue + 1) % 3] = rng.range(0.0, 0.35) as f32;
            let gt = draw_shape(&mut img, hw, class_id, cx, cy, half, color, rng);
            gts.push(gt);
            break;
        }
    }
    let image = Tensor::new(Shape::new(1, 3, size, size), img).expect("sized buffer");
    SynthSample { image, gts }
}

/// Deterministic dataset: same (n, seed, size) reproduces bit-identical
/// samples. Every ground truth lies fully inside the image; each image
/// holds one to five shapes.
pub fn gen_synth_dataset(n: usize, seed: u64, num_classes: usize, size: usize) -> Vec<SynthSample> {
    assert!(n >= 1, "dataset needs at least one sample");
    assert!(num_classes >= 1 && num_classes <= 3, "three shape classes available");
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut local = rng.fork(i as u64);
            gen_sample(size, num_classes, &mut local)
        })
        .collect()
}

/// Cache a dataset as one container file per sample (image tensor plus a
/// (n_gt, 5, 1, 1) box tensor of x1, y1, x2, y2, class).
pub fn save_dataset(dir: &std::path::Path, samples: &[SynthSample]) -> crate::error::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let mut boxes = Vec::with_capacity(s.gts.len() * 5);
        for g in &s.gts {
            boxes.extend_from_slice(&[g.x1, g.y1, g.x2, g.y2, g.class_id as f32]);
        }
        let c = crate::netdef::Container {
            meta: vec![
                ("kind".into(), "synth-sample".into()),
                ("gts".into(), format!("{}", s.gts.len())),
            ],
            tensors: vec![
                ("image".into(), s.image.clone()),
                (
                    "boxes".into(),
                    Tensor::new(Shape::new(s.gts.len().max(1), 5, 1, 1), {
                        let mut b = boxes;
                        if s.gts.is_empty() {
                            b = vec![0.0; 5];
                        }
                        b
                    })?,
                ),
            ],
        };
        crate::netdef::save_container(&c, &dir.join(format!("sample_{i:05}.rdet")))?;
    }
    Ok(())
}

/// Load a cached dataset; samples come back in index order, bit-identical
/// to what was saved.
pub fn load_dataset(dir: &std::path::Path) -> crate::error::Result<Vec<SynthSample>> {
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "rdet"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for path in names {
        let c = crate::netdef::load_container(&path)?;
        if c.meta_get("kind") != Some("synth-sample") {
            return Err(crate::error::Error::Format {
                msg: format!("{} is not a cached sample", path.display()),
            });
        }
        let n_gts: usize = c
            .meta_get("gts")
            .and_then(|v| v.parse().ok())
            .ok_or(crate::error::Error::Format {
                msg: "missing gts count".into(),
            })?;
        let find = |name: &str| {
            c.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or(crate::error::Error::Format {
                    msg: format!("missing tensor `{name}`"),
                })
        };
        let image = find("image")?;
        let boxes = find("boxes")?;
        let gts = (0..n_gts)
            .map(|i| {
                let row = &boxes.data()[i * 5..][..5];
                GroundTruth {
                    x1: row[0],
                    y1: row[1],
                    x2: row[2],
                    y2: row[3],
                    class_id: row[4] as usize,
                }
            })
            .collect();
        out.push(SynthSample { image, gts });
    }
    Ok(out)
}

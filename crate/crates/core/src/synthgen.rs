//! Procedural paired-modality scenes with exact segmentation ground truth.
//!
//! Each class has one shape family. Shapes are placed without overlap (their
//! bounding boxes stay at least one unit apart), rasterized into the map,
//! and rendered to RGB from palette colors and to IR from palette
//! intensities, plus per-pixel uniform noise. Rendered values are quantized
//! to 8-bit levels so scenes survive a PPM/PGM round trip unchanged.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::metrics::BoundingBox;
use crate::neural::SeededRng;
use crate::segmap::{ClassPalette, SegMap, SegMapError};

/// Full restarts of a scene's placement before giving up.
const PLACEMENT_RESTARTS: usize = 50;
/// Position draws per shape within one restart.
const POSITION_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {count} non-overlapping shapes in {width}x{height} (seed {seed})")]
    PlacementFailure {
        count: usize,
        width: usize,
        height: usize,
        seed: u64,
    },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    SegMap(#[from] SegMapError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Inclusive `(min, max)` number of shapes.
    pub object_count_range: (usize, usize),
    /// Non-background classes shapes are drawn from, uniformly.
    pub classes_in_use: Vec<u8>,
    /// Half-width of the uniform per-pixel noise, in `[0, 0.1]`.
    pub noise_level: f32,
    pub palette: ClassPalette,
}

impl SceneSpec {
    /// All eight obstacle classes, 1 to 4 shapes, light noise.
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        let palette = ClassPalette::urban();
        Self {
            seed,
            width,
            height,
            object_count_range: (1, 4),
            classes_in_use: (1..palette.num_classes()).collect(),
            noise_level: 0.03,
            palette,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.width % 4 != 0 || self.height % 4 != 0 {
            return bad(format!("{}x{} is not a positive multiple of 4", self.width, self.height));
        }
        if self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return bad(format!("{}x{} exceeds the wire format", self.width, self.height));
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi {
            return bad(format!("object count range ({lo}, {hi})"));
        }
        if hi > 0 && self.classes_in_use.is_empty() {
            return bad("no classes in use".into());
        }
        for &c in &self.classes_in_use {
            if c == 0 || c >= self.palette.num_classes() {
                return bad(format!("class {c} is background or outside the palette"));
            }
        }
        if !(0.0..=0.1).contains(&self.noise_level) {
            return bad(format!("noise level {}", self.noise_level));
        }
        Ok(())
    }
}

/// Shape family drawn for a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    /// Wide rectangle (car).
    Rectangle,
    /// Tall ellipse (person).
    TallEllipse,
    /// Diamond (bike).
    Diamond,
    /// Wide flat bar (curve).
    WideBar,
    /// Square (car stop).
    Square,
    /// Tall bar (guardrail).
    TallBar,
    /// Disc (color cone).
    Disc,
    /// Flat ellipse (bump).
    FlatEllipse,
}

impl ShapeKind {
    const ALL: [ShapeKind; 8] = [
        ShapeKind::Rectangle,
        ShapeKind::TallEllipse,
        ShapeKind::Diamond,
        ShapeKind::WideBar,
        ShapeKind::Square,
        ShapeKind::TallBar,
        ShapeKind::Disc,
        ShapeKind::FlatEllipse,
    ];

    /// Class `c` (1-based) maps to the `c - 1`th family, cycling.
    pub fn for_class(class: u8) -> Self {
        Self::ALL[(class as usize + Self::ALL.len() - 1) % Self::ALL.len()]
    }

    /// Ranges of (width, height) in units of `min(W, H) / 32` pixels.
    fn size_range(self) -> ((f64, f64), (f64, f64)) {
        match self {
            ShapeKind::Rectangle => ((10.0, 13.0), (6.0, 8.0)),
            ShapeKind::TallEllipse => ((7.0, 9.0), (11.0, 13.0)),
            ShapeKind::Diamond => ((8.0, 10.0), (8.0, 10.0)),
            ShapeKind::WideBar => ((12.0, 15.0), (5.0, 6.0)),
            ShapeKind::Square => ((7.0, 9.0), (7.0, 9.0)),
            ShapeKind::TallBar => ((5.0, 6.0), (11.0, 14.0)),
            ShapeKind::Disc => ((7.0, 9.0), (7.0, 9.0)),
            ShapeKind::FlatEllipse => ((12.0, 14.0), (6.0, 7.0)),
        }
    }

    /// Whether the pixel centre `(u, v)`, in coordinates normalized to
    /// `[-1, 1]` across the shape's box, lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle | ShapeKind::WideBar | ShapeKind::Square | ShapeKind::TallBar => {
                true
            }
            ShapeKind::TallEllipse | ShapeKind::Disc | ShapeKind::FlatEllipse => {
                u * u + v * v <= 1.0
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// One shape placed by the generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub class: u8,
    pub kind: ShapeKind,
    /// Tight bounds of the rasterized pixels.
    pub bbox: BoundingBox,
    pub pixels: usize,
}

/// A segmentation map with its two co-registered renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub seg: SegMap,
    pub rgb: Image,
    pub ir: Image,
}

struct Candidate {
    class: u8,
    kind: ShapeKind,
    w: usize,
    h: usize,
}

fn draw_candidates(spec: &SceneSpec, rng: &mut SeededRng) -> Vec<Candidate> {
    let (lo, hi) = spec.object_count_range;
    let count = rng.range_inclusive(lo, hi);
    let unit = spec.width.min(spec.height) as f64 / 32.0;
    let mut out: Vec<Candidate> = (0..count)
        .map(|_| {
            let class = spec.classes_in_use[rng.below(spec.classes_in_use.len())];
            let kind = ShapeKind::for_class(class);
            let ((wl, wh), (hl, hh)) = kind.size_range();
            let w = (rng.uniform_range(wl, wh) * unit).round().max(3.0) as usize;
            let h = (rng.uniform_range(hl, hh) * unit).round().max(3.0) as usize;
            Candidate {
                class,
                kind,
                w: w.min(spec.width),
                h: h.min(spec.height),
            }
        })
        .collect();
    // Largest first; stable so equal areas keep draw order.
    out.sort_by_key(|c| std::cmp::Reverse(c.w * c.h));
    out
}

fn try_place(
    spec: &SceneSpec,
    cands: &[Candidate],
    gap: usize,
    rng: &mut SeededRng,
) -> Option<Vec<BoundingBox>> {
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(cands.len());
    for c in cands {
        let mut placed = None;
        for _ in 0..POSITION_ATTEMPTS {
            let x0 = rng.below(spec.width - c.w + 1);
            let y0 = rng.below(spec.height - c.h + 1);
            let b = BoundingBox::new(x0, y0, x0 + c.w - 1, y0 + c.h - 1);
            if boxes.iter().all(|o| !o.near(&b, gap)) {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed?);
    }
    Some(boxes)
}

/// Generates a scene and the generator's own placement log.
pub fn gen_scene_logged(spec: &SceneSpec) -> Result<(ScenePair, Vec<Placement>)> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let cands = draw_candidates(spec, &mut rng);
    let gap = (spec.width.min(spec.height) / 32).max(1);
    let boxes = (0..PLACEMENT_RESTARTS)
        .find_map(|_| try_place(spec, &cands, gap, &mut rng))
        .ok_or(SynthError::PlacementFailure {
            count: cands.len(),
            width: spec.width,
            height: spec.height,
            seed: spec.seed,
        })?;

    let mut labels = vec![0u8; spec.width * spec.height];
    let mut placements = Vec::with_capacity(cands.len());
    for (c, b) in cands.iter().zip(&boxes) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut pixels = 0;
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                let u = 2.0 * (x - b.x0) as f64 + 1.0 - c.w as f64;
                let v = 2.0 * (y - b.y0) as f64 + 1.0 - c.h as f64;
                if c.kind.contains(u / c.w as f64, v / c.h as f64) {
                    labels[y * spec.width + x] = c.class;
                    pixels += 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        placements.push(Placement {
            class: c.class,
            kind: c.kind,
            bbox: BoundingBox::new(x0, y0, x1, y1),
            pixels,
        });
    }
    let seg = SegMap::new(spec.width, spec.height, spec.palette.num_classes(), labels)?;
    let (rgb, ir) = render(&seg, &spec.palette, spec.noise_level, &mut rng);
    Ok((ScenePair { seg, rgb, ir }, placements))
}

pub fn gen_scene(spec: &SceneSpec) -> Result<ScenePair> {
    gen_scene_logged(spec).map(|(pair, _)| pair)
}

fn render(
    seg: &SegMap,
    palette: &ClassPalette,
    noise_level: f32,
    rng: &mut SeededRng,
) -> (Image, Image) {
    let n = seg.labels().len();
    let mut rgb = Vec::with_capacity(3 * n);
    let mut ir = Vec::with_capacity(n);
    let noise = noise_level as f64;
    for &l in seg.labels() {
        for c in palette.rgb_f32(l) {
            rgb.push((c as f64 + rng.uniform_range(-noise, noise)) as f32);
        }
        ir.push((palette.ir_f32(l) as f64 + rng.uniform_range(-noise, noise)) as f32);
    }
    let mut rgb = Image::new(seg.width(), seg.height(), 3, rgb).expect("sized");
    let mut ir = Image::new(seg.width(), seg.height(), 1, ir).expect("sized");
    rgb.quantize();
    ir.quantize();
    (rgb, ir)
}

/// Noise-free rendering of a map.
pub fn render_clean(seg: &SegMap, palette: &ClassPalette) -> (Image, Image) {
    render(seg, palette, 0.0, &mut SeededRng::new(0))
}

/// Scene `i` uses seed `base_seed + i`.
pub fn gen_corpus(template: &SceneSpec, count: usize, base_seed: u64) -> Result<Vec<ScenePair>> {
    if count == 0 {
        return Err(SynthError::InvalidSpec("corpus count must be at least 1".into()));
    }
    (0..count)
        .map(|i| {
            let spec = SceneSpec {
                seed: base_seed.wrapping_add(i as u64),
                ..template.clone()
            };
            gen_scene(&spec)
        })
        .collect()
}

fn scene_stem(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("scene_{index}"))
}

/// Writes `scene_<i>.{segmap,ppm,pgm}`, `palette.txt` and `manifest.txt`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    corpus: &[ScenePair],
    template: &SceneSpec,
    base_seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, scene) in corpus.iter().enumerate() {
        let stem = scene_stem(dir, i);
        scene.seg.save(stem.with_extension("segmap"))?;
        scene.rgb.save(stem.with_extension("ppm"))?;
        scene.ir.save(stem.with_extension("pgm"))?;
    }
    std::fs::write(dir.join("palette.txt"), template.palette.to_text())?;
    let mut m = String::new();
    let classes: Vec<String> = template.classes_in_use.iter().map(u8::to_string).collect();
    writeln!(m, "count = {}", corpus.len()).unwrap();
    writeln!(m, "base_seed = {base_seed}").unwrap();
    writeln!(m, "width = {}", template.width).unwrap();
    writeln!(m, "height = {}", template.height).unwrap();
    writeln!(m, "objects_min = {}", template.object_count_range.0).unwrap();
    writeln!(m, "objects_max = {}", template.object_count_range.1).unwrap();
    writeln!(m, "noise_level = {}", template.noise_level).unwrap();
    writeln!(m, "classes = {}", classes.join(",")).unwrap();
    for i in 0..corpus.len() {
        writeln!(m, "scene_{i} = {}", base_seed.wrapping_add(i as u64)).unwrap();
    }
    std::fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

/// Loads one externally supplied or generated triple.
pub fn load_scene(dir: impl AsRef<Path>, index: usize) -> Result<ScenePair> {
    let stem = scene_stem(dir.as_ref(), index);
    let seg = SegMap::load(stem.with_extension("segmap"))?;
    let rgb = Image::load(stem.with_extension("ppm"))?;
    let ir = Image::load(stem.with_extension("pgm"))?;
    let dims = (seg.width(), seg.height());
    if (rgb.width(), rgb.height()) != dims || (ir.width(), ir.height()) != dims {
        return Err(SynthError::Corpus(format!(
            "scene {index}: map and images disagree on size"
        )));
    }
    if rgb.channels() != 3 || ir.channels() != 1 {
        return Err(SynthError::Corpus(format!("scene {index}: wrong channel counts")));
    }
    Ok(ScenePair { seg, rgb, ir })
}

/// Loads every scene listed by `manifest.txt` (its `count` entry).
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let count = manifest
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "count")
        .and_then(|(_, v)| v.trim().parse::<usize>().ok())
        .ok_or_else(|| SynthError::Corpus("manifest has no count".into()))?;
    (0..count).map(|i| load_scene(dir, i)).collect()
}

//! Segmentation maps, the class palette, and one-hot encoding.
//!
//! A [`SegMap`] is the single semantic object the sender transmits. The
//! one-hot form ([`OneHotMap`]) is laid out pixel-major, channel-minor so the
//! bit stream built from it in [`crate::wire`] is fully determined.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes at the start of a `.segmap` file.
pub const SEGMAP_MAGIC: &[u8; 4] = b"SGMP";
/// Current `.segmap` file version.
pub const SEGMAP_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SegMapError {
    #[error("label {label} at pixel {pixel} is out of range for {num_classes} classes")]
    InvalidLabel {
        pixel: usize,
        label: u8,
        num_classes: u8,
    },
    #[error("malformed one-hot map: pixel {pixel} has channel sum {sum}")]
    MalformedOneHot { pixel: usize, sum: u32 },
    #[error("factor {factor} does not divide map size {width}x{height}")]
    NonDivisibleFactor {
        factor: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid dimensions {width}x{height} with {num_classes} classes")]
    InvalidDimensions {
        width: usize,
        height: usize,
        num_classes: usize,
    },
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("bad segmap magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported segmap version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SegMapError> = std::result::Result<T, E>;

/// One entry of a [`ClassPalette`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
    pub ir: u8,
}

/// Ordered class table. Class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    classes: Vec<ClassInfo>,
}

impl ClassPalette {
    /// Builds a palette, checking contiguous ids and pairwise-distinct colors
    /// and infrared intensities.
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() || classes.len() > 255 {
            return Err(SegMapError::InvalidPalette(format!(
                "class count {} outside 1..=255",
                classes.len()
            )));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(SegMapError::InvalidPalette(format!(
                    "class ids must be contiguous from 0, found {} at position {i}",
                    c.id
                )));
            }
            for other in &classes[..i] {
                if other.rgb == c.rgb {
                    return Err(SegMapError::InvalidPalette(format!(
                        "classes {} and {} share an RGB color",
                        other.id, c.id
                    )));
                }
                if other.ir == c.ir {
                    return Err(SegMapError::InvalidPalette(format!(
                        "classes {} and {} share an IR intensity",
                        other.id, c.id
                    )));
                }
            }
        }
        Ok(Self { classes })
    }

    /// Background plus eight urban street obstacle classes. The infrared
    /// intensities put `person` at the top of the range.
    pub fn urban() -> Self {
        let table: [(&str, [u8; 3], u8); 9] = [
            ("background", [70, 70, 70], 30),
            ("car", [30, 60, 200], 230),
            ("person", [230, 40, 40], 255),
            ("bike", [40, 190, 60], 120),
            ("curve", [200, 200, 40], 60),
            ("car_stop", [200, 60, 200], 180),
            ("guardrail", [40, 200, 200], 150),
            ("color_cone", [255, 150, 0], 205),
            ("bump", [150, 110, 60], 90),
        ];
        let classes = table
            .iter()
            .enumerate()
            .map(|(i, (name, rgb, ir))| ClassInfo {
                id: i as u8,
                name: (*name).to_string(),
                rgb: *rgb,
                ir: *ir,
            })
            .collect();
        Self::new(classes).expect("built-in palette is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> u8 {
        self.classes.len() as u8
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn get(&self, id: u8) -> Option<&ClassInfo> {
        self.classes.get(id as usize)
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Color as floats in `[0, 1]`.
    pub fn rgb_f32(&self, id: u8) -> [f32; 3] {
        let c = self.classes[id as usize].rgb;
        [
            c[0] as f32 / 255.0,
            c[1] as f32 / 255.0,
            c[2] as f32 / 255.0,
        ]
    }

    pub fn ir_f32(&self, id: u8) -> f32 {
        self.classes[id as usize].ir as f32 / 255.0
    }

    /// Parses `id,name,r,g,b,ir` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(SegMapError::InvalidPalette(format!(
                    "line {}: expected 6 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<u8>().map_err(|e| {
                    SegMapError::InvalidPalette(format!("line {}: {s:?}: {e}", lineno + 1))
                })
            };
            classes.push(ClassInfo {
                id: num(fields[0])?,
                name: fields[1].to_string(),
                rgb: [num(fields[2])?, num(fields[3])?, num(fields[4])?],
                ir: num(fields[5])?,
            });
        }
        Self::new(classes)
    }

    pub fn to_text(&self) -> String {
        self.classes
            .iter()
            .map(|c| {
                format!(
                    "{},{},{},{},{},{}\n",
                    c.id, c.name, c.rgb[0], c.rgb[1], c.rgb[2], c.ir
                )
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl Default for ClassPalette {
    fn default() -> Self {
        Self::urban()
    }
}

/// Row-major grid of class labels.
#[derive(Clone, PartialEq, Eq)]
pub struct SegMap {
    width: usize,
    height: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

impl fmt::Debug for SegMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SegMap")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("num_classes", &self.num_classes)
            .finish_non_exhaustive()
    }
}

impl SegMap {
    pub fn new(width: usize, height: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(SegMapError::InvalidDimensions {
                width,
                height,
                num_classes: num_classes as usize,
            });
        }
        if labels.len() != width * height {
            return Err(SegMapError::LengthMismatch {
                expected: width * height,
                actual: labels.len(),
            });
        }
        if let Some((pixel, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(SegMapError::InvalidLabel {
                pixel,
                label,
                num_classes,
            });
        }
        Ok(Self {
            width,
            height,
            num_classes,
            labels,
        })
    }

    /// A map where every pixel carries `label`.
    pub fn uniform(width: usize, height: usize, num_classes: u8, label: u8) -> Result<Self> {
        Self::new(width, height, num_classes, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Sorted, deduplicated list of the classes that occur in the map.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = vec![false; self.num_classes as usize];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c as usize]).collect()
    }

    /// Serializes to the `.segmap` layout: magic, version, width u16 LE,
    /// height u16 LE, num_classes u8, then one label byte per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + self.labels.len());
        out.extend_from_slice(SEGMAP_MAGIC);
        out.push(SEGMAP_VERSION);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.push(self.num_classes);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 10 {
            return Err(SegMapError::LengthMismatch {
                expected: 10,
                actual: data.len(),
            });
        }
        let magic: [u8; 4] = data[..4].try_into().unwrap();
        if &magic != SEGMAP_MAGIC {
            return Err(SegMapError::BadMagic(magic));
        }
        if data[4] != SEGMAP_VERSION {
            return Err(SegMapError::UnsupportedVersion(data[4]));
        }
        let width = u16::from_le_bytes([data[5], data[6]]) as usize;
        let height = u16::from_le_bytes([data[7], data[8]]) as usize;
        let num_classes = data[9];
        let body = &data[10..];
        if body.len() != width * height {
            return Err(SegMapError::LengthMismatch {
                expected: width * height,
                actual: body.len(),
            });
        }
        Self::new(width, height, num_classes, body.to_vec())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One-hot expansion of a [`SegMap`]: `width * height * num_classes` bits,
/// pixel-major then channel.
#[derive(Clone, PartialEq, Eq)]
pub struct OneHotMap {
    width: usize,
    height: usize,
    num_classes: u8,
    bits: Vec<u8>,
}

impl fmt::Debug for OneHotMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OneHotMap")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("num_classes", &self.num_classes)
            .finish_non_exhaustive()
    }
}

impl OneHotMap {
    /// Validates that every pixel has exactly one set channel.
    pub fn from_bits(width: usize, height: usize, num_classes: u8, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(SegMapError::InvalidDimensions {
                width,
                height,
                num_classes: num_classes as usize,
            });
        }
        let c = num_classes as usize;
        if bits.len() != width * height * c {
            return Err(SegMapError::LengthMismatch {
                expected: width * height * c,
                actual: bits.len(),
            });
        }
        for (pixel, chunk) in bits.chunks_exact(c).enumerate() {
            let mut sum = 0u32;
            for &b in chunk {
                if b > 1 {
                    return Err(SegMapError::MalformedOneHot { pixel, sum: b as u32 });
                }
                sum += b as u32;
            }
            if sum != 1 {
                return Err(SegMapError::MalformedOneHot { pixel, sum });
            }
        }
        Ok(Self {
            width,
            height,
            num_classes,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Label of the pixel at linear index `p`.
    pub fn label_at(&self, p: usize) -> u8 {
        let c = self.num_classes as usize;
        self.bits[p * c..(p + 1) * c]
            .iter()
            .position(|&b| b == 1)
            .expect("one-hot invariant") as u8
    }

    /// Channel-first planes `[C, H, W]` as floats, the layout the denoiser
    /// consumes.
    pub fn to_planes(&self) -> Vec<f32> {
        let c = self.num_classes as usize;
        let hw = self.width * self.height;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            out[self.label_at(p) as usize * hw + p] = 1.0;
        }
        out
    }
}

pub fn one_hot_encode(seg: &SegMap) -> OneHotMap {
    let c = seg.num_classes as usize;
    let mut bits = vec![0u8; seg.labels.len() * c];
    for (p, &l) in seg.labels.iter().enumerate() {
        bits[p * c + l as usize] = 1;
    }
    OneHotMap {
        width: seg.width,
        height: seg.height,
        num_classes: seg.num_classes,
        bits,
    }
}

pub fn one_hot_decode(oh: &OneHotMap) -> Result<SegMap> {
    let c = oh.num_classes as usize;
    let mut labels = Vec::with_capacity(oh.width * oh.height);
    for (pixel, chunk) in oh.bits.chunks_exact(c).enumerate() {
        let sum: u32 = chunk.iter().map(|&b| b as u32).sum();
        if sum != 1 || chunk.iter().any(|&b| b > 1) {
            return Err(SegMapError::MalformedOneHot { pixel, sum });
        }
        labels.push(chunk.iter().position(|&b| b == 1).unwrap() as u8);
    }
    SegMap::new(oh.width, oh.height, oh.num_classes, labels)
}

/// Majority-vote downsampling over `factor x factor` blocks. Ties go to the
/// smallest class id.
pub fn downsample_onehot(oh: &OneHotMap, factor: usize) -> Result<OneHotMap> {
    if factor == 0 || oh.width % factor != 0 || oh.height % factor != 0 {
        return Err(SegMapError::NonDivisibleFactor {
            factor,
            width: oh.width,
            height: oh.height,
        });
    }
    let c = oh.num_classes as usize;
    let (ow, oh_) = (oh.width / factor, oh.height / factor);
    let mut bits = vec![0u8; ow * oh_ * c];
    let mut counts = vec![0usize; c];
    for by in 0..oh_ {
        for bx in 0..ow {
            counts.iter_mut().for_each(|n| *n = 0);
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    counts[oh.label_at(y * oh.width + x) as usize] += 1;
                }
            }
            // max_by_key returns the last maximum, so scan manually for the first.
            let mut best = 0;
            for (k, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = k;
                }
            }
            bits[(by * ow + bx) * c + best] = 1;
        }
    }
    Ok(OneHotMap {
        width: ow,
        height: oh_,
        num_classes: oh.num_classes,
        bits,
    })
}

//! VOC-layout segmentation data: split lists, JPEG images, palette masks,
//! fixed-size samples and seeded batching.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vocseg_nn::Tensor;

use crate::error::{Result, SegError};
use crate::palette::{read_palette_png, PaletteIndices};
use crate::raster::{resize_bilinear, resize_nearest, ClassMask, ImageRaster, CHANNELS};

pub const NUM_CLASSES: usize = 21;
pub const VOID_LABEL: u8 = 255;
pub const INPUT_SIZE: usize = 224;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.name() == s)
            .ok_or_else(|| SegError::Invalid(format!("unknown split `{s}`")))
    }
}

/// A VOC directory: `ImageSets/Segmentation/<split>.txt`, `JPEGImages/<id>.jpg`,
/// `SegmentationClass/<id>.png`.
#[derive(Clone, Debug)]
pub struct DatasetRoot {
    path: PathBuf,
    splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetRoot {
    /// Reads every split list present under `path` and checks they are disjoint.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let list = split_list_path(&path, split);
            if list.exists() {
                splits.insert(split, read_split_list(&list)?);
            }
        }
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for (&split, ids) in &splits {
            for id in ids {
                if let Some(first) = owner.insert(id, split) {
                    if first != split {
                        return Err(SegError::OverlappingSplits {
                            id: id.clone(),
                            first: first.name(),
                            second: split.name(),
                        });
                    }
                }
            }
        }
        Ok(Self { path, splits })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn split_ids(&self, split: Split) -> Option<&[String]> {
        self.splits.get(&split).map(Vec::as_slice)
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.path.join("JPEGImages").join(format!("{id}.jpg"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.path.join("SegmentationClass").join(format!("{id}.png"))
    }

    /// Identifiers of `split` in file order, each verified to have an image and a mask.
    pub fn load_split(&self, split: Split) -> Result<Vec<String>> {
        let list = split_list_path(&self.path, split);
        if !list.exists() {
            return Err(SegError::MissingSplit(list));
        }
        let ids = read_split_list(&list)?;
        for id in &ids {
            for (kind, path) in [("image", self.image_path(id)), ("mask", self.mask_path(id))] {
                if !path.is_file() {
                    return Err(SegError::MissingFile {
                        id: id.clone(),
                        kind,
                        path,
                    });
                }
            }
        }
        Ok(ids)
    }

    /// Reads, decodes and resizes one sample to `size x size`.
    pub fn load_sample(&self, id: &str, size: usize) -> Result<SegSample> {
        let image = load_rgb(&self.image_path(id))?;
        let mask_path = self.mask_path(id);
        let indices = read_palette_png(&mask_path)?;
        let mask = decode_mask(&indices).map_err(|e| match e {
            SegError::PaletteIndex { index, x, y } => SegError::MaskFormat {
                path: mask_path.clone(),
                msg: format!("palette index {index} at (x={x}, y={y}) is not a VOC class or the void label"),
            },
            other => other,
        })?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(SegError::Shape(format!(
                "sample {id}: image is {}x{}, mask is {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        resize_sample(id, &image, &mask, size)
    }

    pub fn load_samples(&self, split: Split, size: usize) -> Result<Vec<SegSample>> {
        self.load_split(split)?
            .iter()
            .map(|id| self.load_sample(id, size))
            .collect()
    }
}

pub fn split_list_path(root: &Path, split: Split) -> PathBuf {
    root.join("ImageSets").join("Segmentation").join(format!("{split}.txt"))
}

fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(SegError::io(path))?;
    Ok(text
        .lines()
        .filter_map(|line| line.split_whitespace().next())
        .map(str::to_string)
        .collect())
}

pub fn load_rgb(path: &Path) -> Result<ImageRaster> {
    let to_err = |source| SegError::Image {
        path: path.to_path_buf(),
        source,
    };
    let img = image::ImageReader::open(path)
        .map_err(SegError::io(path))?
        .with_guessed_format()
        .map_err(SegError::io(path))?
        .decode()
        .map_err(to_err)?;
    Ok(ImageRaster::from_rgb8(&img.to_rgb8()))
}

/// Maps palette indices to class ids: 0..=20 kept, the void label 255
/// becomes background, anything else is an error naming the pixel.
pub fn decode_mask(raw: &PaletteIndices) -> Result<ClassMask> {
    let data = raw
        .indices
        .iter()
        .enumerate()
        .map(|(i, &index)| match index {
            v if (v as usize) < NUM_CLASSES => Ok(v),
            VOID_LABEL => Ok(0),
            _ => Err(SegError::PaletteIndex {
                index,
                x: i % raw.width.max(1),
                y: i / raw.width.max(1),
            }),
        })
        .collect::<Result<Vec<u8>>>()?;
    ClassMask::new(raw.width, raw.height, data)
}

/// One geometry-locked image/mask pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: ImageRaster,
    pub mask: ClassMask,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: ImageRaster, mask: ClassMask) -> Result<Self> {
        let id = id.into();
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(SegError::Shape(format!(
                "sample {id}: image {}x{} vs mask {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        if let Some(pixel) = mask.data.iter().position(|&c| c as usize >= NUM_CLASSES) {
            return Err(SegError::ClassRange {
                class: mask.data[pixel],
                pixel,
            });
        }
        Ok(Self { id, image, mask })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Resizes to `target x target`: bilinear for the image, nearest for the mask.
pub fn resize_sample(id: &str, image: &ImageRaster, mask: &ClassMask, target: usize) -> Result<SegSample> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(SegError::Shape(format!(
            "sample {id}: image {}x{} vs mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let image = resize_bilinear(image, target, target)?;
    let mask = resize_nearest(mask, target, target)?;
    SegSample::new(id, image, mask)
}

/// Stacked samples: images `(B, 3, H, W)`, masks `(B, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<u8>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SegSample>) -> Result<Self> {
        let samples: Vec<&SegSample> = samples.into_iter().collect();
        let first = samples
            .first()
            .ok_or_else(|| SegError::Invalid("a batch needs at least one sample".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut images = Vec::with_capacity(samples.len() * CHANNELS * w * h);
        let mut masks = Vec::with_capacity(samples.len() * w * h);
        for s in &samples {
            if (s.width(), s.height()) != (w, h) {
                return Err(SegError::Shape(format!(
                    "sample {} is {}x{}, batch is {w}x{h}",
                    s.id,
                    s.width(),
                    s.height()
                )));
            }
            images.extend_from_slice(&s.image.data);
            masks.extend_from_slice(&s.mask.data);
        }
        Ok(Self {
            images: Tensor::from_vec([samples.len(), CHANNELS, h, w], images)?,
            masks,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.height()
    }

    pub fn width(&self) -> usize {
        self.images.width()
    }

    pub fn sample(&self, i: usize) -> SegSample {
        let (h, w) = (self.height(), self.width());
        SegSample {
            id: self.ids[i].clone(),
            image: ImageRaster {
                width: w,
                height: h,
                data: self.images.item(i).to_vec(),
            },
            mask: ClassMask {
                width: w,
                height: h,
                data: self.masks[i * h * w..(i + 1) * h * w].to_vec(),
            },
        }
    }

    pub fn samples(&self) -> Vec<SegSample> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }
}

/// Sample visiting order: identity, or a ChaCha8 shuffle seeded by `seed`.
pub fn batch_order(len: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Partitions `samples` into batches of `batch_size` (last may be smaller).
/// The order depends only on `(samples.len(), shuffle, seed)`.
pub fn make_batches(samples: &[SegSample], batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(SegError::BatchSize(batch_size));
    }
    if samples.is_empty() {
        return Err(SegError::Invalid("cannot batch an empty sample list".into()));
    }
    batch_order(samples.len(), shuffle, seed)
        .chunks(batch_size)
        .map(|chunk| Batch::from_samples(chunk.iter().map(|&i| &samples[i])))
        .collect()
}

/// Pixels per class over `samples` as stored (no augmentation).
pub fn class_pixel_counts(samples: &[SegSample]) -> [u64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for s in samples {
        for &c in &s.mask.data {
            counts[c as usize] += 1;
        }
    }
    counts
}

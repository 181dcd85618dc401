//! Synthetic shape datasets, class splits and N-way K-shot episodes.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

/// Shape families drawn by the generator. Classes beyond the family count
/// reuse the families at a different size band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    HorizontalBars,
    VerticalBars,
    Diamond,
    Saltire,
    Frame,
    Ell,
    Tee,
    Checker,
    HalfDisk,
    DotPair,
    Ellipse,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 16] = [
        ShapeFamily::Square,
        ShapeFamily::Disk,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::HorizontalBars,
        ShapeFamily::VerticalBars,
        ShapeFamily::Diamond,
        ShapeFamily::Saltire,
        ShapeFamily::Frame,
        ShapeFamily::Ell,
        ShapeFamily::Tee,
        ShapeFamily::Checker,
        ShapeFamily::HalfDisk,
        ShapeFamily::DotPair,
        ShapeFamily::Ellipse,
    ];

    /// Membership test in shape-local coordinates, `u, v` in `[-1, 1]`
    /// (`v` pointing down).
    fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        let r = (u * u + v * v).sqrt();
        match self {
            ShapeFamily::Square => au <= 0.8 && av <= 0.8,
            ShapeFamily::Disk => r <= 0.85,
            ShapeFamily::Triangle => (-0.8..=0.8).contains(&v) && au <= 0.5 * (v + 0.8),
            ShapeFamily::Cross => (au <= 0.25 && av <= 0.9) || (av <= 0.25 && au <= 0.9),
            ShapeFamily::Ring => (0.5..=0.9).contains(&r),
            ShapeFamily::HorizontalBars => au <= 0.9 && av <= 0.9 && ((v + 0.9) / 0.36) as i64 % 2 == 0,
            ShapeFamily::VerticalBars => au <= 0.9 && av <= 0.9 && ((u + 0.9) / 0.36) as i64 % 2 == 0,
            ShapeFamily::Diamond => au + av <= 0.95,
            ShapeFamily::Saltire => ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3) && au <= 0.85 && av <= 0.85,
            ShapeFamily::Frame => au <= 0.85 && av <= 0.85 && (au >= 0.5 || av >= 0.5),
            ShapeFamily::Ell => ((-0.8..=-0.35).contains(&u) && av <= 0.85) || ((0.4..=0.85).contains(&v) && au <= 0.8),
            ShapeFamily::Tee => ((-0.85..=-0.45).contains(&v) && au <= 0.85) || (au <= 0.22 && av <= 0.85),
            ShapeFamily::Checker => au <= 0.85 && av <= 0.85 && ((u >= 0.0) == (v >= 0.0)),
            ShapeFamily::HalfDisk => r <= 0.9 && v <= 0.0,
            ShapeFamily::DotPair => {
                ((u + 0.45).powi(2) + v * v).sqrt() <= 0.35 || ((u - 0.45).powi(2) + v * v).sqrt() <= 0.35
            }
            ShapeFamily::Ellipse => (u / 0.9).powi(2) + (v / 0.45).powi(2) <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Maximum centre displacement as a fraction of the image size.
    pub position_jitter: f64,
    /// Relative scale variation.
    pub scale_jitter: f64,
    pub meta_train_classes: usize,
    pub meta_val_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            image_size: 32,
            channels: 1,
            samples_per_class: 40,
            noise_sigma: 0.1,
            position_jitter: 0.15,
            scale_jitter: 0.15,
            meta_train_classes: 8,
            meta_val_classes: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(invalid!("synthetic spec needs classes and samples"));
        }
        if self.channels != 1 {
            return Err(invalid!("synthetic images are single-channel"));
        }
        if self.image_size < 8 {
            return Err(invalid!("image size must be at least 8"));
        }
        if self.meta_train_classes + self.meta_val_classes > self.num_classes {
            return Err(invalid!("split sizes exceed the class count"));
        }
        if self.noise_sigma < 0.0 || self.position_jitter < 0.0 || self.scale_jitter < 0.0 {
            return Err(invalid!("noise and jitter must be non-negative"));
        }
        Ok(())
    }

    pub fn family_of(class: usize) -> (ShapeFamily, usize) {
        let f = ShapeFamily::ALL.len();
        (ShapeFamily::ALL[class % f], class / f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub id: usize,
    /// `[channels, s, s]` images.
    pub samples: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub classes: Vec<ClassData>,
    pub meta_train: Vec<usize>,
    pub meta_val: Vec<usize>,
    pub meta_test: Vec<usize>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::MetaTrain => &self.meta_train,
            Split::MetaVal => &self.meta_val,
            Split::MetaTest => &self.meta_test,
        }
    }

    pub fn class(&self, id: usize) -> Result<&ClassData> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| invalid!("dataset has no class {id}"))
    }

    pub fn validate(&self) -> Result<()> {
        let splits = [&self.meta_train, &self.meta_val, &self.meta_test];
        for (i, a) in splits.iter().enumerate() {
            for b in &splits[i + 1..] {
                if a.iter().any(|c| b.contains(c)) {
                    return Err(invalid!("class splits overlap"));
                }
            }
            for &c in a.iter() {
                self.class(c)?;
            }
        }
        for class in &self.classes {
            for s in &class.samples {
                if s.shape() != [self.channels, self.image_size, self.image_size] {
                    return Err(invalid!("class {} has an image of shape {:?}", class.id, s.shape()));
                }
            }
        }
        Ok(())
    }

    /// Position of `class` within the meta-train split, used as the label
    /// of the global classifier.
    pub fn global_label(&self, class: usize) -> Option<usize> {
        self.meta_train.iter().position(|&c| c == class)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut classes = Vec::new();
        for class in &self.classes {
            let name = format!("class_{:03}", class.id);
            fs::create_dir_all(dir.join(&name))?;
            for (i, s) in class.samples.iter().enumerate() {
                s.save(dir.join(&name).join(format!("sample_{i:04}.tensor")))?;
            }
            classes.push(ManifestClass {
                id: class.id,
                dir: name,
                samples: class.samples.len(),
            });
        }
        let manifest = DatasetManifest {
            image_size: self.image_size,
            channels: self.channels,
            classes,
            splits: SplitManifest {
                meta_train: self.meta_train.clone(),
                meta_val: self.meta_val.clone(),
                meta_test: self.meta_test.clone(),
            },
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut classes = Vec::with_capacity(manifest.classes.len());
        for c in manifest.classes {
            let samples = (0..c.samples)
                .map(|i| Tensor::load(dir.join(&c.dir).join(format!("sample_{i:04}.tensor"))))
                .collect::<Result<Vec<_>>>()?;
            classes.push(ClassData { id: c.id, samples });
        }
        let ds = Self {
            image_size: manifest.image_size,
            channels: manifest.channels,
            classes,
            meta_train: manifest.splits.meta_train,
            meta_val: manifest.splits.meta_val,
            meta_test: manifest.splits.meta_test,
        };
        ds.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    image_size: usize,
    channels: usize,
    classes: Vec<ManifestClass>,
    splits: SplitManifest,
}

#[derive(Serialize, Deserialize)]
struct ManifestClass {
    id: usize,
    dir: String,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    meta_train: Vec<usize>,
    meta_val: Vec<usize>,
    meta_test: Vec<usize>,
}

/// Deterministic shape dataset. Class ids are shuffled into the splits.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let s = spec.image_size;
    let mut classes = Vec::with_capacity(spec.num_classes);
    for id in 0..spec.num_classes {
        let (family, band) = SyntheticSpec::family_of(id);
        let base_scale = 0.36 - 0.08 * (band % 3) as f64;
        let samples = (0..spec.samples_per_class)
            .map(|_| {
                let cy = 0.5 + rng.random_range(-1.0..=1.0) * spec.position_jitter;
                let cx = 0.5 + rng.random_range(-1.0..=1.0) * spec.position_jitter;
                let radius = base_scale * (1.0 + rng.random_range(-1.0..=1.0) * spec.scale_jitter);
                let mut img = render(family, s, cy, cx, radius);
                if spec.noise_sigma > 0.0 {
                    img.iter_mut()
                        .for_each(|p| *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
                Tensor::from_vec(&[1, s, s], img)
            })
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassData { id, samples });
    }
    let order = index::sample(&mut rng, spec.num_classes, spec.num_classes).into_vec();
    let (train, rest) = order.split_at(spec.meta_train_classes);
    let (val, test) = rest.split_at(spec.meta_val_classes);
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Dataset {
        image_size: s,
        channels: 1,
        classes,
        meta_train: sorted(train),
        meta_val: sorted(val),
        meta_test: sorted(test),
    })
}

/// Rasterises one shape with 2x2 supersampling. Centre and radius are in
/// units of the image size.
fn render(family: ShapeFamily, size: usize, cy: f64, cx: f64, radius: f64) -> Vec<f64> {
    const SUB: [f64; 2] = [0.25, 0.75];
    let mut img = vec![0.0; size * size];
    let sz = size as f64;
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0;
            for sy in SUB {
                for sx in SUB {
                    let v = ((i as f64 + sy) / sz - cy) / radius;
                    let u = ((j as f64 + sx) / sz - cx) / radius;
                    if u.abs() <= 1.0 && v.abs() <= 1.0 && family.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            img[i * size + j] = hits as f64 / 4.0;
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    pub class_id: usize,
    pub sample: usize,
    /// Episode slot `0..N`.
    pub slot: usize,
}

/// One N-way K-shot task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Slot-major: K items for slot 0, then slot 1, ...
    pub support: Vec<EpisodeItem>,
    /// Slot-major: Q items per slot.
    pub query: Vec<EpisodeItem>,
    /// Episode slot -> dataset class id.
    pub slot_map: Vec<usize>,
}

/// Uniformly draws `n_way` classes of `split` and `k_shot + n_query`
/// distinct samples of each; the first `k_shot` go to the support set.
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: Split,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    let classes = dataset.split(split);
    if n_way < 1 || k_shot < 1 || n_query < 1 {
        return Err(invalid!("N, K and Q must be at least 1"));
    }
    if classes.len() < n_way {
        return Err(invalid!("{split:?} split has {} classes, {n_way}-way requested", classes.len()));
    }
    let picked = index::sample(rng, classes.len(), n_way);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    let mut slot_map = Vec::with_capacity(n_way);
    for (slot, ci) in picked.iter().enumerate() {
        let class_id = classes[ci];
        let available = dataset.class(class_id)?.samples.len();
        if available < k_shot + n_query {
            return Err(invalid!(
                "class {class_id} has {available} samples, episode needs {}",
                k_shot + n_query
            ));
        }
        let draws = index::sample(rng, available, k_shot + n_query).into_vec();
        let item = |sample| EpisodeItem { class_id, sample, slot };
        support.extend(draws[..k_shot].iter().map(|&s| item(s)));
        query.extend(draws[k_shot..].iter().map(|&s| item(s)));
        slot_map.push(class_id);
    }
    Ok(Episode {
        n_way,
        k_shot,
        n_query,
        support,
        query,
        slot_map,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    FlipCrop,
}

pub const CROP_PADDING: usize = 2;

/// Random horizontal flip plus a random crop of the 2-pixel zero-padded
/// image back to its original size.
pub fn flip_crop<R: Rng>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(invalid!("flip_crop expects [c, h, w], got {:?}", image.shape())),
    };
    let flip = rng.random_bool(0.5);
    let pad = CROP_PADDING as i64;
    let dy = rng.random_range(-pad..=pad);
    let dx = rng.random_range(-pad..=pad);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let si = i as i64 + dy;
                let sj = j as i64 + dx;
                if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                    continue;
                }
                let sj = if flip { w as i64 - 1 - sj } else { sj };
                out[(ch * h + i) * w + j] = src[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}

/// Images of an episode stacked as `[items, c, s, s]`, with optional
/// augmentation.
pub fn stack_images<R: Rng>(
    dataset: &Dataset,
    items: &[EpisodeItem],
    augment: Augment,
    rng: &mut R,
) -> Result<Tensor> {
    let (c, s) = (dataset.channels, dataset.image_size);
    let mut data = Vec::with_capacity(items.len() * c * s * s);
    for item in items {
        let img = &dataset.class(item.class_id)?.samples[item.sample];
        match augment {
            Augment::None => data.extend_from_slice(img.data()),
            Augment::FlipCrop => data.extend_from_slice(flip_crop(img, rng)?.data()),
        }
    }
    Tensor::from_vec(&[items.len(), c, s, s], data)
}

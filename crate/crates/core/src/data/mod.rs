//! Datasets of labelled images: manifests, domain splits and batching.
//!
//! A *domain* is one `(class, context)` pair. Splits hold out whole domains,
//! so the test images of a class come from contexts that class never shows in
//! training.

pub mod pnm;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{streams, SeedRng};
use crate::tensor::Tensor;

pub use pnm::RgbImage;
pub use synth::{generate_synthetic, render_sample, SyntheticConfig};

pub const MANIFEST_HEADER: &str = "path,class,context,x0,y0,x1,y1";

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// Non-empty and inside a `width × height` image.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// One manifest row. The image itself is read on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
    /// Context id within the sample's class.
    pub context: usize,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Per class, context names in id order.
    pub context_names: Vec<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Number of samples per `(class, context)` domain.
    pub fn domain_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry((s.class, s.context)).or_insert(0) += 1;
        }
        counts
    }

    pub fn load_image(&self, index: usize) -> Result<RgbImage> {
        pnm::read_ppm(&self.samples[index].path)
    }

    /// The image as a `(1, 3, h, w)` tensor with values in `[0, 1]`.
    pub fn image_tensor(&self, index: usize) -> Result<Tensor<f32>> {
        let img = self.load_image(index)?;
        let plane = img.width * img.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, rgb) in img.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = f32::from(rgb[c]) / 255.0;
            }
        }
        Tensor::from_vec([1, 3, img.height, img.width], data)
    }
}

/// Reads a manifest. Relative image paths are resolved against the
/// manifest's directory; class and context labels become dense ids in order
/// of first appearance (context ids per class).
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::data(path, format!("missing header `{MANIFEST_HEADER}`"))),
    }
    let mut ds = Dataset::default();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut context_ids: Vec<HashMap<String, usize>> = Vec::new();
    for (lineno, line) in lines {
        let bad = |msg: String| Error::data(path, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() || fields[2].is_empty() {
            return Err(bad("path, class and context are required".into()));
        }
        let bbox = match &fields[3..] {
            ["", "", "", ""] => None,
            coords => {
                let v: Vec<usize> = coords
                    .iter()
                    .map(|f| f.parse().map_err(|_| bad(format!("bad bbox coordinate `{f}`"))))
                    .collect::<Result<_>>()?;
                let b = BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] };
                if b.x0 >= b.x1 || b.y0 >= b.y1 {
                    return Err(bad(format!("empty bbox {b:?}")));
                }
                Some(b)
            }
        };
        let image = base.join(fields[0]);
        if !image.is_file() {
            return Err(Error::data(&image, format!("image referenced on manifest line {} not found", lineno + 1)));
        }
        let next = class_ids.len();
        let class = *class_ids.entry(fields[1].to_string()).or_insert(next);
        if class == ds.class_names.len() {
            ds.class_names.push(fields[1].to_string());
            ds.context_names.push(Vec::new());
            context_ids.push(HashMap::new());
        }
        let next = context_ids[class].len();
        let context = *context_ids[class].entry(fields[2].to_string()).or_insert(next);
        if context == ds.context_names[class].len() {
            ds.context_names[class].push(fields[2].to_string());
        }
        ds.samples.push(Sample { path: image, class, context, bbox });
    }
    Ok(ds)
}

/// Train and test domains of one leave-N-contexts-out split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSplit {
    pub holdout: usize,
    pub seed: u64,
    pub train_domains: BTreeSet<(usize, usize)>,
    pub test_domains: BTreeSet<(usize, usize)>,
}

impl DomainSplit {
    pub fn train_indices(&self, ds: &Dataset) -> Vec<usize> {
        Self::select(ds, &self.train_domains)
    }

    pub fn test_indices(&self, ds: &Dataset) -> Vec<usize> {
        Self::select(ds, &self.test_domains)
    }

    fn select(ds: &Dataset, domains: &BTreeSet<(usize, usize)>) -> Vec<usize> {
        (0..ds.len()).filter(|&i| domains.contains(&(ds.samples[i].class, ds.samples[i].context))).collect()
    }
}

/// Holds out `n` contexts of every class, chosen uniformly without
/// replacement from a stream seeded by `(seed, class)`.
pub fn split_leave_n_contexts(ds: &Dataset, n: usize, seed: u64) -> Result<DomainSplit> {
    let mut per_class: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for s in &ds.samples {
        per_class.entry(s.class).or_default().insert(s.context);
    }
    let mut split = DomainSplit { holdout: n, seed, train_domains: BTreeSet::new(), test_domains: BTreeSet::new() };
    for (&class, contexts) in &per_class {
        if n >= contexts.len() {
            return Err(Error::invalid(
                "split_leave_n_contexts",
                format!("cannot hold out {n} contexts of class {class}, which has {}", contexts.len()),
            ));
        }
        let contexts: Vec<usize> = contexts.iter().copied().collect();
        let order = SeedRng::derive(seed, &[streams::SPLIT, class as u64]).permutation(contexts.len());
        for (rank, &pos) in order.iter().enumerate() {
            let side = if rank < n { &mut split.test_domains } else { &mut split.train_domains };
            side.insert((class, contexts[pos]));
        }
    }
    Ok(split)
}

/// Decoded images of a dataset subset, kept as bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    /// Dataset index of every image.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Interleaved RGB, image after image.
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn load(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut set = Self { height: 0, width: 0, indices: indices.to_vec(), labels: Vec::new(), pixels: Vec::new() };
        for &i in indices {
            let img = ds.load_image(i)?;
            let sample = &ds.samples[i];
            if set.labels.is_empty() {
                (set.height, set.width) = (img.height, img.width);
            } else if (img.height, img.width) != (set.height, set.width) {
                return Err(Error::data(
                    &sample.path,
                    format!("image is {}x{}, dataset images are {}x{}", img.height, img.width, set.height, set.width),
                ));
            }
            if let Some(b) = sample.bbox {
                if !b.fits(img.width, img.height) {
                    return Err(Error::data(&sample.path, format!("bbox {b:?} exceeds the image")));
                }
            }
            set.pixels.extend_from_slice(&img.pixels);
            set.labels.push(sample.class);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_bytes(&self, pos: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.pixels[pos * n..(pos + 1) * n]
    }

    /// Standardized `(len, 3, h, w)` tensor of the images at `positions`.
    pub fn tensor(&self, positions: &[usize], norm: &Normalization) -> Result<Tensor<f32>> {
        let plane = self.height * self.width;
        let scale: [f32; 3] = std::array::from_fn(|c| (1.0 / (255.0 * norm.std[c])) as f32);
        let shift: [f32; 3] = std::array::from_fn(|c| (norm.mean[c] / norm.std[c]) as f32);
        let mut data = vec![0.0f32; positions.len() * 3 * plane];
        for (b, &pos) in positions.iter().enumerate() {
            let out = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
            for (p, rgb) in self.image_bytes(pos).chunks(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + p] = f32::from(rgb[c]) * scale[c] - shift[c];
                }
            }
        }
        Tensor::from_vec([positions.len(), 3, self.height, self.width], data)
    }

    /// Batches in stored order.
    pub fn batches_in_order<'a>(&'a self, batch_size: usize, norm: &'a Normalization) -> Result<Batches<'a>> {
        Batches::new(self, (0..self.len()).collect(), batch_size, norm)
    }
}

/// Per-channel mean and standard deviation of pixel values in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Self = Self { mean: [0.0; 3], std: [1.0; 3] };

    /// Population statistics over every pixel of `set`. Integer sums keep
    /// the result exact and order independent. A constant channel gets a
    /// standard deviation of 1.
    pub fn fit(set: &ImageSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid("normalization", "no images to fit statistics on"));
        }
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for rgb in set.pixels.chunks(3) {
            for c in 0..3 {
                sum[c] += u64::from(rgb[c]);
                sq[c] += u64::from(rgb[c]) * u64::from(rgb[c]);
            }
        }
        let count = (set.pixels.len() / 3) as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| sum[c] as f64 / count / 255.0);
        let std = std::array::from_fn(|c| {
            let var = (sq[c] as f64 / count / (255.0 * 255.0) - mean[c] * mean[c]).max(0.0);
            if var > 1e-12 { var.sqrt() } else { 1.0 }
        });
        Ok(Self { mean, std })
    }
}

/// Iterator over `(images, labels)` batches.
pub struct Batches<'a> {
    set: &'a ImageSet,
    norm: &'a Normalization,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl<'a> Batches<'a> {
    fn new(set: &'a ImageSet, order: Vec<usize>, batch_size: usize, norm: &'a Normalization) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_iter", "batch size must be at least 1"));
        }
        Ok(Self { set, norm, order, batch_size, next: 0 })
    }

    /// Dataset positions in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<(Tensor<f32>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let positions = &self.order[self.next..end];
        self.next = end;
        let labels = positions.iter().map(|&p| self.set.labels[p]).collect();
        Some(self.set.tensor(positions, self.norm).map(|t| (t, labels)))
    }
}

/// Shuffled batches for one epoch. The permutation is a function of
/// `(shuffle_seed, epoch)` only; the final batch may be short.
pub fn batch_iter<'a>(
    set: &'a ImageSet,
    norm: &'a Normalization,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<Batches<'a>> {
    let order = SeedRng::derive(shuffle_seed, &[streams::SHUFFLE, epoch as u64]).permutation(set.len());
    Batches::new(set, order, batch_size, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.csv");
        fs::write(&path, format!("{MANIFEST_HEADER}\n{body}")).unwrap();
        path
    }

    fn tiny_image(dir: &Path, name: &str, w: usize, h: usize, value: u8) {
        let mut img = RgbImage::new(w, h);
        img.pixels.fill(value);
        pnm::write_ppm(&dir.join(name), &img).unwrap();
    }

    #[test]
    fn header_only_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_manifest(&write_manifest(dir.path(), "")).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes(), 0);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&write_manifest(dir.path(), "nope.ppm,a,b,,,,\n")).unwrap_err();
        assert!(err.to_string().contains("nope.ppm"), "{err}");
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_image(dir.path(), "a.ppm", 4, 4, 0);
        for body in ["a.ppm,x,y\n", "a.ppm,x,y,1,2,,\n", "a.ppm,x,y,3,0,1,4\n", "a.ppm,,y,,,,\n"] {
            let err = load_manifest(&write_manifest(dir.path(), body)).unwrap_err();
            assert!(err.to_string().contains("line 2"), "{body}: {err}");
        }
        fs::write(dir.path().join("m.csv"), "file,label\n").unwrap();
        assert!(load_manifest(&dir.path().join("m.csv")).is_err());
    }

    #[test]
    fn ids_follow_first_appearance() {
        let dir = tempfile::tempdir().unwrap();
        tiny_image(dir.path(), "a.ppm", 4, 4, 0);
        let body = "a.ppm,dog,snow,,,,\na.ppm,cat,grass,0,0,2,2\na.ppm,dog,grass,,,,\na.ppm,cat,grass,,,,\n";
        let ds = load_manifest(&write_manifest(dir.path(), body)).unwrap();
        assert_eq!(ds.class_names, ["dog", "cat"]);
        assert_eq!(ds.context_names, vec![vec!["snow", "grass"], vec!["grass"]]);
        let ids: Vec<_> = ds.samples.iter().map(|s| (s.class, s.context)).collect();
        assert_eq!(ids, [(0, 0), (1, 0), (0, 1), (1, 0)]);
        assert_eq!(ds.samples[1].bbox, Some(BBox { x0: 0, y0: 0, x1: 2, y1: 2 }));
    }

    #[test]
    fn heterogeneous_sizes_and_oversized_boxes_fail_on_load() {
        let dir = tempfile::tempdir().unwrap();
        tiny_image(dir.path(), "a.ppm", 4, 4, 0);
        tiny_image(dir.path(), "b.ppm", 5, 4, 0);
        let ds = load_manifest(&write_manifest(dir.path(), "a.ppm,x,y,,,,\nb.ppm,x,y,,,,\n")).unwrap();
        assert!(ImageSet::load(&ds, &[0]).is_ok());
        assert!(ImageSet::load(&ds, &[0, 1]).unwrap_err().to_string().contains("b.ppm"));
        let ds = load_manifest(&write_manifest(dir.path(), "a.ppm,x,y,0,0,5,1\n")).unwrap();
        assert!(ImageSet::load(&ds, &[0]).is_err());
    }

    fn grid(classes: usize, contexts: usize, per: usize) -> Dataset {
        let mut ds = Dataset::default();
        for k in 0..classes {
            ds.class_names.push(format!("c{k}"));
            ds.context_names.push((0..contexts).map(|j| format!("x{j}")).collect());
            for j in 0..contexts {
                for _ in 0..per {
                    ds.samples.push(Sample { path: PathBuf::new(), class: k, context: j, bbox: None });
                }
            }
        }
        ds
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = grid(4, 6, 3);
        let s = split_leave_n_contexts(&ds, 3, 7).unwrap();
        assert_eq!(s.test_domains.len(), 12);
        assert_eq!(s.train_domains.len(), 12);
        assert!(s.train_domains.is_disjoint(&s.test_domains));
        for k in 0..4 {
            assert_eq!(s.test_domains.iter().filter(|d| d.0 == k).count(), 3);
        }
        assert_eq!(s.train_indices(&ds).len() + s.test_indices(&ds).len(), ds.len());
        assert_eq!(s, split_leave_n_contexts(&ds, 3, 7).unwrap());

        let all = split_leave_n_contexts(&ds, 0, 7).unwrap();
        assert!(all.test_domains.is_empty());
        assert_eq!(all.train_indices(&ds).len(), ds.len());
        assert!(split_leave_n_contexts(&ds, 6, 7).is_err());
    }

    #[test]
    fn split_is_roughly_uniform() {
        // each context is held out with probability n / C = 1/2
        let ds = grid(1, 4, 1);
        let mut hits = [0usize; 4];
        for seed in 0..2000 {
            for &(_, j) in &split_leave_n_contexts(&ds, 2, seed).unwrap().test_domains {
                hits[j] += 1;
            }
        }
        for h in hits {
            assert!((900..1100).contains(&h), "{hits:?}");
        }
    }

    fn constant_set(values: &[u8], h: usize, w: usize) -> ImageSet {
        let mut pixels = Vec::new();
        for &v in values {
            pixels.extend(std::iter::repeat_n(v, h * w * 3));
        }
        ImageSet { height: h, width: w, indices: (0..values.len()).collect(), labels: vec![0; values.len()], pixels }
    }

    #[test]
    fn batches_cover_a_permutation() {
        let set = constant_set(&(0..100).collect::<Vec<u8>>(), 1, 1);
        let norm = Normalization::IDENTITY;
        let sizes: Vec<usize> = batch_iter(&set, &norm, 32, 3, 0).unwrap().map(|b| b.unwrap().1.len()).collect();
        assert_eq!(sizes, [32, 32, 32, 4]);
        let seen: Vec<u32> = batch_iter(&set, &norm, 32, 3, 0)
            .unwrap()
            .flat_map(|b| b.unwrap().0.data().chunks(3).map(|c| (c[0] * 255.0).round() as u32).collect::<Vec<_>>())
            .collect();
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        let again = batch_iter(&set, &norm, 32, 3, 0).unwrap();
        let next_epoch = batch_iter(&set, &norm, 32, 3, 1).unwrap();
        assert_eq!(batch_iter(&set, &norm, 32, 3, 0).unwrap().order(), again.order());
        assert_ne!(again.order(), next_epoch.order());
        assert!(batch_iter(&set, &norm, 0, 3, 0).is_err());
    }

    #[test]
    fn normalization_standardizes() {
        let set = constant_set(&[0, 255, 51, 102], 2, 2);
        let norm = Normalization::fit(&set).unwrap();
        let t = set.tensor(&[0, 1, 2, 3], &norm).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
        let flat = Normalization::fit(&constant_set(&[7, 7], 1, 1)).unwrap();
        assert_eq!(flat.std, [1.0; 3]);
        assert!(Normalization::fit(&constant_set(&[], 1, 1)).is_err());
    }
}
